//! Desk-scale laboratory for line-of-sight blockage prediction on mmWave
//! vehicular links.
//!
//! The crate covers the full pipeline: a synthetic street scene with moving
//! vehicles and occluders ([`scenesim`]), a beam-steering codebook and
//! geometric OFDM channel ([`channel`]), multimodal observation-window
//! datasets ([`dataset`]), a from-scratch CNN + ViT + GRU predictor with its
//! bounding-box baseline ([`models`]) on top of a reverse-mode autodiff core
//! ([`numcore`]), and the link-level evaluations ([`eval`]).

pub mod channel;
pub mod dataset;
pub mod eval;
pub mod models;
pub mod numcore;
pub mod pipeline;
pub mod scenesim;
