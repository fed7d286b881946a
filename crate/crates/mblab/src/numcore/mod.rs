//! Dense-tensor numerical core: reverse-mode automatic differentiation over
//! 64-bit reals, the layer primitives used by the predictor models, the Adam
//! optimizer with global-norm gradient clipping, a central finite-difference
//! gradient checker, and the binary checkpoint container.

mod adam;
mod attention;
mod checkpoint;
mod complex;
mod fdcheck;
mod gru;
mod tape;
mod tensor;

pub use adam::{adam_step, clip_gradients, global_grad_norm, OptimizerState};
pub use attention::{multi_head_attention, AttentionVars};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use complex::ComplexVector;
pub use fdcheck::{finite_diff_check, is_relu_kink, CoordSelection, FdReport};
pub use gru::{gru_cell, GruCellVars};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use std::fmt;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum NumError {
    /// An operation was given tensors whose shapes do not conform to its
    /// contract. Carries the op name and a rendering of the offending shapes.
    ShapeMismatch { op: &'static str, detail: String },
    /// Dropout probability outside `[0, 1)`.
    InvalidDropout(f64),
    /// A gradient passed to the optimizer contained NaN or infinity.
    NonFiniteGradient { index: usize },
    /// Backward was requested from a non-scalar node.
    NonScalarBackward { shape: Vec<usize> },
    /// Checkpoint container problems (I/O, bad magic, corruption).
    Checkpoint(String),
    /// Mismatched real/imaginary array lengths for a complex vector.
    ComplexLength { re: usize, im: usize },
}

impl fmt::Display for NumError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in `{op}`: {detail}")
            }
            NumError::InvalidDropout(p) => {
                write!(f, "dropout probability {p} outside [0, 1)")
            }
            NumError::NonFiniteGradient { index } => {
                write!(f, "non-finite gradient for parameter #{index}")
            }
            NumError::NonScalarBackward { shape } => {
                write!(f, "backward requires a scalar node, got shape {shape:?}")
            }
            NumError::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            NumError::ComplexLength { re, im } => {
                write!(f, "complex vector parts differ in length: re={re}, im={im}")
            }
        }
    }
}

impl std::error::Error for NumError {}
