//! Beam-steering codebook and geometric OFDM channel math: codebook
//! construction over a uniform linear array, per-subcarrier channel
//! responses from path sets, received-SNR and optimal-beam selection, and
//! Shannon capacity.

use std::fmt;
use std::io::Write;

use num_complex::Complex64;

use crate::numcore::ComplexVector;

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Floor applied when converting zero power to decibels, keeping emitted
/// traces finite.
pub const DB_FLOOR: f64 = -300.0;

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelError {
    InvalidConfig(String),
    EmptyCodebook,
    DimensionMismatch { expected: usize, found: usize },
    Io(String),
}

impl fmt::Display for ChannelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelError::InvalidConfig(msg) => write!(f, "invalid channel config: {msg}"),
            ChannelError::EmptyCodebook => write!(f, "codebook has no beams"),
            ChannelError::DimensionMismatch { expected, found } => {
                write!(f, "antenna count mismatch: expected {expected}, found {found}")
            }
            ChannelError::Io(msg) => write!(f, "i/o: {msg}"),
        }
    }
}

impl std::error::Error for ChannelError {}

/// Parameters of the beam-steering codebook: `n_beams` azimuth-quantized
/// beams over `n_antennas` elements spaced `spacing` wavelengths apart.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodebookConfig {
    pub n_beams: usize,
    pub n_antennas: usize,
    /// Element spacing in wavelength units (0.5 = half-wavelength).
    pub spacing: f64,
    /// Carrier wavelength in meters.
    pub wavelength: f64,
}

impl CodebookConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.n_beams < 1 || self.n_antennas < 1 {
            return Err(ChannelError::InvalidConfig(format!(
                "need at least one beam and one antenna, got N={}, M={}",
                self.n_beams, self.n_antennas
            )));
        }
        if self.spacing <= 0.0 || self.wavelength <= 0.0 {
            return Err(ChannelError::InvalidConfig(format!(
                "spacing ({}) and wavelength ({}) must be positive",
                self.spacing, self.wavelength
            )));
        }
        Ok(())
    }
}

/// The set of constant-modulus beam-steering vectors.
#[derive(Debug, Clone)]
pub struct Codebook {
    vectors: Vec<ComplexVector>,
    pub config: CodebookConfig,
}

impl Codebook {
    pub fn n_beams(&self) -> usize {
        self.vectors.len()
    }

    pub fn n_antennas(&self) -> usize {
        self.config.n_antennas
    }

    pub fn beam(&self, n: usize) -> &ComplexVector {
        &self.vectors[n]
    }

    pub fn beams(&self) -> &[ComplexVector] {
        &self.vectors
    }

    /// Writes the codebook as CSV rows `n,m,re,im`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<(), ChannelError> {
        let io = |e: std::io::Error| ChannelError::Io(e.to_string());
        writeln!(out, "n,m,re,im").map_err(io)?;
        for (n, v) in self.vectors.iter().enumerate() {
            for (m, c) in v.values().iter().enumerate() {
                writeln!(out, "{n},{m},{},{}", c.re, c.im).map_err(io)?;
            }
        }
        Ok(())
    }
}

/// ULA steering phase for azimuth `theta` at element `m`:
/// `exp(j * m * 2π * spacing * sin(theta))`.
fn steering_phase(spacing: f64, theta: f64, m: usize) -> Complex64 {
    Complex64::from_polar(1.0, m as f64 * 2.0 * std::f64::consts::PI * spacing * theta.sin())
}

/// Unnormalized array manifold vector for azimuth `theta` (elevation is
/// carried by paths but the array is azimuth-only).
pub fn steering_vector(n_antennas: usize, spacing: f64, theta: f64) -> ComplexVector {
    ComplexVector::new((0..n_antennas).map(|m| steering_phase(spacing, theta, m)).collect())
}

/// Builds the codebook: beam `n` steers to `phi_n = 2π n / N` with entries
/// `(1/√M) · exp(j m 2π spacing sin(phi_n))`.
pub fn build_codebook(config: &CodebookConfig) -> Result<Codebook, ChannelError> {
    config.validate()?;
    let m_count = config.n_antennas;
    let norm = 1.0 / (m_count as f64).sqrt();
    let vectors = (0..config.n_beams)
        .map(|n| {
            let phi = 2.0 * std::f64::consts::PI * n as f64 / config.n_beams as f64;
            ComplexVector::new(
                (0..m_count)
                    .map(|m| steering_phase(config.spacing, phi, m) * norm)
                    .collect(),
            )
        })
        .collect();
    Ok(Codebook { vectors, config: config.clone() })
}

/// Pulse-shaping filter applied to tap/delay offsets.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pulse {
    /// Ideal sampling: a delay contributes to exactly the nearest tap
    /// (half-open window `[-Ts/2, Ts/2)`).
    Impulse,
    /// Truncated raised cosine with the given rolloff factor.
    RaisedCosine { rolloff: f64 },
}

impl Pulse {
    /// Evaluates `p(x)` where `x = d*Ts - tau`.
    pub fn eval(&self, x: f64, sampling_period: f64) -> f64 {
        match *self {
            Pulse::Impulse => {
                if -0.5 * sampling_period <= x && x < 0.5 * sampling_period {
                    1.0
                } else {
                    0.0
                }
            }
            Pulse::RaisedCosine { rolloff } => {
                let t = x / sampling_period;
                let sinc = if t == 0.0 {
                    1.0
                } else {
                    (std::f64::consts::PI * t).sin() / (std::f64::consts::PI * t)
                };
                let denom = 1.0 - (2.0 * rolloff * t) * (2.0 * rolloff * t);
                if denom.abs() < 1e-12 {
                    // Limit at |2*rolloff*t| = 1.
                    let u = 1.0 / (2.0 * rolloff);
                    let s = (std::f64::consts::PI * u).sin() / (std::f64::consts::PI * u);
                    std::f64::consts::FRAC_PI_4 * s
                } else {
                    sinc * (std::f64::consts::PI * rolloff * t).cos() / denom
                }
            }
        }
    }
}

/// OFDM channel configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelConfig {
    /// Subcarrier count K.
    pub n_subcarriers: usize,
    /// Cyclic-prefix length D (tap count).
    pub n_taps: usize,
    /// Maximum path count L.
    pub max_paths: usize,
    /// Sampling period in seconds.
    pub sampling_period: f64,
    /// Noise power in linear watts.
    pub noise_power: f64,
    pub pulse: Pulse,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.n_subcarriers < 1 || self.n_taps < 1 {
            return Err(ChannelError::InvalidConfig(format!(
                "need K >= 1 and D >= 1, got K={}, D={}",
                self.n_subcarriers, self.n_taps
            )));
        }
        if self.sampling_period <= 0.0 || self.noise_power <= 0.0 {
            return Err(ChannelError::InvalidConfig(format!(
                "sampling period ({}) and noise power ({}) must be positive",
                self.sampling_period, self.noise_power
            )));
        }
        Ok(())
    }
}

/// One propagation path.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// Complex gain including path loss.
    pub gain: Complex64,
    /// Absolute delay in seconds.
    pub delay: f64,
    /// Azimuth of departure, radians, relative to the array boresight.
    pub azimuth: f64,
    /// Elevation angle; carried for completeness, unused by the
    /// azimuth-only array manifold.
    pub elevation: f64,
}

/// Paths of one link at one time step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathSet {
    pub paths: Vec<Path>,
}

/// Per-subcarrier channel vectors `h_k`, each of antenna length M.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelResponse {
    per_subcarrier: Vec<ComplexVector>,
}

impl ChannelResponse {
    pub fn n_subcarriers(&self) -> usize {
        self.per_subcarrier.len()
    }

    pub fn n_antennas(&self) -> usize {
        self.per_subcarrier.first().map_or(0, |v| v.len())
    }

    pub fn subcarrier(&self, k: usize) -> &ComplexVector {
        &self.per_subcarrier[k]
    }

    pub fn subcarriers(&self) -> &[ComplexVector] {
        &self.per_subcarrier
    }

    pub fn is_finite(&self) -> bool {
        self.per_subcarrier.iter().all(|v| v.is_finite())
    }
}

/// Assembles `h_k = sum_d sum_l gain_l * e^{-j 2π k d / K} * p(d Ts - tau_l)
/// * a(theta_l)` for every subcarrier.
///
/// Delays are taken relative to the first arrival (receiver timing sync), so
/// absolute geometric delays land within the `D`-tap window; a lone path at
/// `tau = 0` is unaffected.
pub fn channel_response(
    paths: &PathSet,
    cfg: &ChannelConfig,
    n_antennas: usize,
    spacing: f64,
) -> Result<ChannelResponse, ChannelError> {
    cfg.validate()?;
    let k_count = cfg.n_subcarriers;
    let mut per_subcarrier = vec![ComplexVector::zeros(n_antennas); k_count];
    if paths.paths.is_empty() {
        return Ok(ChannelResponse { per_subcarrier });
    }
    let tau0 = paths.paths.iter().map(|p| p.delay).fold(f64::INFINITY, f64::min);
    for path in &paths.paths {
        let manifold = steering_vector(n_antennas, spacing, path.azimuth);
        let tau = path.delay - tau0;
        for d in 0..cfg.n_taps {
            let pulse = cfg.pulse.eval(d as f64 * cfg.sampling_period - tau, cfg.sampling_period);
            if pulse == 0.0 {
                continue;
            }
            for (k, h_k) in per_subcarrier.iter_mut().enumerate() {
                let rot = Complex64::from_polar(
                    1.0,
                    -2.0 * std::f64::consts::PI * (k * d) as f64 / k_count as f64,
                );
                let coeff = path.gain * rot * pulse;
                for (h, a) in h_k.values_mut().iter_mut().zip(manifold.values()) {
                    *h += coeff * a;
                }
            }
        }
    }
    Ok(ChannelResponse { per_subcarrier })
}

/// Average beamformed power `(1/K) * sum_k |h_k^T w|^2`.
pub fn beamformed_power(h: &ChannelResponse, w: &ComplexVector) -> f64 {
    let k = h.n_subcarriers().max(1);
    h.subcarriers()
        .iter()
        .map(|h_k| h_k.dot_t(w).norm_sqr())
        .sum::<f64>()
        / k as f64
}

/// Picks the codebook beam maximizing average beamformed power; ties break
/// toward the smallest index. Returns `(beam index, power)`.
pub fn select_beam(h: &ChannelResponse, codebook: &Codebook) -> Result<(usize, f64), ChannelError> {
    if codebook.n_beams() == 0 {
        return Err(ChannelError::EmptyCodebook);
    }
    if h.n_antennas() != codebook.n_antennas() {
        return Err(ChannelError::DimensionMismatch {
            expected: codebook.n_antennas(),
            found: h.n_antennas(),
        });
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (n, w) in codebook.beams().iter().enumerate() {
        let p = beamformed_power(h, w);
        if p > best.1 {
            best = (n, p);
        }
    }
    Ok(best)
}

/// Received SNR in linear and dB form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snr {
    pub linear: f64,
    pub db: f64,
}

/// Expected received SNR for unit-power symbols:
/// `(1/K) sum_k |h_k^T w|^2 / sigma^2`. Zero power reports the dB floor.
pub fn received_snr(h: &ChannelResponse, w: &ComplexVector, noise_power: f64) -> Snr {
    let linear = beamformed_power(h, w) / noise_power;
    let db = if linear > 0.0 {
        (10.0 * linear.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    };
    Snr { linear, db }
}

/// Shannon capacity `B * log2(1 + SNR)` in bits per second.
pub fn capacity(snr_linear: f64, bandwidth_hz: f64) -> f64 {
    debug_assert!(snr_linear >= 0.0 && bandwidth_hz > 0.0);
    bandwidth_hz * (1.0 + snr_linear).log2()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_nm(n: usize, m: usize) -> CodebookConfig {
        CodebookConfig { n_beams: n, n_antennas: m, spacing: 0.5, wavelength: 0.0107 }
    }

    fn impulse_cfg(k: usize) -> ChannelConfig {
        ChannelConfig {
            n_subcarriers: k,
            n_taps: 8,
            max_paths: 4,
            sampling_period: 25e-9,
            noise_power: 1e-12,
            pulse: Pulse::Impulse,
        }
    }

    #[test]
    fn single_antenna_codebook_is_all_ones() {
        let cb = build_codebook(&cfg_nm(5, 1)).unwrap();
        for v in cb.beams() {
            assert_eq!(v.len(), 1);
            assert!((v.values()[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn beam_zero_has_equal_phase_entries() {
        let cb = build_codebook(&cfg_nm(8, 16)).unwrap();
        let expect = 1.0 / 4.0;
        for c in cb.beam(0).values() {
            assert!((c.re - expect).abs() < 1e-15 && c.im.abs() < 1e-15);
        }
    }

    #[test]
    fn codebook_is_unit_norm_constant_modulus() {
        for (n, m) in [(4, 4), (16, 16), (128, 128)] {
            let cb = build_codebook(&cfg_nm(n, m)).unwrap();
            assert_eq!(cb.n_beams(), n);
            let modulus = 1.0 / (m as f64).sqrt();
            for v in cb.beams() {
                assert!((v.norm() - 1.0).abs() < 1e-12);
                for c in v.values() {
                    assert!((c.norm() - modulus).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn invalid_codebook_config_is_rejected() {
        assert!(build_codebook(&cfg_nm(0, 4)).is_err());
        let mut c = cfg_nm(4, 4);
        c.spacing = 0.0;
        assert!(build_codebook(&c).is_err());
    }

    #[test]
    fn zero_paths_give_zero_response() {
        let h = channel_response(&PathSet::default(), &impulse_cfg(4), 8, 0.5).unwrap();
        for k in 0..4 {
            assert_eq!(h.subcarrier(k).norm(), 0.0);
        }
    }

    #[test]
    fn single_zero_delay_path_is_frequency_flat() {
        let gain = Complex64::new(0.3, -0.4);
        let theta = 0.7;
        let paths = PathSet {
            paths: vec![Path { gain, delay: 0.0, azimuth: theta, elevation: 0.0 }],
        };
        let cfg = impulse_cfg(6);
        let h = channel_response(&paths, &cfg, 4, 0.5).unwrap();
        let expected = steering_vector(4, 0.5, theta).scaled(gain);
        for k in 0..6 {
            for (a, b) in h.subcarrier(k).values().iter().zip(expected.values()) {
                assert!((a - b).norm() < 1e-12, "subcarrier {k}");
            }
        }
    }

    #[test]
    fn two_tap_channel_is_frequency_selective() {
        // Equal-gain paths at delays 0 and Ts from the same direction:
        // per-entry magnitude follows |1 + e^{-j 2π k / K}|.
        let ts = 25e-9;
        let gain = Complex64::new(1.0, 0.0);
        let paths = PathSet {
            paths: vec![
                Path { gain, delay: 0.0, azimuth: 0.0, elevation: 0.0 },
                Path { gain, delay: ts, azimuth: 0.0, elevation: 0.0 },
            ],
        };
        let cfg = impulse_cfg(4);
        let h = channel_response(&paths, &cfg, 1, 0.5).unwrap();
        let expected = [2.0, std::f64::consts::SQRT_2, 0.0, std::f64::consts::SQRT_2];
        for k in 0..4 {
            let mag = h.subcarrier(k).norm();
            assert!((mag - expected[k]).abs() < 1e-12, "k={k}: {mag} vs {}", expected[k]);
        }
    }

    #[test]
    fn response_is_linear_in_path_gain() {
        let mk = |g: Complex64| PathSet {
            paths: vec![Path { gain: g, delay: 1e-8, azimuth: 0.4, elevation: 0.1 }],
        };
        let cfg = impulse_cfg(4);
        let (g1, g2) = (Complex64::new(0.6, 0.1), Complex64::new(-0.2, 0.9));
        let h1 = channel_response(&mk(g1), &cfg, 4, 0.5).unwrap();
        let h2 = channel_response(&mk(g2), &cfg, 4, 0.5).unwrap();
        let h12 = channel_response(&mk(g1 + g2), &cfg, 4, 0.5).unwrap();
        for k in 0..4 {
            for i in 0..4 {
                let sum = h1.subcarrier(k).values()[i] + h2.subcarrier(k).values()[i];
                assert!((h12.subcarrier(k).values()[i] - sum).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn select_beam_trivial_cases() {
        let cb = build_codebook(&cfg_nm(1, 4)).unwrap();
        let paths = PathSet {
            paths: vec![Path {
                gain: Complex64::new(1.0, 0.0),
                delay: 0.0,
                azimuth: 1.1,
                elevation: 0.0,
            }],
        };
        let h = channel_response(&paths, &impulse_cfg(4), 4, 0.5).unwrap();
        assert_eq!(select_beam(&h, &cb).unwrap().0, 0);

        // Zero channel: power 0, index 0 by smallest-index tie break.
        let zero = channel_response(&PathSet::default(), &impulse_cfg(4), 4, 0.5).unwrap();
        let cb16 = build_codebook(&cfg_nm(16, 4)).unwrap();
        let (idx, p) = select_beam(&zero, &cb16).unwrap();
        assert_eq!((idx, p), (0, 0.0));
    }

    #[test]
    fn conjugate_aligned_path_selects_matching_beam() {
        // Beam 2 of an 8-beam codebook steers phi = pi/2 (sin = 1, no
        // duplicate). A path with sin(theta) = -1 makes h^T w_2 coherent.
        let cb = build_codebook(&cfg_nm(8, 16)).unwrap();
        let paths = PathSet {
            paths: vec![Path {
                gain: Complex64::new(1.0, 0.0),
                delay: 0.0,
                azimuth: -std::f64::consts::FRAC_PI_2,
                elevation: 0.0,
            }],
        };
        let h = channel_response(&paths, &impulse_cfg(8), 16, 0.5).unwrap();
        let (best, power) = select_beam(&h, &cb).unwrap();
        assert_eq!(best, 2);
        // Coherent combining of 16 unit entries scaled by 1/sqrt(16).
        assert!((power - 16.0).abs() < 1e-9, "power {power}");

        // Brute force over all beams confirms the argmax.
        let brute = cb
            .beams()
            .iter()
            .enumerate()
            .map(|(n, w)| (n, beamformed_power(&h, w)))
            .fold((0usize, f64::NEG_INFINITY), |acc, (n, p)| if p > acc.1 { (n, p) } else { acc });
        assert_eq!(brute.0, best);
    }

    #[test]
    fn snr_examples() {
        let zero = channel_response(&PathSet::default(), &impulse_cfg(4), 4, 0.5).unwrap();
        let cb = build_codebook(&cfg_nm(4, 4)).unwrap();
        let s = received_snr(&zero, cb.beam(0), 1e-12);
        assert_eq!(s.linear, 0.0);
        assert_eq!(s.db, DB_FLOOR);

        // Matched-beam coherent single path over M = 128 antennas with unit
        // gain: SNR = M / sigma^2.
        let sigma2 = 1e-3;
        let cb = build_codebook(&cfg_nm(128, 128)).unwrap();
        let paths = PathSet {
            paths: vec![Path {
                gain: Complex64::new(1.0, 0.0),
                delay: 0.0,
                azimuth: 0.0,
                elevation: 0.0,
            }],
        };
        let h = channel_response(&paths, &impulse_cfg(8), 128, 0.5).unwrap();
        let s = received_snr(&h, cb.beam(0), sigma2);
        assert!((s.linear - 128.0 / sigma2).abs() / (128.0 / sigma2) < 1e-12, "{}", s.linear);
    }

    #[test]
    fn unit_beamformed_power_is_zero_db() {
        // One antenna, gain 1 path, w = [sigma]: |h^T w|^2 = sigma^2.
        let sigma2: f64 = 4.0e-6;
        let paths = PathSet {
            paths: vec![Path {
                gain: Complex64::new(1.0, 0.0),
                delay: 0.0,
                azimuth: 0.0,
                elevation: 0.0,
            }],
        };
        let h = channel_response(&paths, &impulse_cfg(4), 1, 0.5).unwrap();
        let w = ComplexVector::new(vec![Complex64::new(sigma2.sqrt(), 0.0)]);
        let s = received_snr(&h, &w, sigma2);
        assert!((s.linear - 1.0).abs() < 1e-12);
        assert!(s.db.abs() < 1e-9);
    }

    #[test]
    fn beamforming_gain_respects_cauchy_schwarz() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let cfg = impulse_cfg(4);
        let cb = build_codebook(&cfg_nm(8, 6)).unwrap();
        for _ in 0..50 {
            let paths = PathSet {
                paths: (0..3)
                    .map(|_| Path {
                        gain: Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                        delay: rng.gen_range(0.0..4.0 * cfg.sampling_period),
                        azimuth: rng.gen_range(-3.0..3.0),
                        elevation: 0.0,
                    })
                    .collect(),
            };
            let h = channel_response(&paths, &cfg, 6, 0.5).unwrap();
            let bound = h
                .subcarriers()
                .iter()
                .map(|hk| hk.norm_sqr())
                .sum::<f64>()
                / cfg.n_subcarriers as f64;
            for w in cb.beams() {
                let p = beamformed_power(&h, w);
                assert!(p <= bound * (1.0 + 1e-12), "power {p} exceeds bound {bound}");
            }
        }
    }

    #[test]
    fn capacity_examples_and_monotonicity() {
        assert_eq!(capacity(0.0, 1.0), 0.0);
        assert_eq!(capacity(1.0, 1.0), 1.0);
        assert!((capacity(3.0, 0.2e9) - 0.4e9).abs() < 1e-3);
        let mut last = 0.0;
        for i in 0..100 {
            let c = capacity(i as f64 * 0.37, 5.0);
            assert!(c >= last);
            assert!((c == 0.0) == (i == 0));
            last = c;
        }
    }

    #[test]
    fn raised_cosine_pulse_peaks_at_zero() {
        let p = Pulse::RaisedCosine { rolloff: 0.25 };
        let ts = 1.0;
        assert_eq!(p.eval(0.0, ts), 1.0);
        assert!(p.eval(1.0, ts).abs() < 1e-12); // zero crossing at Ts
        assert!(p.eval(0.5, ts) > 0.0 && p.eval(0.5, ts) < 1.0);
        // Singular point |2*rolloff*t| = 1 has the analytic limit.
        assert!(p.eval(2.0, ts).is_finite());
    }

    #[test]
    fn codebook_csv_has_header_and_all_rows() {
        let cb = build_codebook(&cfg_nm(2, 3)).unwrap();
        let mut buf = Vec::new();
        cb.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "n,m,re,im");
        assert_eq!(lines.len(), 1 + 2 * 3);
    }
}
