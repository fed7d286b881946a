//! Central finite-difference gradient checker.
//!
//! The checker only ever runs forward passes of the function under test, so
//! it stays independent of the tape's backward code paths it is used to
//! verify.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumError, Tape, Tensor, Var};

/// Which coordinates of each input tensor to probe.
#[derive(Debug, Clone, Copy)]
pub enum CoordSelection {
    /// Every coordinate of every differentiable input.
    All,
    /// A deterministic random subsample of up to `per_tensor` coordinates
    /// per input, drawn from the given seed. Used for large models where
    /// probing every coordinate is needlessly slow.
    Sample { per_tensor: usize, seed: u64 },
}

/// Result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Max over probed coordinates of
    /// `|analytic - central| / max(1, |central|)`.
    pub max_rel_error: f64,
    /// `(input index, coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// True when a ReLU-style kink at 0 makes the central difference at `x`
/// meaningless; such coordinates are excluded from sweeps.
pub fn is_relu_kink(x: f64, h: f64) -> bool {
    x.abs() <= h
}

/// Compares the tape's analytic gradients of the scalar `f(inputs)` against
/// central finite differences with step `h`.
///
/// `f` must build the computation on the provided tape from the leafed
/// inputs and return the scalar output node. Inputs whose `requires_grad`
/// flag is unset are treated as constants and skipped. `exclude` can veto
/// individual coordinates (input index, coordinate, value), e.g. near a
/// kink of a piecewise-linear op.
pub fn finite_diff_check<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    selection: CoordSelection,
    exclude: Option<&dyn Fn(usize, usize, f64) -> bool>,
) -> Result<FdReport, NumError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");

    let eval = |points: &[Tensor]| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        debug_assert_eq!(tape.tensor(out).numel(), 1);
        Ok(tape.data(out)[0])
    };

    // Analytic gradients from one forward+backward pass.
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| t.requires_grad.then(|| tape.grad_tensor(v).data().to_vec()))
            .collect()
    };

    let mut report = FdReport { max_rel_error: 0.0, worst: None, coords_checked: 0 };
    let mut probe = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let n = inputs[ti].numel();
        let coords: Vec<usize> = match selection {
            CoordSelection::All => (0..n).collect(),
            CoordSelection::Sample { per_tensor, seed } => {
                if n <= per_tensor {
                    (0..n).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ti as u64).wrapping_mul(0x9e37_79b9));
                    let mut v = sample(&mut rng, n, per_tensor).into_vec();
                    v.sort_unstable();
                    v
                }
            }
        };
        for c in coords {
            let x0 = inputs[ti].data()[c];
            if let Some(excl) = exclude {
                if excl(ti, c, x0) {
                    continue;
                }
            }
            probe[ti].data_mut()[c] = x0 + h;
            let f_plus = eval(&probe)?;
            probe[ti].data_mut()[c] = x0 - h;
            let f_minus = eval(&probe)?;
            probe[ti].data_mut()[c] = x0;
            let central = (f_plus - f_minus) / (2.0 * h);
            let rel = (grad[c] - central).abs() / central.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, c));
            }
        }
    }
    Ok(report)
}
