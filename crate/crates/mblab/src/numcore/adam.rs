//! Adam optimizer with optional global-norm gradient clipping.

use super::{NumError, Tensor};

/// Per-parameter first/second moment buffers plus the shared step counter
/// and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_threshold: Option<f64>,
    pub step: u64,
    /// `(first_moment, second_moment)` per parameter, matching shapes.
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    /// Fresh state with zeroed moments shaped after `params`.
    pub fn new(learning_rate: f64, clip_threshold: Option<f64>, params: &[Tensor]) -> Self {
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_threshold,
            step: 0,
            moments: params
                .iter()
                .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect(),
        }
    }
}

/// Euclidean norm over the full gradient set.
pub fn global_grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient by `threshold / norm` when the global norm
/// exceeds the threshold; otherwise leaves them untouched.
pub fn clip_gradients(grads: &mut [Tensor], threshold: f64) {
    let norm = global_grad_norm(grads);
    if norm > threshold {
        let s = threshold / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// One bias-corrected Adam step over a parameter set.
///
/// When `state.clip_threshold` is set, global-norm clipping over the whole
/// gradient set happens before the moment updates. Rejects non-finite
/// gradients and shape disagreements.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<(), NumError> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(NumError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} params vs {} grads vs {} moment pairs",
                params.len(),
                grads.len(),
                state.moments.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(NumError::ShapeMismatch {
                op: "adam_step",
                detail: format!("param #{i} {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        if !g.is_finite() {
            return Err(NumError::NonFiniteGradient { index: i });
        }
    }

    let mut clipped: Vec<Tensor> = grads.to_vec();
    if let Some(threshold) = state.clip_threshold {
        clip_gradients(&mut clipped, threshold);
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(&clipped).zip(&mut state.moments) {
        let pd = p.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            pd[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut params = vec![
            Tensor::new(vec![2], vec![1.5, -0.5]),
            Tensor::new(vec![1], vec![3.0]),
        ];
        let before = params.clone();
        let grads = vec![Tensor::zeros(vec![2]), Tensor::zeros(vec![1])];
        let mut state = OptimizerState::new(0.1, Some(1.0), &params);
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn clipping_halves_gradients_at_norm_two() {
        // Two orthogonal unit-ish components with global norm 2.0.
        let mut grads = vec![
            Tensor::new(vec![2], vec![1.2, 0.0]),
            Tensor::new(vec![1], vec![1.6]),
        ];
        assert!((global_grad_norm(&grads) - 2.0).abs() < 1e-12);
        clip_gradients(&mut grads, 1.0);
        assert!((grads[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((grads[1].data()[0] - 0.8).abs() < 1e-12);
        assert!((global_grad_norm(&grads) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_is_identity_below_threshold() {
        let mut grads = vec![Tensor::new(vec![2], vec![0.3, 0.4])];
        let before = grads.clone();
        clip_gradients(&mut grads, 1.0);
        assert_eq!(grads, before);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_learning_rate() {
        // By hand for t=1: m_hat = v_hat = 1, so the step is exactly lr
        // up to the epsilon in the denominator.
        let mut params = vec![Tensor::scalar(2.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut state = OptimizerState::new(0.1, None, &params);
        adam_step(&mut params, &grads, &mut state).unwrap();
        let moved = 2.0 - params[0].data()[0];
        assert!((moved - 0.1).abs() < 1e-8, "moved {moved}");
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(f64::NAN)];
        let mut state = OptimizerState::new(0.1, None, &params);
        let err = adam_step(&mut params, &grads, &mut state).unwrap_err();
        assert!(matches!(err, NumError::NonFiniteGradient { index: 0 }));
    }
}
