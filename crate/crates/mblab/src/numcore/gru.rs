//! Gated recurrent unit cell built from tape primitives, so backpropagation
//! through time falls out of the tape's reverse pass.

use super::{NumError, Tape, Tensor, Var};

/// Tape handles for one GRU layer's parameters.
///
/// Gate equations, for input `x [B, In]` and previous state `h [B, Hid]`:
///
/// ```text
/// z = sigmoid(x W_z + h U_z + b_z)          (update gate: how much state to keep)
/// r = sigmoid(x W_r + h U_r + b_r)          (reset gate)
/// c = tanh(x W_c + r .* (h U_c) + b_c)      (candidate state)
/// h' = z .* h + (1 - z) .* c
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruCellVars {
    pub w_update: Var,
    pub u_update: Var,
    pub b_update: Var,
    pub w_reset: Var,
    pub u_reset: Var,
    pub b_reset: Var,
    pub w_cand: Var,
    pub u_cand: Var,
    pub b_cand: Var,
}

/// One GRU step: consumes `x_t [B, In]` and `h_prev [B, Hid]`, returns
/// `h_t [B, Hid]`.
pub fn gru_cell(
    tape: &mut Tape,
    x_t: Var,
    h_prev: Var,
    params: &GruCellVars,
) -> Result<Var, NumError> {
    let sx = tape.shape(x_t).to_vec();
    let sh = tape.shape(h_prev).to_vec();
    if sx.len() != 2 || sh.len() != 2 || sx[0] != sh[0] {
        return Err(NumError::ShapeMismatch {
            op: "gru_cell",
            detail: format!("x {sx:?} vs h {sh:?}"),
        });
    }

    let xz = tape.matmul(x_t, params.w_update)?;
    let hz = tape.matmul(h_prev, params.u_update)?;
    let z_pre = tape.add(xz, hz)?;
    let z_pre = tape.add_bcast(z_pre, params.b_update)?;
    let z = tape.sigmoid(z_pre);

    let xr = tape.matmul(x_t, params.w_reset)?;
    let hr = tape.matmul(h_prev, params.u_reset)?;
    let r_pre = tape.add(xr, hr)?;
    let r_pre = tape.add_bcast(r_pre, params.b_reset)?;
    let r = tape.sigmoid(r_pre);

    let xc = tape.matmul(x_t, params.w_cand)?;
    let hc = tape.matmul(h_prev, params.u_cand)?;
    let gated = tape.mul(r, hc)?;
    let c_pre = tape.add(xc, gated)?;
    let c_pre = tape.add_bcast(c_pre, params.b_cand)?;
    let c = tape.tanh(c_pre);

    // h' = z .* h + (1 - z) .* c
    let zh = tape.mul(z, h_prev)?;
    let ones = tape.constant(Tensor::full(tape.shape(z).to_vec(), 1.0));
    let neg_z = tape.scale(z, -1.0);
    let one_minus_z = tape.add(ones, neg_z)?;
    let zc = tape.mul(one_minus_z, c)?;
    tape.add(zh, zc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_params(tape: &mut Tape, input: usize, hidden: usize) -> GruCellVars {
        GruCellVars {
            w_update: tape.leaf(Tensor::zeros(vec![input, hidden])),
            u_update: tape.leaf(Tensor::zeros(vec![hidden, hidden])),
            b_update: tape.leaf(Tensor::zeros(vec![hidden])),
            w_reset: tape.leaf(Tensor::zeros(vec![input, hidden])),
            u_reset: tape.leaf(Tensor::zeros(vec![hidden, hidden])),
            b_reset: tape.leaf(Tensor::zeros(vec![hidden])),
            w_cand: tape.leaf(Tensor::zeros(vec![input, hidden])),
            u_cand: tape.leaf(Tensor::zeros(vec![hidden, hidden])),
            b_cand: tape.leaf(Tensor::zeros(vec![hidden])),
        }
    }

    #[test]
    fn zero_params_and_zero_state_stay_zero() {
        let mut tape = Tape::new();
        let params = zero_params(&mut tape, 3, 4);
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.0, 4.0]));
        let h = tape.leaf(Tensor::zeros(vec![2, 4]));
        let h_next = gru_cell(&mut tape, x, h, &params).unwrap();
        // z = sigmoid(0) = 0.5, candidate = tanh(0) = 0, so h' = 0.
        assert!(tape.data(h_next).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_update_gate_carries_state() {
        let mut tape = Tape::new();
        let mut params = zero_params(&mut tape, 2, 3);
        // Large positive update bias forces z ~ 1.
        params.b_update = tape.leaf(Tensor::full(vec![3], 50.0));
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.7, -0.3]));
        let h = tape.leaf(Tensor::new(vec![1, 3], vec![0.2, -0.4, 0.9]));
        let h_next = gru_cell(&mut tape, x, h, &params).unwrap();
        for (a, b) in tape.data(h_next).iter().zip(tape.data(h)) {
            assert!((a - b).abs() < 1e-12, "state not carried: {a} vs {b}");
        }
    }

    #[test]
    fn batch_dimension_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let params = zero_params(&mut tape, 2, 3);
        let x = tape.leaf(Tensor::zeros(vec![2, 2]));
        let h = tape.leaf(Tensor::zeros(vec![3, 3]));
        assert!(gru_cell(&mut tape, x, h, &params).is_err());
    }
}
