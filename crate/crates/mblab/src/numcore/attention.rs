//! Scaled dot-product multi-head self-attention, composed from tape
//! primitives.

use super::{NumError, Tape, Var};

/// Tape handles for one attention block's projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_query: Var,
    pub b_query: Var,
    pub w_key: Var,
    pub b_key: Var,
    pub w_value: Var,
    pub b_value: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Multi-head self-attention over `x [B, T, D]`.
///
/// Heads must divide the embedding dimension. Returns the attended output
/// `[B, T, D]` together with the attention weights `[B * heads, T, T]`
/// (each row is a softmax distribution over key positions).
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    vars: &AttentionVars,
    heads: usize,
) -> Result<(Var, Var), NumError> {
    let sx = tape.shape(x).to_vec();
    if sx.len() != 3 {
        return Err(NumError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!("expected [batch, tokens, dim], got {sx:?}"),
        });
    }
    let (b, t, d) = (sx[0], sx[1], sx[2]);
    if heads == 0 || d % heads != 0 {
        return Err(NumError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!("{heads} heads do not divide embedding dim {d}"),
        });
    }
    let dh = d / heads;

    let split = |tape: &mut Tape, v: Var| -> Result<Var, NumError> {
        // [B, T, D] -> [B*heads, T, dh]
        let v = tape.reshape(v, vec![b, t, heads, dh])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        tape.reshape(v, vec![b * heads, t, dh])
    };

    let q = tape.dense(x, vars.w_query, vars.b_query)?;
    let k = tape.dense(x, vars.w_key, vars.b_key)?;
    let v = tape.dense(x, vars.w_value, vars.b_value)?;
    let q = split(tape, q)?;
    let k = split(tape, k)?;
    let v = split(tape, v)?;

    let k_t = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.bmm(q, k_t)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax(scores, 2)?;

    let ctx = tape.bmm(attn, v)?;
    // [B*heads, T, dh] -> [B, T, D]
    let ctx = tape.reshape(ctx, vec![b, heads, t, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, vec![b, t, d])?;
    let out = tape.dense(ctx, vars.w_out, vars.b_out)?;
    Ok((out, attn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vars(tape: &mut Tape, d: usize, rng: &mut ChaCha8Rng) -> AttentionVars {
        let mut w = |tape: &mut Tape| tape.leaf(Tensor::glorot(d, d, rng));
        let wq = w(tape);
        let wk = w(tape);
        let wv = w(tape);
        let wo = w(tape);
        AttentionVars {
            w_query: wq,
            b_query: tape.leaf(Tensor::zeros(vec![d])),
            w_key: wk,
            b_key: tape.leaf(Tensor::zeros(vec![d])),
            w_value: wv,
            b_value: tape.leaf(Tensor::zeros(vec![d])),
            w_out: wo,
            b_out: tape.leaf(Tensor::zeros(vec![d])),
        }
    }

    #[test]
    fn attention_rows_sum_to_one_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let (b, t, d, heads) = (3, 5, 8, 2);
        let x = tape.leaf(Tensor::uniform(vec![b, t, d], 1.0, &mut rng));
        let vars = random_vars(&mut tape, d, &mut rng);
        let (_, attn) = multi_head_attention(&mut tape, x, &vars, heads).unwrap();
        assert_eq!(tape.shape(attn), &[b * heads, t, t]);
        let data = tape.data(attn);
        for row in 0..b * heads * t {
            let s: f64 = data[row * t..(row + 1) * t].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {row} sums to {s}");
        }
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 6]));
        let vars = random_vars(&mut tape, 6, &mut rng);
        assert!(multi_head_attention(&mut tape, x, &vars, 4).is_err());
    }
}
