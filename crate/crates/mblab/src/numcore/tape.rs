//! Reverse-mode autodiff tape.
//!
//! Ops append nodes to an append-only tape; `backward` walks the tape in
//! reverse creation order (a valid topological order) and accumulates exact
//! analytic gradients into every node that requires them. The tape is
//! rebuilt per forward pass; parameters live outside as plain [`Tensor`]s
//! and enter through [`Tape::leaf`].

use rand::Rng;

use super::{NumError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node {
    tensor: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    /// Broadcast add: `b`'s shape is a suffix of `x`'s shape.
    AddBcast { x: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize>, src_shape: Vec<usize> },
    IndexAxis { a: usize, axis: usize, index: usize },
    /// `[B, F]` repeated along a new middle axis to `[B, reps, F]`.
    ExpandMid { a: usize, reps: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Mean { a: usize, axis: usize },
    Relu { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize, axis: usize },
    /// Mask values are already scaled by `1/(1-p)` (inverted dropout).
    Dropout { a: usize, mask: Vec<f64> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: usize, w: usize, bias: usize, stride: usize, pad: usize },
    BceMean { p: usize, targets: Vec<f64> },
}

/// Computation tape. See the module docs for the usage model.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> NumError {
    NumError::ShapeMismatch { op, detail }
}

/// Iterates the 1-D lanes of `shape` along `axis`, yielding each lane's base
/// offset; elements of a lane sit at `base + t * stride` for `t < len`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner);
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // ikj order keeps the inner loop contiguous on both b and out.
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// `ga += gout @ b^T` for `gout: [m, n]`, `b: [k, n]`.
fn matmul_grad_a(gout: &[f64], b: &[f64], m: usize, k: usize, n: usize, ga: &mut [f64]) {
    for i in 0..m {
        let g_row = &gout[i * n..(i + 1) * n];
        let ga_row = &mut ga[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += g_row[j] * b_row[j];
            }
            ga_row[p] += s;
        }
    }
}

/// `gb += a^T @ gout` for `a: [m, k]`, `gout: [m, n]`.
fn matmul_grad_b(a: &[f64], gout: &[f64], m: usize, k: usize, n: usize, gb: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &gout[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let gb_row = &mut gb[p * n..(p + 1) * n];
            for j in 0..n {
                gb_row[j] += av * g_row[j];
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn result(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool, op: Op) -> Var {
        let mut t = Tensor::new(shape, data);
        t.requires_grad = requires;
        if requires {
            t.ensure_grad();
        }
        self.push(t, op)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    /// Inserts a tensor as a graph leaf. Gradients accumulate into the
    /// node's tensor when `t.requires_grad` is set.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        if t.requires_grad {
            t.ensure_grad();
        } else {
            t.grad = None;
        }
        self.push(t, Op::Leaf)
    }

    /// Constant (non-differentiable) leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Gradient of `v` as a tensor shaped like `v` (zeros when untouched).
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let t = &self.nodes[v.0].tensor;
        let g = t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()]);
        Tensor::new(t.shape().to_vec(), g)
    }

    // ── elementwise and structural ops ──────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(shape_err("add", format!("{sa:?} vs {sb:?}")));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.result(sa, data, req, Op::Add { a: a.0, b: b.0 }))
    }

    /// Adds `b` (whose shape must be a suffix of `x`'s shape) to every
    /// leading slice of `x`.
    pub fn add_bcast(&mut self, x: Var, b: Var) -> Result<Var, NumError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != sb[..] {
            return Err(shape_err("add_bcast", format!("{sb:?} is not a suffix of {sx:?}")));
        }
        let bn: usize = sb.iter().product();
        let bd = self.data(b).to_vec();
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % bn])
            .collect();
        let req = self.requires(x) || self.requires(b);
        Ok(self.result(sx, data, req, Op::AddBcast { x: x.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(shape_err("mul", format!("{sa:?} vs {sb:?}")));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.result(sa, data, req, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let sa = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|x| c * x).collect();
        let req = self.requires(a);
        self.result(sa, data, req, Op::Scale { a: a.0, c })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_raw(self.data(a), self.data(b), m, k, n, &mut data);
        let req = self.requires(a) || self.requires(b);
        Ok(self.result(vec![m, n], data, req, Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }

    /// Batched matrix product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for t in 0..batch {
                matmul_raw(
                    &ad[t * m * k..(t + 1) * m * k],
                    &bd[t * k * n..(t + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut data[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.result(vec![batch, m, n], data, req, Op::Bmm { a: a.0, b: b.0, batch, m, k, n }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NumError> {
        let sa = self.shape(a).to_vec();
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(shape_err("reshape", format!("{sa:?} -> {shape:?}")));
        }
        let data = self.data(a).to_vec();
        let req = self.requires(a);
        Ok(self.result(shape, data, req, Op::Reshape { a: a.0 }))
    }

    /// Reorders axes; `axes` is a permutation of `0..rank`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, NumError> {
        let src = self.shape(a).to_vec();
        let rank = src.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for shape {src:?}")));
        }
        let dst: Vec<usize> = axes.iter().map(|&x| src[x]).collect();
        let src_strides = row_major_strides(&src);
        let dst_strides = row_major_strides(&dst);
        let n = self.data(a).len();
        let mut data = vec![0.0; n];
        let src_data = self.data(a);
        // Walk destination in order; map each index back to the source.
        let mut idx = vec![0usize; rank];
        for (flat, slot) in data.iter_mut().enumerate() {
            let mut rem = flat;
            for d in 0..rank {
                idx[d] = rem / dst_strides[d];
                rem %= dst_strides[d];
            }
            let mut s = 0;
            for d in 0..rank {
                s += idx[d] * src_strides[axes[d]];
            }
            *slot = src_data[s];
        }
        let req = self.requires(a);
        Ok(self.result(dst, data, req, Op::Permute { a: a.0, axes: axes.to_vec(), src_shape: src }))
    }

    /// Selects a single index along `axis`, dropping that axis.
    pub fn index_axis(&mut self, a: Var, axis: usize, index: usize) -> Result<Var, NumError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || index >= sa[axis] {
            return Err(shape_err("index_axis", format!("axis {axis} index {index} of {sa:?}")));
        }
        let mut out_shape = sa.clone();
        out_shape.remove(axis);
        let mut data = Vec::with_capacity(self.data(a).len() / sa[axis]);
        let src = self.data(a);
        for_each_lane(&sa, axis, |base, stride| data.push(src[base + index * stride]));
        let req = self.requires(a);
        Ok(self.result(out_shape, data, req, Op::IndexAxis { a: a.0, axis, index }))
    }

    /// Repeats `[B, F]` along a new middle axis: `-> [B, reps, F]`.
    pub fn expand_mid(&mut self, a: Var, reps: usize) -> Result<Var, NumError> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || reps == 0 {
            return Err(shape_err("expand_mid", format!("{sa:?} reps {reps}")));
        }
        let (b, f) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut data = Vec::with_capacity(b * reps * f);
        for i in 0..b {
            let row = &src[i * f..(i + 1) * f];
            for _ in 0..reps {
                data.extend_from_slice(row);
            }
        }
        let req = self.requires(a);
        Ok(self.result(vec![b, reps, f], data, req, Op::ExpandMid { a: a.0, reps }))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut axis_total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len()
                || sp
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(shape_err("concat", format!("{:?} vs {first:?}", sp)));
            }
            axis_total += sp[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let src = self.data(p);
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * len * inner;
                data[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            offset += len;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.result(out_shape, data, req, Op::Concat { parts: parts.iter().map(|v| v.0).collect(), axis }))
    }

    /// Arithmetic mean along `axis`, dropping that axis.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(shape_err("mean", format!("axis {axis} of {sa:?}")));
        }
        let len = sa[axis];
        let mut out_shape = sa.clone();
        out_shape.remove(axis);
        let src = self.data(a);
        let mut data = Vec::with_capacity(src.len() / len);
        for_each_lane(&sa, axis, |base, stride| {
            let mut s = 0.0;
            for t in 0..len {
                s += src[base + t * stride];
            }
            data.push(s / len as f64);
        });
        let req = self.requires(a);
        Ok(self.result(out_shape, data, req, Op::Mean { a: a.0, axis }))
    }

    // ── activations and neural primitives ───────────────────────────────

    pub fn relu(&mut self, a: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let req = self.requires(a);
        self.result(sa, data, req, Op::Relu { a: a.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.tanh()).collect();
        let req = self.requires(a);
        self.result(sa, data, req, Op::Tanh { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let data: Vec<f64> = self.data(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let req = self.requires(a);
        self.result(sa, data, req, Op::Sigmoid { a: a.0 })
    }

    /// Softmax along `axis`; outputs are non-negative and each lane sums to 1.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(shape_err("softmax", format!("axis {axis} of {sa:?}")));
        }
        let len = sa[axis];
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for_each_lane(&sa, axis, |base, stride| {
            let mut max = f64::NEG_INFINITY;
            for t in 0..len {
                max = max.max(src[base + t * stride]);
            }
            let mut sum = 0.0;
            for t in 0..len {
                let e = (src[base + t * stride] - max).exp();
                data[base + t * stride] = e;
                sum += e;
            }
            for t in 0..len {
                data[base + t * stride] /= sum;
            }
        });
        let req = self.requires(a);
        Ok(self.result(sa, data, req, Op::Softmax { a: a.0, axis }))
    }

    /// Inverted dropout. `rng: Some` is train mode (keep probability `1-p`,
    /// survivors scaled by `1/(1-p)`); `rng: None` is eval mode and returns
    /// the input untouched.
    pub fn dropout(
        &mut self,
        a: Var,
        p: f64,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var, NumError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumError::InvalidDropout(p));
        }
        let rng = match rng {
            None => return Ok(a),
            Some(r) => r,
        };
        let sa = self.shape(a).to_vec();
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.data(a).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let data: Vec<f64> = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let req = self.requires(a);
        Ok(self.result(sa, data, req, Op::Dropout { a: a.0, mask }))
    }

    /// Layer normalization over the last axis with learned `gamma`/`beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, NumError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| shape_err("layer_norm", "rank-0 input".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} vs feature dim {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let src = self.data(x);
        let lanes = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; lanes];
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut data = vec![0.0; src.len()];
        for lane in 0..lanes {
            let s = &src[lane * d..(lane + 1) * d];
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[lane] = istd;
            for j in 0..d {
                let xh = (s[j] - mean) * istd;
                xhat[lane * d + j] = xh;
                data[lane * d + j] = xh * g[j] + b[j];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.result(
            sx,
            data,
            req,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
        ))
    }

    /// 2-D convolution: `x [B, Cin, H, W]`, `w [Cout, Cin, kh, kw]`,
    /// `bias [Cout]`, with symmetric zero padding `pad` and stride `stride`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NumError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("input {sx:?} vs kernel {sw:?}")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be >= 1".into()));
        }
        let (bsz, cin, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if self.shape(bias) != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} vs {cout} output channels", self.shape(bias)),
            ));
        }
        if h + 2 * pad < kh || wdt + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wdt + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(bias);
        let mut data = vec![0.0; bsz * cout * ho * wo];
        for bi in 0..bsz {
            for f in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bd[f];
                        for c in 0..cin {
                            for ky in 0..kh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                for kx in 0..kw {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= wdt {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    acc += xd[((bi * cin + c) * h + iy) * wdt + ix]
                                        * wd[((f * cin + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        data[((bi * cout + f) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(bias);
        Ok(self.result(
            vec![bsz, cout, ho, wo],
            data,
            req,
            Op::Conv2d { x: x.0, w: w.0, bias: bias.0, stride, pad },
        ))
    }

    /// Mean binary cross-entropy between predictions in `(0, 1)` and fixed
    /// `{0, 1}` targets. Uses the `0 * ln 0 = 0` convention so that perfect
    /// predictions yield exactly zero loss.
    pub fn bce_mean(&mut self, p: Var, targets: &[f64]) -> Result<Var, NumError> {
        let n = self.data(p).len();
        if targets.len() != n {
            return Err(shape_err(
                "bce_mean",
                format!("{n} predictions vs {} targets", targets.len()),
            ));
        }
        let src = self.data(p);
        let mut total = 0.0;
        for (&pi, &ti) in src.iter().zip(targets) {
            if ti != 0.0 {
                total -= ti * pi.max(f64::MIN_POSITIVE).ln();
            }
            if ti != 1.0 {
                total -= (1.0 - ti) * (1.0 - pi).max(f64::MIN_POSITIVE).ln();
            }
        }
        let req = self.requires(p);
        Ok(self.result(
            vec![1],
            vec![total / n as f64],
            req,
            Op::BceMean { p: p.0, targets: targets.to_vec() },
        ))
    }

    /// Affine map `x @ w + b` where `x` is `[..., in]`, `w` is `[in, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(shape_err("dense", format!("{sx:?} x {sw:?}")));
        }
        let lead: usize = sx[..sx.len() - 1].iter().product();
        let x2 = self.reshape(x, vec![lead, sw[0]])?;
        let y = self.matmul(x2, w)?;
        let y = self.add_bcast(y, b)?;
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, out_shape)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Seeds the scalar node `v` with gradient 1 and back-propagates through
    /// the whole tape, accumulating into every `requires_grad` node.
    pub fn backward(&mut self, v: Var) -> Result<(), NumError> {
        let t = &self.nodes[v.0].tensor;
        if t.numel() != 1 {
            return Err(NumError::NonScalarBackward { shape: t.shape().to_vec() });
        }
        if !t.requires_grad {
            return Ok(());
        }
        self.nodes[v.0].tensor.ensure_grad();
        self.nodes[v.0].tensor.grad.as_mut().unwrap()[0] = 1.0;
        for idx in (0..=v.0).rev() {
            if !self.nodes[idx].tensor.requires_grad {
                continue;
            }
            let gout = match &self.nodes[idx].tensor.grad {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(idx, &gout);
        }
        Ok(())
    }

    fn grad_mut(&mut self, i: usize) -> &mut [f64] {
        let t = &mut self.nodes[i].tensor;
        t.ensure_grad();
        t.grad.as_mut().unwrap()
    }

    fn backprop_node(&mut self, idx: usize, gout: &[f64]) {
        // `Op` owns no Vars, only indices, so it can be taken apart freely.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.nodes[*a].tensor.requires_grad {
                    for (g, &go) in self.grad_mut(*a).iter_mut().zip(gout) {
                        *g += go;
                    }
                }
                if self.nodes[*b].tensor.requires_grad {
                    for (g, &go) in self.grad_mut(*b).iter_mut().zip(gout) {
                        *g += go;
                    }
                }
            }
            Op::AddBcast { x, b } => {
                if self.nodes[*x].tensor.requires_grad {
                    for (g, &go) in self.grad_mut(*x).iter_mut().zip(gout) {
                        *g += go;
                    }
                }
                if self.nodes[*b].tensor.requires_grad {
                    let bn = self.nodes[*b].tensor.numel();
                    let gb = self.grad_mut(*b);
                    for (i, &go) in gout.iter().enumerate() {
                        gb[i % bn] += go;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].tensor.requires_grad {
                    let bd = self.nodes[*b].tensor.data().to_vec();
                    let ga = self.grad_mut(*a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * bd[i];
                    }
                }
                if self.nodes[*b].tensor.requires_grad {
                    let ad = self.nodes[*a].tensor.data().to_vec();
                    let gb = self.grad_mut(*b);
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * ad[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[*a].tensor.requires_grad {
                    let c = *c;
                    let ga = self.grad_mut(*a);
                    for i in 0..gout.len() {
                        ga[i] += c * gout[i];
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[*a].tensor.requires_grad {
                    let bd = self.nodes[*b].tensor.data().to_vec();
                    matmul_grad_a(gout, &bd, m, k, n, self.grad_mut(*a));
                }
                if self.nodes[*b].tensor.requires_grad {
                    let ad = self.nodes[*a].tensor.data().to_vec();
                    matmul_grad_b(&ad, gout, m, k, n, self.grad_mut(*b));
                }
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.nodes[*a].tensor.requires_grad {
                    let bd = self.nodes[*b].tensor.data().to_vec();
                    let ga = self.grad_mut(*a);
                    for t in 0..batch {
                        matmul_grad_a(
                            &gout[t * m * n..(t + 1) * m * n],
                            &bd[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                }
                if self.nodes[*b].tensor.requires_grad {
                    let ad = self.nodes[*a].tensor.data().to_vec();
                    let gb = self.grad_mut(*b);
                    for t in 0..batch {
                        matmul_grad_b(
                            &ad[t * m * k..(t + 1) * m * k],
                            &gout[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[t * k * n..(t + 1) * k * n],
                        );
                    }
                }
            }
            Op::Reshape { a } => {
                if self.nodes[*a].tensor.requires_grad {
                    let ga = self.grad_mut(*a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i];
                    }
                }
            }
            Op::Permute { a, axes, src_shape } => {
                if self.nodes[*a].tensor.requires_grad {
                    let rank = axes.len();
                    let src_strides = row_major_strides(src_shape);
                    let dst_shape: Vec<usize> = axes.iter().map(|&x| src_shape[x]).collect();
                    let dst_strides = row_major_strides(&dst_shape);
                    let ga = self.grad_mut(*a);
                    let mut idx = vec![0usize; rank];
                    for (flat, &go) in gout.iter().enumerate() {
                        let mut rem = flat;
                        for d in 0..rank {
                            idx[d] = rem / dst_strides[d];
                            rem %= dst_strides[d];
                        }
                        let mut s = 0;
                        for d in 0..rank {
                            s += idx[d] * src_strides[axes[d]];
                        }
                        ga[s] += go;
                    }
                }
            }
            Op::IndexAxis { a, axis, index } => {
                if self.nodes[*a].tensor.requires_grad {
                    let sa = self.nodes[*a].tensor.shape().to_vec();
                    let (axis, index) = (*axis, *index);
                    let ga = self.grad_mut(*a);
                    let mut i = 0;
                    for_each_lane(&sa, axis, |base, stride| {
                        ga[base + index * stride] += gout[i];
                        i += 1;
                    });
                }
            }
            Op::ExpandMid { a, reps } => {
                if self.nodes[*a].tensor.requires_grad {
                    let f = self.nodes[*a].tensor.shape()[1];
                    let bsz = self.nodes[*a].tensor.shape()[0];
                    let reps = *reps;
                    let ga = self.grad_mut(*a);
                    for i in 0..bsz {
                        for r in 0..reps {
                            for j in 0..f {
                                ga[i * f + j] += gout[(i * reps + r) * f + j];
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = self.nodes[idx].tensor.shape().to_vec();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..axis].iter().product();
                let axis_total = out_shape[axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].tensor.shape()[axis];
                    if self.nodes[p].tensor.requires_grad {
                        let gp = self.grad_mut(p);
                        for o in 0..outer {
                            let src_base = (o * axis_total + offset) * inner;
                            let dst_base = o * len * inner;
                            for i in 0..len * inner {
                                gp[dst_base + i] += gout[src_base + i];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Mean { a, axis } => {
                if self.nodes[*a].tensor.requires_grad {
                    let sa = self.nodes[*a].tensor.shape().to_vec();
                    let axis = *axis;
                    let len = sa[axis];
                    let inv = 1.0 / len as f64;
                    let ga = self.grad_mut(*a);
                    let mut i = 0;
                    for_each_lane(&sa, axis, |base, stride| {
                        for t in 0..len {
                            ga[base + t * stride] += gout[i] * inv;
                        }
                        i += 1;
                    });
                }
            }
            Op::Relu { a } => {
                if self.nodes[*a].tensor.requires_grad {
                    let ad = self.nodes[*a].tensor.data().to_vec();
                    let ga = self.grad_mut(*a);
                    for i in 0..gout.len() {
                        // Subgradient at exactly 0 is taken as 0.
                        if ad[i] > 0.0 {
                            ga[i] += gout[i];
                        }
                    }
                }
            }
            Op::Tanh { a } => {
                if self.nodes[*a].tensor.requires_grad {
                    let y = self.nodes[idx].tensor.data().to_vec();
                    let ga = self.grad_mut(*a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if self.nodes[*a].tensor.requires_grad {
                    let y = self.nodes[idx].tensor.data().to_vec();
                    let ga = self.grad_mut(*a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if self.nodes[*a].tensor.requires_grad {
                    let y = self.nodes[idx].tensor.data().to_vec();
                    let shape = self.nodes[idx].tensor.shape().to_vec();
                    let axis = *axis;
                    let len = shape[axis];
                    let ga = self.grad_mut(*a);
                    for_each_lane(&shape, axis, |base, stride| {
                        let mut dot = 0.0;
                        for t in 0..len {
                            let i = base + t * stride;
                            dot += gout[i] * y[i];
                        }
                        for t in 0..len {
                            let i = base + t * stride;
                            ga[i] += y[i] * (gout[i] - dot);
                        }
                    });
                }
            }
            Op::Dropout { a, mask } => {
                if self.nodes[*a].tensor.requires_grad {
                    let mask = mask.clone();
                    let ga = self.grad_mut(*a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * mask[i];
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.nodes[*gamma].tensor.numel();
                let lanes = xhat.len() / d;
                if self.nodes[*beta].tensor.requires_grad {
                    let gb = self.grad_mut(*beta);
                    for lane in 0..lanes {
                        for j in 0..d {
                            gb[j] += gout[lane * d + j];
                        }
                    }
                }
                if self.nodes[*gamma].tensor.requires_grad {
                    let xh = xhat.clone();
                    let gg = self.grad_mut(*gamma);
                    for lane in 0..lanes {
                        for j in 0..d {
                            gg[j] += gout[lane * d + j] * xh[lane * d + j];
                        }
                    }
                }
                if self.nodes[*x].tensor.requires_grad {
                    let gam = self.nodes[*gamma].tensor.data().to_vec();
                    let xh = xhat.clone();
                    let istd = inv_std.clone();
                    let gx = self.grad_mut(*x);
                    for lane in 0..lanes {
                        let base = lane * d;
                        let mut sum_h = 0.0;
                        let mut sum_hx = 0.0;
                        for j in 0..d {
                            let h = gout[base + j] * gam[j];
                            sum_h += h;
                            sum_hx += h * xh[base + j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let h = gout[base + j] * gam[j];
                            gx[base + j] +=
                                istd[lane] * (h - sum_h * inv_d - xh[base + j] * sum_hx * inv_d);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let sx = self.nodes[*x].tensor.shape().to_vec();
                let sw = self.nodes[*w].tensor.shape().to_vec();
                let so = self.nodes[idx].tensor.shape().to_vec();
                let (bsz, cin, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let (ho, wo) = (so[2], so[3]);
                if self.nodes[*bias].tensor.requires_grad {
                    let gb = self.grad_mut(*bias);
                    for bi in 0..bsz {
                        for f in 0..cout {
                            let base = (bi * cout + f) * ho * wo;
                            for i in 0..ho * wo {
                                gb[f] += gout[base + i];
                            }
                        }
                    }
                }
                let need_x = self.nodes[*x].tensor.requires_grad;
                let need_w = self.nodes[*w].tensor.requires_grad;
                if need_x || need_w {
                    let xd = self.nodes[*x].tensor.data().to_vec();
                    let wd = self.nodes[*w].tensor.data().to_vec();
                    let mut gx = vec![0.0; xd.len()];
                    let mut gw = vec![0.0; wd.len()];
                    for bi in 0..bsz {
                        for f in 0..cout {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let go = gout[((bi * cout + f) * ho + oy) * wo + ox];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for c in 0..cin {
                                        for ky in 0..kh {
                                            let iy = oy * stride + ky;
                                            if iy < pad || iy - pad >= h {
                                                continue;
                                            }
                                            let iy = iy - pad;
                                            for kx in 0..kw {
                                                let ix = ox * stride + kx;
                                                if ix < pad || ix - pad >= wdt {
                                                    continue;
                                                }
                                                let ix = ix - pad;
                                                let xi = ((bi * cin + c) * h + iy) * wdt + ix;
                                                let wi = ((f * cin + c) * kh + ky) * kw + kx;
                                                if need_w {
                                                    gw[wi] += go * xd[xi];
                                                }
                                                if need_x {
                                                    gx[xi] += go * wd[wi];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_x {
                        let g = self.grad_mut(*x);
                        for i in 0..g.len() {
                            g[i] += gx[i];
                        }
                    }
                    if need_w {
                        let g = self.grad_mut(*w);
                        for i in 0..g.len() {
                            g[i] += gw[i];
                        }
                    }
                }
            }
            Op::BceMean { p, targets } => {
                if self.nodes[*p].tensor.requires_grad {
                    let pd = self.nodes[*p].tensor.data().to_vec();
                    let n = pd.len() as f64;
                    let go = gout[0];
                    let targets = targets.clone();
                    let gp = self.grad_mut(*p);
                    for (i, (&pi, &ti)) in pd.iter().zip(&targets).enumerate() {
                        let mut d = 0.0;
                        if ti != 0.0 {
                            d -= ti / pi.max(f64::MIN_POSITIVE);
                        }
                        if ti != 1.0 {
                            d += (1.0 - ti) / (1.0 - pi).max(f64::MIN_POSITIVE);
                        }
                        gp[i] += go * d / n;
                    }
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}
