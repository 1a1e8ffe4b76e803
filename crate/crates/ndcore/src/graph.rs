//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its output value and enough saved state to run its vector-Jacobian
//! product; [`Graph::backward`] walks the tape in reverse. Dropping the graph
//! frees the tape.

use crate::error::{dim_err, NdError, Result};
use crate::kernels;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Tanh,
    Exp,
    Sin,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Silu => "silu",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Sin => "sin",
            Unary::Square => "square",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Silu => x / (1.0 + kernels::exp(-x)),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Sin => x.sin(),
            Unary::Square => x * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Silu => {
                let s = 1.0 / (1.0 + kernels::exp(-x));
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Sin => x.cos(),
            Unary::Square => 2.0 * x,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Unary(Unary, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SwapAxes12(Var),
    SplitHeads { x: Var, offset: usize, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Concat { a: Var, b: Var, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Repeat { x: Var, axis: usize },
    Gather { table: Var, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Splits a shape around `axis` into (outer, axis_len, inner) extents.
fn split_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    macs: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of multiply-adds performed by matrix products recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(NdError::NonFinite(op_name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a differentiable leaf. Repeated calls for
    /// the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.params.push((id, v));
        v
    }

    /// Collects leaf gradients of every bound parameter, zero for unbound ones.
    pub fn param_grads(&self, store: &ParamStore) -> Grads {
        let mut grads = Grads::zeros_like(store);
        for &(id, v) in &self.params {
            if let Some(g) = &self.nodes[v.0].grad {
                grads.get_mut(id).copy_from_slice(g);
            }
        }
        grads
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return dim_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(op_name, value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let value = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * s).collect());
        let ng = self.ng(a);
        self.push("scale", value, Op::Scale(a, s), ng)
    }

    /// `x[..., n] + bias[n]`, broadcasting over all leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let vb = self.value(bias);
        let n = vx.last_dim();
        if vb.rank() != 1 || vb.len() != n {
            return dim_err("add_bias", format!("bias {:?} for input {:?}", vb.shape(), vx.shape()));
        }
        let mut data = vx.data().to_vec();
        if n > 0 {
            for row in data.chunks_exact_mut(n) {
                for (r, b) in row.iter_mut().zip(vb.data()) {
                    *r += b;
                }
            }
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        let ng = self.ng(x) || self.ng(bias);
        self.push("add_bias", value, Op::AddBias(x, bias), ng)
    }

    /// Matrix product of `[.., k]` and `[k, n]`; leading axes of `a` are
    /// flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return dim_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut c = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut c);
        self.macs += (m * k * n) as u64;
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", Tensor::from_parts(shape, c), Op::MatMul(a, b), ng)
    }

    /// Batched product: `[bt, m, k] x [bt, k, n]`, or `[bt, m, k] x [bt, n, k]ᵀ`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && {
            if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            }
        };
        if !ok {
            return dim_err("bmm", format!("{sa:?} x {sb:?} (trans_b = {trans_b})"));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut c = vec![0.0; bt * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let ci = &mut c[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(m, k, n, ai, bi, ci);
            } else {
                kernels::gemm_nn(m, k, n, ai, bi, ci);
            }
        }
        self.macs += (bt * m * k * n) as u64;
        let ng = self.ng(a) || self.ng(b);
        self.push("bmm", Tensor::from_parts(vec![bt, m, n], c), Op::Bmm { a, b, trans_b }, ng)
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.last_dim();
        if n == 0 || vx.rank() == 0 {
            return dim_err("softmax", "empty last dimension");
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            kernels::exp_shifted(row, max);
            let sum: f64 = row.iter().sum();
            for r in row.iter_mut() {
                *r /= sum;
            }
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push("softmax", value, Op::Softmax(x), ng)
    }

    /// Layer normalisation over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.last_dim();
        if n == 0 || vx.rank() == 0 {
            return dim_err("layer_norm", "last dimension < 1");
        }
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.shape() != [n] || vb.shape() != [n] {
            return dim_err(
                "layer_norm",
                format!("gain {:?} / bias {:?} for last dim {n}", vg.shape(), vb.shape()),
            );
        }
        let rows = vx.len() / n;
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = match kind {
            Unary::Silu => vx.data().iter().map(|&v| Unary::Silu.apply(v)).collect(),
            _ => vx.data().iter().map(|&v| kind.apply(v)).collect(),
        };
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(kind.name(), value, Op::Unary(kind, x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sin, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    /// Elementwise clamp; gradient passes only where the input lies inside
    /// `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(NdError::Contract(format!("clamp bounds {lo} > {hi}")));
        }
        let vx = self.value(x);
        let value = Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|v| v.clamp(lo, hi)).collect());
        let ng = self.ng(x);
        self.push("clamp", value, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.is_empty() {
            return dim_err("mean", "empty tensor");
        }
        let s = vx.data().iter().sum::<f64>() / vx.len() as f64;
        let ng = self.ng(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        self.push("reshape", value, Op::Reshape(x), ng)
    }

    /// `[a, b, c, d] -> [a, c, b, d]`; used to move heads next to the batch.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let &[a, b, c, d] = vx.shape() else {
            return dim_err("swap_axes12", format!("expected rank 4, got {:?}", vx.shape()));
        };
        let data = swap12(vx.data(), a, b, c, d);
        let ng = self.ng(x);
        self.push("swap_axes12", Tensor::from_parts(vec![a, c, b, d], data), Op::SwapAxes12(x), ng)
    }

    /// Columns `offset..offset + width` of `x: [b, s, c]`, split into `heads`
    /// equal groups and laid out as `[b * heads, s, width / heads]`.
    pub fn split_heads(&mut self, x: Var, offset: usize, width: usize, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let &[b, s, c] = vx.shape() else {
            return dim_err("split_heads", format!("expected rank 3, got {:?}", vx.shape()));
        };
        if heads == 0 || width % heads != 0 || offset + width > c {
            return dim_err("split_heads", format!("{heads} heads over columns {offset}..{} of {c}", offset + width));
        }
        let dh = width / heads;
        let mut out = vec![0.0; b * s * width];
        let src = vx.data();
        for bi in 0..b {
            for si in 0..s {
                let row = &src[(bi * s + si) * c + offset..(bi * s + si) * c + offset + width];
                for h in 0..heads {
                    let dst = ((bi * heads + h) * s + si) * dh;
                    out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let ng = self.ng(x);
        self.push("split_heads", Tensor::from_parts(vec![b * heads, s, dh], out), Op::SplitHeads { x, offset, heads }, ng)
    }

    /// Inverse layout of [`Graph::split_heads`]: `[b * heads, s, dh] -> [b, s, heads * dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let &[bh, s, dh] = vx.shape() else {
            return dim_err("merge_heads", format!("expected rank 3, got {:?}", vx.shape()));
        };
        if heads == 0 || bh % heads != 0 {
            return dim_err("merge_heads", format!("{heads} heads do not divide {bh}"));
        }
        let b = bh / heads;
        let w = heads * dh;
        let mut out = vec![0.0; bh * s * dh];
        let src = vx.data();
        for bi in 0..b {
            for h in 0..heads {
                for si in 0..s {
                    let from = ((bi * heads + h) * s + si) * dh;
                    let to = (bi * s + si) * w + h * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let ng = self.ng(x);
        self.push("merge_heads", Tensor::from_parts(vec![b, s, w], out), Op::MergeHeads { x, heads }, ng)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return dim_err("concat", format!("{sa:?} and {sb:?} along axis {axis}"));
        }
        let (outer, la, inner) = split_extents(&sa, axis);
        let lb = sb[axis];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            data.extend_from_slice(&da[o * la * inner..(o + 1) * la * inner]);
            data.extend_from_slice(&db[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa;
        shape[axis] = la + lb;
        let ng = self.ng(a) || self.ng(b);
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat { a, b, axis }, ng)
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return dim_err("slice", format!("{start}..{} on axis {axis} of {sx:?}", start + len));
        }
        let (outer, full, inner) = split_extents(&sx, axis);
        let dx = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&dx[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let ng = self.ng(x);
        self.push("slice", Tensor::from_parts(shape, data), Op::Slice { x, axis, start }, ng)
    }

    /// Inserts a new axis of extent `n` at position `axis`, copying the input
    /// along it.
    pub fn repeat(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis > sx.len() {
            return dim_err("repeat", format!("axis {axis} for rank {}", sx.len()));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis..].iter().product();
        let dx = self.value(x).data();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&dx[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = sx;
        shape.insert(axis, n);
        let ng = self.ng(x);
        self.push("repeat", Tensor::from_parts(shape, data), Op::Repeat { x, axis }, ng)
    }

    /// Row lookup into a `[rows, d]` table, yielding `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return dim_err("gather_rows", format!("table {:?}", vt.shape()));
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return dim_err("gather_rows", format!("index {bad} >= {rows}"));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(vt.row(i));
        }
        let ng = self.ng(table);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![idx.len(), d], data),
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return dim_err("linear", format!("input {sx:?} with weight {sw:?}"));
        }
        let mut y = self.matmul(x, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        Ok(y)
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Runs reverse accumulation from a scalar `loss`. Leaf gradients
    /// accumulate across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(NdError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let slot = &mut self.nodes[i].grad;
                match slot {
                    Some(prev) => prev.iter_mut().zip(&g).for_each(|(p, x)| *p += x),
                    None => *slot = Some(g),
                }
                continue;
            }
            let node = &self.nodes[i];
            let mut acc = Acc {
                nodes: &self.nodes,
                adj: &mut adj,
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc.add(*a, |d| axpy(d, 1.0, &g));
                    acc.add(*b, |d| axpy(d, 1.0, &g));
                }
                Op::Sub(a, b) => {
                    acc.add(*a, |d| axpy(d, 1.0, &g));
                    acc.add(*b, |d| axpy(d, -1.0, &g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (acc.val(*a), acc.val(*b));
                    acc.add(*a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(vb) {
                            *d += g * y;
                        }
                    });
                    acc.add(*b, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(va) {
                            *d += g * x;
                        }
                    });
                }
                Op::Scale(a, s) => acc.add(*a, |d| axpy(d, *s, &g)),
                Op::AddBias(x, b) => {
                    acc.add(*x, |d| axpy(d, 1.0, &g));
                    acc.add(*b, |d| {
                        let n = d.len();
                        if n > 0 {
                            for row in g.chunks_exact(n) {
                                axpy(d, 1.0, row);
                            }
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let sb = acc.shape(*b);
                    let (k, n) = (sb[0], sb[1]);
                    let m = acc.val(*a).len() / k.max(1);
                    let (va, vb) = (acc.val(*a), acc.val(*b));
                    acc.add(*a, |d| kernels::gemm_nt(m, n, k, &g, vb, d));
                    acc.add(*b, |d| kernels::gemm_tn(k, m, n, va, &g, d));
                }
                Op::Bmm { a, b, trans_b } => {
                    let (sa, sb) = (acc.shape(*a), acc.shape(*b));
                    let (bt, m, k) = (sa[0], sa[1], sa[2]);
                    let n = if *trans_b { sb[1] } else { sb[2] };
                    let (va, vb) = (acc.val(*a), acc.val(*b));
                    let trans_b = *trans_b;
                    acc.add(*a, |d| {
                        for i in 0..bt {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &vb[i * k * n..(i + 1) * k * n];
                            let di = &mut d[i * m * k..(i + 1) * m * k];
                            if trans_b {
                                kernels::gemm_nn(m, n, k, gi, bi, di);
                            } else {
                                kernels::gemm_nt(m, n, k, gi, bi, di);
                            }
                        }
                    });
                    acc.add(*b, |d| {
                        for i in 0..bt {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &va[i * m * k..(i + 1) * m * k];
                            let di = &mut d[i * k * n..(i + 1) * k * n];
                            if trans_b {
                                kernels::gemm_tn(n, m, k, gi, ai, di);
                            } else {
                                kernels::gemm_tn(k, m, n, ai, gi, di);
                            }
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    acc.add(*x, |d| {
                        for ((drow, grow), yrow) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                drow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let n = node.value.last_dim();
                    let vg = acc.val(*gain);
                    acc.add(*gain, |d| {
                        for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                            for j in 0..n {
                                d[j] += grow[j] * hrow[j];
                            }
                        }
                    });
                    acc.add(*bias, |d| {
                        for grow in g.chunks_exact(n) {
                            axpy(d, 1.0, grow);
                        }
                    });
                    acc.add(*x, |d| {
                        let mut dh = vec![0.0; n];
                        for (r, ((drow, grow), hrow)) in d
                            .chunks_exact_mut(n)
                            .zip(g.chunks_exact(n))
                            .zip(xhat.chunks_exact(n))
                            .enumerate()
                        {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..n {
                                dh[j] = grow[j] * vg[j];
                                m1 += dh[j];
                                m2 += dh[j] * hrow[j];
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            for j in 0..n {
                                drow[j] += rstd[r] * (dh[j] - m1 - hrow[j] * m2);
                            }
                        }
                    });
                }
                Op::Unary(kind, x) => {
                    let (vx, y) = (acc.val(*x), node.value.data());
                    acc.add(*x, |d| {
                        if *kind == Unary::Silu {
                            for ((d, g), x) in d.iter_mut().zip(&g).zip(vx) {
                                *d += g * Unary::Silu.derivative(*x, 0.0);
                            }
                            return;
                        }
                        for (((d, g), x), y) in d.iter_mut().zip(&g).zip(vx).zip(y) {
                            *d += g * kind.derivative(*x, *y);
                        }
                    });
                }
                Op::Clamp { x, lo, hi } => {
                    let vx = acc.val(*x);
                    acc.add(*x, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(vx) {
                            if *x >= *lo && *x <= *hi {
                                *d += g;
                            }
                        }
                    });
                }
                Op::Sum(x) => acc.add(*x, |d| d.iter_mut().for_each(|d| *d += g[0])),
                Op::Mean(x) => {
                    let s = g[0] / acc.val(*x).len() as f64;
                    acc.add(*x, |d| d.iter_mut().for_each(|d| *d += s));
                }
                Op::Reshape(x) => acc.add_owned(*x, g),
                Op::SplitHeads { x, offset, heads } => {
                    let &[b, s, c] = acc.shape(*x) else { unreachable!() };
                    let (heads, offset) = (*heads, *offset);
                    let dh = node.value.shape()[2];
                    acc.add(*x, |d| {
                        for bi in 0..b {
                            for si in 0..s {
                                let row = (bi * s + si) * c + offset;
                                for h in 0..heads {
                                    let src = ((bi * heads + h) * s + si) * dh;
                                    axpy(&mut d[row + h * dh..row + (h + 1) * dh], 1.0, &g[src..src + dh]);
                                }
                            }
                        }
                    });
                }
                Op::MergeHeads { x, heads } => {
                    let &[bh, s, dh] = acc.shape(*x) else { unreachable!() };
                    let heads = *heads;
                    let w = heads * dh;
                    acc.add(*x, |d| {
                        for bi in 0..bh / heads {
                            for h in 0..heads {
                                for si in 0..s {
                                    let to = ((bi * heads + h) * s + si) * dh;
                                    let from = (bi * s + si) * w + h * dh;
                                    axpy(&mut d[to..to + dh], 1.0, &g[from..from + dh]);
                                }
                            }
                        }
                    });
                }
                Op::SwapAxes12(x) => {
                    let &[a, b, c, dd] = acc.shape(*x) else { unreachable!() };
                    let back = swap12(&g, a, c, b, dd);
                    acc.add(*x, |d| axpy(d, 1.0, &back));
                }
                Op::Concat { a, b, axis } => {
                    let (outer, la, inner) = split_extents(acc.shape(*a), *axis);
                    let lb = acc.shape(*b)[*axis];
                    let stride = (la + lb) * inner;
                    acc.add(*a, |d| {
                        for o in 0..outer {
                            axpy(&mut d[o * la * inner..(o + 1) * la * inner], 1.0, &g[o * stride..o * stride + la * inner]);
                        }
                    });
                    acc.add(*b, |d| {
                        for o in 0..outer {
                            axpy(
                                &mut d[o * lb * inner..(o + 1) * lb * inner],
                                1.0,
                                &g[o * stride + la * inner..(o + 1) * stride],
                            );
                        }
                    });
                }
                Op::Slice { x, axis, start } => {
                    let (outer, full, inner) = split_extents(acc.shape(*x), *axis);
                    let len = node.value.shape()[*axis];
                    acc.add(*x, |d| {
                        for o in 0..outer {
                            let base = o * full * inner + start * inner;
                            axpy(&mut d[base..base + len * inner], 1.0, &g[o * len * inner..(o + 1) * len * inner]);
                        }
                    });
                }
                Op::Repeat { x, axis } => {
                    let sx = acc.shape(*x);
                    let outer: usize = sx[..*axis].iter().product();
                    let inner: usize = sx[*axis..].iter().product();
                    let n = node.value.shape()[*axis];
                    acc.add(*x, |d| {
                        for o in 0..outer {
                            for r in 0..n {
                                let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                                axpy(&mut d[o * inner..(o + 1) * inner], 1.0, src);
                            }
                        }
                    });
                }
                Op::Gather { table, idx } => {
                    let dcol = acc.shape(*table)[1];
                    acc.add(*table, |d| {
                        for (r, &i) in idx.iter().enumerate() {
                            axpy(&mut d[i * dcol..(i + 1) * dcol], 1.0, &g[r * dcol..(r + 1) * dcol]);
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

fn swap12(x: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

/// Adjoint accumulator used during the reverse sweep.
struct Acc<'a> {
    nodes: &'a [Node],
    adj: &'a mut [Option<Vec<f64>>],
}

impl<'a> Acc<'a> {
    fn val(&self, v: Var) -> &'a [f64] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &'a [usize] {
        self.nodes[v.0].value.shape()
    }

    fn add(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.adj[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    /// Like `add` with an identity Jacobian, reusing `g` when the target has
    /// no adjoint yet.
    fn add_owned(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.adj[v.0] {
            Some(slot) => axpy(slot, 1.0, &g),
            none => *none = Some(g),
        }
    }
}
