//! Transformer building blocks shared by the autoencoder and the velocity
//! network: multi-head self-attention, parameter-matched SwiGLU, pre-norm
//! and adaLN-Zero blocks, register banks and conditioning embeddings.
//!
//! Activations are `[batch, seq, dim]`. Parameters live in a
//! [`ParamStore`]; the structs here only hold ids into it.

use ndcore::{Graph, ParamId, ParamStore, RngStream, Tensor, Var};

use crate::error::{config, Result};

pub const LN_EPS: f64 = 1e-6;

/// SwiGLU hidden width matching a 4D-wide MLP's parameter count, `round(8D/3)`.
pub fn swiglu_hidden(dim: usize) -> usize {
    (8 * dim + 1) / 3
}

fn xavier(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    rng.normal_vec(fan_in * fan_out).into_iter().map(|x| x * std).collect()
}

pub(crate) fn normal_param(store: &mut ParamStore, name: &str, shape: &[usize], std: f64, rng: &mut RngStream) -> ParamId {
    let n = shape.iter().product();
    let data = rng.normal_vec(n).into_iter().map(|x| x * std).collect();
    store.add(name, Tensor::new(shape.to_vec(), data).expect("finite init"))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut RngStream) -> Self {
        let w = Tensor::new([fan_in, fan_out], xavier(rng, fan_in, fan_out)).expect("finite init");
        Self::with_weight(store, name, w, bias)
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_weight(store, name, Tensor::zeros([fan_in, fan_out]), true)
    }

    fn with_weight(store: &mut ParamStore, name: &str, w: Tensor, bias: bool) -> Self {
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        Ok(g.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }
}

/// Layer norm without a learned affine, as used inside adaLN blocks.
pub fn plain_norm(g: &mut Graph, x: Var) -> Result<Var> {
    let d = *g.shape(x).last().unwrap_or(&1);
    let one = g.constant(Tensor::full([d], 1.0));
    let zero = g.constant(Tensor::zeros([d]));
    Ok(g.layer_norm(x, one, zero, LN_EPS)?)
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut RngStream) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return config(format!("{heads} heads do not divide model width {dim}"));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    /// Scaled dot-product multi-head self-attention over `[b, s, dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let &[_, _, d] = g.shape(x) else {
            return config(format!("attention expects [batch, seq, dim], got {:?}", g.shape(x)));
        };
        if d != self.dim {
            return config(format!("attention width {} fed {d}", self.dim));
        }
        let (h, dh) = (self.heads, d / self.heads);
        let qkv = self.qkv.forward(g, store, x)?;
        let q = g.split_heads(qkv, 0, d, h)?;
        let q = g.scale(q, 1.0 / (dh as f64).sqrt())?;
        let k = g.split_heads(qkv, d, d, h)?;
        let v = g.split_heads(qkv, 2 * d, d, h)?;
        let scores = g.bmm(q, k, true)?;
        let weights = g.softmax(scores)?;
        let out = g.bmm(weights, v, false)?;
        let out = g.merge_heads(out, h)?;
        self.proj.forward(g, store, out)
    }
}

/// Gated feed-forward: `(silu(x Wg) ⊙ x Wv) Wd`.
#[derive(Clone, Debug)]
pub struct SwiGlu {
    pub gate: Linear,
    pub value: Linear,
    pub down: Linear,
    pub hidden: usize,
}

impl SwiGlu {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut RngStream) -> Self {
        let hidden = swiglu_hidden(dim);
        Self {
            gate: Linear::new(store, &format!("{name}.gate"), dim, hidden, false, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, hidden, false, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, false, rng),
            hidden,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gate = self.gate.forward(g, store, x)?;
        let gate = g.silu(gate)?;
        let value = self.value.forward(g, store, x)?;
        let h = g.mul(gate, value)?;
        self.down.forward(g, store, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: SwiGlu,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: SwiGlu::new(store, &format!("{name}.ffn"), dim, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.ffn.forward(g, store, h)?;
        Ok(g.add(x, h)?)
    }
}

/// `x * (1 + scale) + shift` with per-sample `[b, d]` modulation broadcast
/// over the sequence axis.
pub fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s = g.shape(x)[1];
    let scale = g.repeat(scale, 1, s)?;
    let shift = g.repeat(shift, 1, s)?;
    let xs = g.mul(x, scale)?;
    let x = g.add(x, xs)?;
    Ok(g.add(x, shift)?)
}

fn gated(g: &mut Graph, h: Var, gate: Var) -> Result<Var> {
    let s = g.shape(h)[1];
    let gate = g.repeat(gate, 1, s)?;
    Ok(g.mul(h, gate)?)
}

/// Block conditioned through adaptive layer norm. The modulation projection
/// starts at zero, so every gate is zero and a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct AdaLnBlock {
    pub attn: Attention,
    pub ffn: SwiGlu,
    /// `cond -> [shift_a, scale_a, gate_a, shift_f, scale_f, gate_f]`.
    pub modulation: Linear,
    pub dim: usize,
}

impl AdaLnBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ffn: SwiGlu::new(store, &format!("{name}.ffn"), dim, rng),
            modulation: Linear::zeros(store, &format!("{name}.adaln"), dim, 6 * dim),
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, cond: Var) -> Result<Var> {
        let d = self.dim;
        if g.shape(cond).len() != 2 || g.shape(cond)[1] != d {
            return config(format!("conditioning {:?} for width {d}", g.shape(cond)));
        }
        let c = g.silu(cond)?;
        let m = self.modulation.forward(g, store, c)?;
        let mut chunk = |i: usize| g.slice(m, 1, i * d, d);
        let (shift_a, scale_a, gate_a) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (shift_f, scale_f, gate_f) = (chunk(3)?, chunk(4)?, chunk(5)?);

        let h = plain_norm(g, x)?;
        let h = modulate(g, h, shift_a, scale_a)?;
        let h = self.attn.forward(g, store, h)?;
        let h = gated(g, h, gate_a)?;
        let x = g.add(x, h)?;

        let h = plain_norm(g, x)?;
        let h = modulate(g, h, shift_f, scale_f)?;
        let h = self.ffn.forward(g, store, h)?;
        let h = gated(g, h, gate_f)?;
        Ok(g.add(x, h)?)
    }
}

/// `count` learnable tokens of width `dim`.
#[derive(Clone, Debug)]
pub struct RegisterBank {
    pub embeddings: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl RegisterBank {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut RngStream) -> Self {
        Self {
            embeddings: normal_param(store, name, &[count, dim], 0.02, rng),
            count,
            dim,
        }
    }

    /// `[b, p, d] -> [b, count + p, d]` with the registers in front.
    pub fn prepend(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Var> {
        let &[b, _, d] = g.shape(patches) else {
            return config(format!("expected [batch, seq, dim], got {:?}", g.shape(patches)));
        };
        if d != self.dim {
            return config(format!("register width {} vs token width {d}", self.dim));
        }
        let bank = g.param(store, self.embeddings);
        let bank = g.repeat(bank, 0, b)?;
        Ok(g.concat(bank, patches, 1)?)
    }

    /// Rows `0..count` of a processed sequence.
    pub fn extract(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        Ok(g.slice(seq, 1, 0, self.count)?)
    }
}

pub const TIME_FREQS: usize = 64;

/// `[cos(t·ω_i), sin(t·ω_i)]` for 64 geometric frequencies, with `t`
/// scaled by 1000 so `[0, 1]` spans the usual diffusion range.
pub fn timestep_features(ts: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(ts.len() * 2 * TIME_FREQS);
    for &t in ts {
        let t = t * 1000.0;
        let freqs = (0..TIME_FREQS).map(|i| (-(10_000f64.ln()) * i as f64 / TIME_FREQS as f64).exp());
        let (cos, sin): (Vec<f64>, Vec<f64>) = freqs.map(|w| ((t * w).cos(), (t * w).sin())).unzip();
        data.extend(cos);
        data.extend(sin);
    }
    Tensor::new([ts.len(), 2 * TIME_FREQS], data).expect("finite timestep features")
}

/// Sinusoidal features followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TimestepEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TimestepEmbedder {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut RngStream) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), 2 * TIME_FREQS, dim, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ts: &[f64]) -> Result<Var> {
        let f = g.constant(timestep_features(ts));
        let h = self.fc1.forward(g, store, f)?;
        let h = g.silu(h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Class table with `classes + 1` rows; the last row is the null class used
/// for unconditional passes.
#[derive(Clone, Debug)]
pub struct ClassEmbedding {
    pub table: ParamId,
    pub classes: usize,
}

impl ClassEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, classes: usize, dim: usize, rng: &mut RngStream) -> Self {
        Self {
            table: normal_param(store, name, &[classes + 1, dim], 0.02, rng),
            classes,
        }
    }

    pub fn null_label(&self) -> usize {
        self.classes
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, labels: &[usize]) -> Result<Var> {
        if let Some(bad) = labels.iter().find(|&&l| l > self.classes) {
            return config(format!("label {bad} outside 0..={}", self.classes));
        }
        let table = g.param(store, self.table);
        Ok(g.gather_rows(table, labels)?)
    }
}
