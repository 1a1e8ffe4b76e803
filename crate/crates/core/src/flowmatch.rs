//! Flow matching on latent sequences.
//!
//! Noise `z0` at `t = 0` is carried to data `z1` at `t = 1` along straight
//! paths `z_t = (1 − t) z0 + t z1`; the network regresses the constant path
//! velocity `z1 − z0`. Times are warped by `t' = t / (κ − (κ − 1) t)` in
//! both training and sampling, and classifier-free guidance is applied only
//! inside a configurable time window.

use ndcore::{AdamW, AdamWConfig, Graph, NdError, ParamStore, RngStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{config, contract, Error, Result};
use crate::transformer::{modulate, normal_param, plain_norm, AdaLnBlock, ClassEmbedding, Linear, TimestepEmbedder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub kappa: f64,
    pub euler_steps: usize,
    pub cfg_weight: f64,
    pub cfg_interval: (f64, f64),
    pub label_dropout: f64,
    pub ema_decay: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            kappa: 3.0,
            euler_steps: 50,
            cfg_weight: 4.5,
            cfg_interval: (0.225, 1.0),
            label_dropout: 0.1,
            ema_decay: 0.9995,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 1.0) || !self.kappa.is_finite() {
            return config(format!("kappa must be >= 1, got {}", self.kappa));
        }
        if self.euler_steps == 0 {
            return config("euler_steps must be positive");
        }
        if !(self.cfg_weight >= 0.0) || !self.cfg_weight.is_finite() {
            return config(format!("cfg_weight must be finite and non-negative, got {}", self.cfg_weight));
        }
        let (lo, hi) = self.cfg_interval;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return config(format!("cfg_interval must satisfy 0 <= lo < hi <= 1, got [{lo}, {hi}]"));
        }
        if !(0.0..1.0).contains(&self.label_dropout) {
            return config(format!("label_dropout must lie in [0, 1), got {}", self.label_dropout));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return config(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        Ok(())
    }
}

/// `t / (κ − (κ − 1) t)`. Maps `[0, 1]` onto itself, pushing mass towards
/// the noise end for `κ > 1`.
pub fn time_shift(t: f64, kappa: f64) -> Result<f64> {
    if !(kappa >= 1.0) {
        return config(format!("kappa must be >= 1, got {kappa}"));
    }
    if !(0.0..=1.0).contains(&t) {
        return contract(format!("t must lie in [0, 1], got {t}"));
    }
    Ok(t / (kappa - (kappa - 1.0) * t))
}

/// Inverse of [`time_shift`] for the same `κ`.
pub fn time_unshift(t: f64, kappa: f64) -> Result<f64> {
    if !(kappa >= 1.0) {
        return config(format!("kappa must be >= 1, got {kappa}"));
    }
    if !(0.0..=1.0).contains(&t) {
        return contract(format!("t must lie in [0, 1], got {t}"));
    }
    Ok(kappa * t / (1.0 + (kappa - 1.0) * t))
}

/// `(1 − t) z0 + t z1`.
pub fn interpolate(z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
    if z0.shape() != z1.shape() {
        return contract(format!("z0 {:?} vs z1 {:?}", z0.shape(), z1.shape()));
    }
    if !(0.0..=1.0).contains(&t) {
        return contract(format!("t must lie in [0, 1], got {t}"));
    }
    let data = z0.data().iter().zip(z1.data()).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    Ok(Tensor::new(z0.shape().to_vec(), data)?)
}

/// Anything that predicts a velocity for a batch `z: [b, T, d]` at one time.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, t: f64, labels: &[usize]) -> Result<Tensor>;

    /// Label that requests the unconditional prediction.
    fn null_label(&self) -> usize;
}

/// Classifier-free guidance restricted to `cfg_interval`. Outside the window,
/// or at `w = 1`, this is exactly the conditional velocity.
pub fn guided_velocity(field: &dyn VelocityField, z: &Tensor, t: f64, labels: &[usize], cfg: &FlowConfig) -> Result<Tensor> {
    let cond = field.velocity(z, t, labels)?;
    let (lo, hi) = cfg.cfg_interval;
    if cfg.cfg_weight == 1.0 || t < lo || t > hi {
        return Ok(cond);
    }
    let nulls = vec![field.null_label(); labels.len()];
    let uncond = field.velocity(z, t, &nulls)?;
    let w = cfg.cfg_weight;
    let data = cond.data().iter().zip(uncond.data()).map(|(c, u)| u + w * (c - u)).collect();
    Ok(Tensor::new(cond.shape().to_vec(), data)?)
}

/// The shifted time grid `t_0 = 0 < … < t_N = 1`.
pub fn time_grid(steps: usize, kappa: f64) -> Result<Vec<f64>> {
    (0..=steps).map(|i| time_shift(i as f64 / steps as f64, kappa)).collect()
}

/// Forward Euler from `z0` at `t = 0` to `t = 1` over the shifted grid.
pub fn euler_sample(field: &dyn VelocityField, z0: &Tensor, labels: &[usize], cfg: &FlowConfig) -> Result<Tensor> {
    cfg.validate()?;
    let grid = time_grid(cfg.euler_steps, cfg.kappa)?;
    let mut z = z0.clone();
    for (step, w) in grid.windows(2).enumerate() {
        let v = guided_velocity(field, &z, w[0], labels, cfg).map_err(|e| match e {
            Error::Tensor(NdError::NonFinite(op)) => Error::Numeric(format!("non-finite velocity ({op}) at Euler step {step}")),
            other => other,
        })?;
        let dt = w[1] - w[0];
        let data: Vec<f64> = z.data().iter().zip(v.data()).map(|(a, b)| a + dt * b).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite state at Euler step {step}")));
        }
        z = Tensor::new(z.shape().to_vec(), data)?;
    }
    Ok(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitConfig {
    pub tokens: usize,
    pub latent_dim: usize,
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub classes: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            latent_dim: 8,
            model_dim: 64,
            depth: 6,
            heads: 4,
            classes: 4,
        }
    }
}

/// DiT-style velocity network over a latent token sequence.
#[derive(Clone, Debug)]
pub struct VelocityModel {
    pub cfg: DitConfig,
    pub store: ParamStore,
    input: Linear,
    pos: ndcore::ParamId,
    time: TimestepEmbedder,
    class: ClassEmbedding,
    blocks: Vec<AdaLnBlock>,
    final_mod: Linear,
    output: Linear,
}

impl VelocityModel {
    pub fn new(cfg: &DitConfig, rng: &mut RngStream) -> Result<Self> {
        if [cfg.tokens, cfg.latent_dim, cfg.model_dim, cfg.classes].contains(&0) {
            return config(format!("DiT dimensions must be positive: {cfg:?}"));
        }
        let (d, dm) = (cfg.latent_dim, cfg.model_dim);
        let mut store = ParamStore::new();
        let s = &mut store;
        let input = Linear::new(s, "dit.in", d, dm, true, rng);
        let pos = normal_param(s, "dit.pos", &[cfg.tokens, dm], 0.02, rng);
        let time = TimestepEmbedder::new(s, "dit.time", dm, rng);
        let class = ClassEmbedding::new(s, "dit.class", cfg.classes, dm, rng);
        let blocks = (0..cfg.depth)
            .map(|i| AdaLnBlock::new(s, &format!("dit.block{i}"), dm, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_mod = Linear::zeros(s, "dit.final.adaln", dm, 2 * dm);
        let output = Linear::zeros(s, "dit.out", dm, d);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            input,
            pos,
            time,
            class,
            blocks,
            final_mod,
            output,
        })
    }

    /// `z: [b, T, d]`, one time and one label per sample.
    pub fn forward_with(&self, s: &ParamStore, g: &mut Graph, z: Var, ts: &[f64], labels: &[usize]) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        let (t, d, dm) = (self.cfg.tokens, self.cfg.latent_dim, self.cfg.model_dim);
        if shape.len() != 3 || shape[1..] != [t, d] {
            return config(format!("latent batch {shape:?} does not match [b, {t}, {d}]"));
        }
        let b = shape[0];
        if ts.len() != b || labels.len() != b {
            return contract(format!("{b} samples with {} times and {} labels", ts.len(), labels.len()));
        }
        let h = self.input.forward(g, s, z)?;
        let pos = g.param(s, self.pos);
        let pos = g.repeat(pos, 0, b)?;
        let mut h = g.add(h, pos)?;
        let te = self.time.forward(g, s, ts)?;
        let ce = self.class.forward(g, s, labels)?;
        let cond = g.add(te, ce)?;
        for block in &self.blocks {
            h = block.forward(g, s, h, cond)?;
        }
        let c = g.silu(cond)?;
        let m = self.final_mod.forward(g, s, c)?;
        let shift = g.slice(m, 1, 0, dm)?;
        let scale = g.slice(m, 1, dm, dm)?;
        let h = plain_norm(g, h)?;
        let h = modulate(g, h, shift, scale)?;
        self.output.forward(g, s, h)
    }

    pub fn predict(&self, store: &ParamStore, z: &Tensor, ts: &[f64], labels: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let v = self.forward_with(store, &mut g, zv, ts, labels)?;
        Ok(g.value(v).clone())
    }

    /// Binds a parameter set (live or EMA) for sampling.
    pub fn field<'a>(&'a self, store: &'a ParamStore) -> ModelField<'a> {
        ModelField { model: self, store }
    }

    pub fn to_checkpoint(&self, ema: &ParamStore, stats: &LatentStats) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.add_store("live.", &self.store);
        ck.add_store("ema.", ema);
        let d = stats.mean.len();
        ck.push("latent.mean", Tensor::new([d], stats.mean.clone()).expect("finite"));
        ck.push("latent.std", Tensor::new([d], stats.std.clone()).expect("finite"));
        ck
    }

    /// Model with live parameters, EMA parameters and latent statistics.
    pub fn from_checkpoint(cfg: &DitConfig, ck: &Checkpoint) -> Result<(Self, ParamStore, LatentStats)> {
        let mut model = Self::new(cfg, &mut RngStream::new(0))?;
        ck.load_store("live.", &mut model.store)?;
        let mut ema = model.store.clone();
        ck.load_store("ema.", &mut ema)?;
        let (Some(mean), Some(std)) = (ck.get("latent.mean"), ck.get("latent.std")) else {
            return contract("checkpoint is missing latent statistics");
        };
        if mean.len() != cfg.latent_dim || std.len() != cfg.latent_dim {
            return contract("latent statistics do not match latent_dim");
        }
        let stats = LatentStats {
            mean: mean.data().to_vec(),
            std: std.data().to_vec(),
        };
        Ok((model, ema, stats))
    }
}

pub struct ModelField<'a> {
    model: &'a VelocityModel,
    store: &'a ParamStore,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, z: &Tensor, t: f64, labels: &[usize]) -> Result<Tensor> {
        let b = z.shape().first().copied().unwrap_or(0);
        self.model.predict(self.store, z, &vec![t; b], labels)
    }

    fn null_label(&self) -> usize {
        self.model.class.null_label()
    }
}

/// Noise `N(0, I)` shaped like `[n, T, d]`, then integrated to latents.
pub fn sample_latents(field: &dyn VelocityField, labels: &[usize], tokens: usize, latent_dim: usize, cfg: &FlowConfig, rng: &mut RngStream) -> Result<Tensor> {
    let n = labels.len();
    let z0 = Tensor::new([n, tokens, latent_dim], rng.normal_vec(n * tokens * latent_dim))?;
    euler_sample(field, &z0, labels, cfg)
}

/// Per-dimension standardisation of latents, fitted on the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    /// Statistics over all samples and tokens of `z: [n, T, d]`.
    pub fn fit(z: &Tensor) -> Result<Self> {
        if z.rank() != 3 || z.is_empty() {
            return contract(format!("expected non-empty [n, T, d] latents, got {:?}", z.shape()));
        }
        let d = z.shape()[2];
        let rows = z.len() / d;
        let mut mean = vec![0.0; d];
        for row in z.data().chunks_exact(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; d];
        for row in z.data().chunks_exact(d) {
            for k in 0..d {
                var[k] += (row[k] - mean[k]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / rows as f64).sqrt().max(1e-8)).collect();
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, z: &Tensor) -> Tensor {
        self.map(z, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&self, z: &Tensor) -> Tensor {
        self.map(z, |v, m, s| v * s + m)
    }

    fn map(&self, z: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let d = self.mean.len();
        let data = z.data().iter().enumerate().map(|(i, &v)| f(v, self.mean[i % d], self.std[i % d])).collect();
        Tensor::new(z.shape().to_vec(), data).expect("finite latents")
    }
}

/// One flow-matching minibatch: inputs `z_t`, times, (possibly dropped)
/// labels and regression targets `z1 − z0`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub zt: Tensor,
    pub t: Vec<f64>,
    pub labels: Vec<usize>,
    pub target: Tensor,
}

/// Draws `z0 ~ N(0, I)` and `t ~ U[0, 1]` per sample, shifts `t`, and
/// replaces each label by `null_label` with probability `label_dropout`.
pub fn draw_flow_batch(z1: &Tensor, labels: &[usize], null_label: usize, cfg: &FlowConfig, rng: &mut RngStream) -> Result<FlowBatch> {
    if z1.rank() != 3 || z1.shape()[0] == 0 {
        return contract(format!("expected a non-empty [b, T, d] batch, got {:?}", z1.shape()));
    }
    let b = z1.shape()[0];
    if labels.len() != b {
        return contract(format!("{b} latents with {} labels", labels.len()));
    }
    let per = z1.len() / b;
    let z0 = rng.normal_vec(z1.len());
    let mut t = Vec::with_capacity(b);
    let mut dropped = Vec::with_capacity(b);
    for &l in labels {
        t.push(time_shift(rng.uniform(), cfg.kappa)?);
        dropped.push(if rng.bernoulli(cfg.label_dropout) { null_label } else { l });
    }
    let mut zt = Vec::with_capacity(z1.len());
    let mut target = Vec::with_capacity(z1.len());
    for (i, (x1, x0)) in z1.data().iter().zip(&z0).enumerate() {
        let ti = t[i / per];
        zt.push((1.0 - ti) * x0 + ti * x1);
        target.push(x1 - x0);
    }
    Ok(FlowBatch {
        zt: Tensor::new(z1.shape().to_vec(), zt)?,
        t,
        labels: dropped,
        target: Tensor::new(z1.shape().to_vec(), target)?,
    })
}

/// Mean squared error between predicted and target velocities.
pub fn fm_loss_graph(model: &VelocityModel, store: &ParamStore, g: &mut Graph, batch: &FlowBatch) -> Result<Var> {
    let zt = g.constant(batch.zt.clone());
    let v = model.forward_with(store, g, zt, &batch.t, &batch.labels)?;
    let target = g.constant(batch.target.clone());
    Ok(g.mse(v, target)?)
}

/// Shadow copy of the parameters, `shadow ← decay · shadow + (1 − decay) · live`.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub shadow: ParamStore,
    pub decay: f64,
}

impl EmaState {
    pub fn new(live: &ParamStore, decay: f64) -> Self {
        Self {
            shadow: live.clone(),
            decay,
        }
    }

    pub fn update(&mut self, live: &ParamStore) -> Result<()> {
        self.shadow.check_same_layout(live)?;
        let d = self.decay;
        for id in live.ids().collect::<Vec<_>>() {
            let src = live.get(id).data();
            for (s, l) in self.shadow.get_mut(id).data_mut().iter_mut().zip(src) {
                *s = d * *s + (1.0 - d) * l;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub log_every: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            log_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowLogRow {
    pub step: usize,
    pub loss: f64,
    pub ema_loss: f64,
}

pub const FLOW_LOG_COLUMNS: [&str; 3] = ["step", "loss", "ema_loss"];

impl FlowLogRow {
    pub fn row(&self) -> Vec<String> {
        vec![self.step.to_string(), format!("{:.9e}", self.loss), format!("{:.9e}", self.ema_loss)]
    }
}

pub struct FlowTrainOutcome {
    pub ema: ParamStore,
    pub log: Vec<FlowLogRow>,
}

fn gather_batch(z: &Tensor, labels: &[usize], idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let per = z.len() / z.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&z.data()[i * per..(i + 1) * per]);
    }
    let mut shape = z.shape().to_vec();
    shape[0] = idx.len();
    Ok((Tensor::new(shape, data)?, idx.iter().map(|&i| labels[i]).collect()))
}

/// Constant-rate AdamW on the flow-matching loss with an EMA update after
/// every step. `latents` are already standardised `[n, T, d]`. The logged
/// `ema_loss` is measured on a fixed draw from `heldout`.
pub fn train_flow(
    model: &mut VelocityModel,
    latents: &Tensor,
    labels: &[usize],
    heldout: (&Tensor, &[usize]),
    fc: &FlowTrainConfig,
    cfg: &FlowConfig,
    rng: &RngStream,
) -> Result<FlowTrainOutcome> {
    cfg.validate()?;
    if latents.rank() != 3 || latents.shape()[0] == 0 || latents.shape()[0] != labels.len() {
        return contract(format!("latents {:?} with {} labels", latents.shape(), labels.len()));
    }
    if fc.batch_size == 0 || fc.log_every == 0 {
        return config("batch_size and log_every must be positive");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.cfg.classes) {
        return contract(format!("label {bad} outside 0..{}", model.cfg.classes));
    }
    let null = model.class.null_label();
    let mut opt = AdamW::new(
        AdamWConfig {
            beta1: fc.beta1,
            beta2: fc.beta2,
            eps: 1e-8,
            weight_decay: fc.weight_decay,
        },
        &model.store,
    );
    let mut ema = EmaState::new(&model.store, cfg.ema_decay);
    let eval_batch = draw_flow_batch(
        heldout.0,
        heldout.1,
        null,
        &FlowConfig {
            label_dropout: 0.0,
            ..cfg.clone()
        },
        &mut rng.derive("heldout"),
    )?;
    let mut order_rng = rng.derive("order");
    let mut noise_rng = rng.derive("noise");
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut log = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0;
    for step in 1..=fc.steps {
        let mut idx = Vec::with_capacity(fc.batch_size);
        while idx.len() < fc.batch_size {
            if cursor == n {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let (z1, lab) = gather_batch(latents, labels, &idx)?;
        let batch = draw_flow_batch(&z1, &lab, null, cfg, &mut noise_rng)?;
        let mut g = Graph::new();
        let train_err = |e: Error| match e {
            Error::Tensor(NdError::NonFinite(op)) => Error::Training {
                step,
                message: format!("non-finite value in {op}"),
            },
            other => other,
        };
        let loss = fm_loss_graph(model, &model.store, &mut g, &batch).map_err(train_err)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                message: "loss diverged".into(),
            });
        }
        g.backward(loss)?;
        let grads = g.param_grads(&model.store);
        opt.step(&mut model.store, &grads, fc.lr)?;
        ema.update(&model.store)?;
        window += value;
        window_len += 1;
        if step % fc.log_every == 0 || step == fc.steps {
            let mut g = Graph::new();
            let el = fm_loss_graph(model, &ema.shadow, &mut g, &eval_batch)?;
            log.push(FlowLogRow {
                step,
                loss: window / window_len as f64,
                ema_loss: g.value(el).item()?,
            });
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(FlowTrainOutcome { ema: ema.shadow, log })
}
