//! Register-token β-VAE that flattens a patch-feature grid into `T` latent
//! tokens of width `d` and decodes it back.
//!
//! The encoder prepends `T` registers to the (positionally embedded) patch
//! sequence and keeps only the register outputs. The decoder runs `P`
//! learnable queries together with the embedded latents through
//! self-attention and reads the reconstruction off the query positions.

use ndcore::{AdamW, AdamWConfig, Graph, NdError, ParamId, ParamStore, RngStream, Tensor, Var, WsdSchedule};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{config, contract, Error, Result};
use crate::synthdata::FeatureGrid;
use crate::transformer::{normal_param, Block, LayerNorm, Linear};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub tokens: usize,
    pub latent_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub feature_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub beta_ref: f64,
    pub dim_ref: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            latent_dim: 8,
            grid_h: 8,
            grid_w: 8,
            feature_dim: 16,
            width: 32,
            heads: 2,
            encoder_depth: 2,
            decoder_depth: 2,
            beta_ref: 1e-6,
            dim_ref: 512,
        }
    }
}

impl VaeConfig {
    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.tokens, self.latent_dim, self.grid_h, self.grid_w, self.feature_dim, self.width, self.dim_ref];
        if dims.contains(&0) {
            return config(format!("VAE dimensions must be positive: {self:?}"));
        }
        if self.tokens > self.patches() {
            return config(format!("{} tokens exceed {} patches", self.tokens, self.patches()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return config(format!("{} heads do not divide width {}", self.heads, self.width));
        }
        if !(self.beta_ref > 0.0 && self.beta_ref.is_finite()) {
            return config(format!("beta_ref must be positive, got {}", self.beta_ref));
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        beta_for(self.tokens, self.latent_dim, self.beta_ref, self.dim_ref).expect("validated config")
    }

    /// `(P·D) / (T·d)`.
    pub fn compression_ratio(&self) -> f64 {
        (self.patches() * self.feature_dim) as f64 / (self.tokens * self.latent_dim) as f64
    }
}

/// KL weight normalised by latent size, `beta_ref · D_ref / (T·d)`, so the
/// per-dimension pressure is the same for every latent shape.
pub fn beta_for(tokens: usize, latent_dim: usize, beta_ref: f64, dim_ref: usize) -> Result<f64> {
    if tokens == 0 || latent_dim == 0 || dim_ref == 0 || !(beta_ref > 0.0) {
        return contract(format!(
            "beta needs positive sizes, got T={tokens} d={latent_dim} beta_ref={beta_ref} D_ref={dim_ref}"
        ));
    }
    Ok(beta_ref * (dim_ref as f64 / (tokens * latent_dim) as f64))
}

/// Diagonal Gaussian posterior over a `[T, d]` latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl LatentPosterior {
    pub fn new(mu: Tensor, logvar: Tensor) -> Result<Self> {
        if mu.shape() != logvar.shape() {
            return contract(format!("mu {:?} vs logvar {:?}", mu.shape(), logvar.shape()));
        }
        let mut logvar = logvar;
        logvar.data_mut().iter_mut().for_each(|v| *v = v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok(Self { mu, logvar })
    }
}

/// `Σ ½(σ² + μ² − 1 − log σ²)` over every latent dimension.
pub fn kl_divergence(post: &LatentPosterior) -> f64 {
    post.mu
        .data()
        .iter()
        .zip(post.logvar.data())
        .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

/// `z = μ + exp(logvar/2) ⊙ ε` with `ε ~ N(0, I)`.
pub fn reparameterize(post: &LatentPosterior, rng: &mut RngStream) -> Tensor {
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.logvar.data())
        .map(|(m, lv)| m + (0.5 * lv).exp() * rng.normal())
        .collect();
    Tensor::new(post.mu.shape().to_vec(), data).expect("finite sample")
}

/// Per-feature standardisation fitted on training grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(grids: &[FeatureGrid]) -> Result<Self> {
        let Some(first) = grids.first() else {
            return contract("cannot fit feature statistics on an empty set");
        };
        let d = first.dim;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0.0;
        for g in grids {
            for row in g.features.chunks_exact(d) {
                for k in 0..d {
                    let v = row[k] as f64;
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1.0;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, grid: &FeatureGrid) -> Vec<f64> {
        let d = self.mean.len();
        grid.features
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 - self.mean[i % d]) / self.std[i % d])
            .collect()
    }

    pub fn invert(&self, data: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        data.iter().enumerate().map(|(i, v)| v * self.std[i % d] + self.mean[i % d]).collect()
    }
}

/// Loss terms, per sample. `recon` is the mean over `P·D` entries, `kl` the
/// sum over `T·d` dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLossReport {
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

#[derive(Clone, Debug)]
pub struct FlatVae {
    pub cfg: VaeConfig,
    pub store: ParamStore,
    pub norm: Normalizer,
    enc_in: Linear,
    patch_pos: ParamId,
    registers: ParamId,
    enc_blocks: Vec<Block>,
    enc_norm: LayerNorm,
    mu_head: Linear,
    logvar_head: Linear,
    pub(crate) dec_in: Linear,
    latent_pos: ParamId,
    queries: ParamId,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    out: Linear,
}

/// Evaluation batches are processed this many grids at a time.
pub(crate) const EVAL_CHUNK: usize = 64;

impl FlatVae {
    pub fn new(cfg: &VaeConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let (p, w, t) = (cfg.patches(), cfg.width, cfg.tokens);
        let mut store = ParamStore::new();
        let s = &mut store;
        let enc_in = Linear::new(s, "enc.in", cfg.feature_dim, w, true, rng);
        let patch_pos = normal_param(s, "enc.pos", &[p, w], 0.02, rng);
        let registers = normal_param(s, "enc.registers", &[t, w], 0.02, rng);
        let enc_blocks = (0..cfg.encoder_depth)
            .map(|i| Block::new(s, &format!("enc.block{i}"), w, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = LayerNorm::new(s, "enc.norm", w);
        let mu_head = Linear::new(s, "enc.mu", w, cfg.latent_dim, true, rng);
        let logvar_head = Linear::new(s, "enc.logvar", w, cfg.latent_dim, true, rng);
        let dec_in = Linear::new(s, "dec.in", cfg.latent_dim, w, true, rng);
        let latent_pos = normal_param(s, "dec.pos", &[t, w], 0.02, rng);
        let queries = normal_param(s, "dec.queries", &[p, w], 0.02, rng);
        let dec_blocks = (0..cfg.decoder_depth)
            .map(|i| Block::new(s, &format!("dec.block{i}"), w, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(s, "dec.norm", w);
        let out = Linear::new(s, "dec.out", w, cfg.feature_dim, true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            norm: Normalizer::identity(cfg.feature_dim),
            store,
            enc_in,
            patch_pos,
            registers,
            enc_blocks,
            enc_norm,
            mu_head,
            logvar_head,
            dec_in,
            latent_pos,
            queries,
            dec_blocks,
            dec_norm,
            out,
        })
    }

    pub fn beta(&self) -> f64 {
        self.cfg.beta()
    }

    fn check_grid(&self, grid: &FeatureGrid) -> Result<()> {
        let c = &self.cfg;
        if (grid.grid_h, grid.grid_w, grid.dim) != (c.grid_h, c.grid_w, c.feature_dim) {
            return config(format!(
                "grid {}x{}x{} does not match model {}x{}x{}",
                grid.grid_h, grid.grid_w, grid.dim, c.grid_h, c.grid_w, c.feature_dim
            ));
        }
        Ok(())
    }

    /// Standardised `[n, P, D]` input tensor.
    pub fn batch_tensor(&self, grids: &[&FeatureGrid]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(grids.len() * self.cfg.patches() * self.cfg.feature_dim);
        for g in grids {
            self.check_grid(g)?;
            data.extend(self.norm.apply(g));
        }
        Ok(Tensor::new([grids.len(), self.cfg.patches(), self.cfg.feature_dim], data)?)
    }

    fn broadcast(store: &ParamStore, g: &mut Graph, id: ParamId, batch: usize) -> Result<Var> {
        let p = g.param(store, id);
        Ok(g.repeat(p, 0, batch)?)
    }

    /// `x: [b, P, D]` (standardised) to `(mu, logvar)`, each `[b, T, d]`.
    pub fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        self.encode_with(&self.store, g, x)
    }

    fn encode_with(&self, s: &ParamStore, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let b = g.shape(x)[0];
        let h = self.enc_in.forward(g, s, x)?;
        let pos = Self::broadcast(s, g, self.patch_pos, b)?;
        let h = g.add(h, pos)?;
        let regs = Self::broadcast(s, g, self.registers, b)?;
        let mut h = g.concat(regs, h, 1)?;
        for block in &self.enc_blocks {
            h = block.forward(g, s, h)?;
        }
        let h = self.enc_norm.forward(g, s, h)?;
        let h = g.slice(h, 1, 0, self.cfg.tokens)?;
        let mu = self.mu_head.forward(g, s, h)?;
        let logvar = self.logvar_head.forward(g, s, h)?;
        let logvar = g.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, logvar))
    }

    /// `z: [b, T, d]` to the standardised reconstruction `[b, P, D]`.
    pub fn decode_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.decode_with(&self.store, g, z)
    }

    fn decode_with(&self, s: &ParamStore, g: &mut Graph, z: Var) -> Result<Var> {
        let b = g.shape(z)[0];
        let h = self.dec_in.forward(g, s, z)?;
        let pos = Self::broadcast(s, g, self.latent_pos, b)?;
        let h = g.add(h, pos)?;
        let q = Self::broadcast(s, g, self.queries, b)?;
        let mut h = g.concat(q, h, 1)?;
        for block in &self.dec_blocks {
            h = block.forward(g, s, h)?;
        }
        let h = self.dec_norm.forward(g, s, h)?;
        let h = g.slice(h, 1, 0, self.cfg.patches())?;
        self.out.forward(g, s, h)
    }

    /// Batch-mean loss with explicit reparameterisation noise `eps: [b, T, d]`.
    pub fn loss_graph(&self, g: &mut Graph, x: Var, eps: &Tensor, beta: f64) -> Result<LossVars> {
        self.loss_with(&self.store, g, x, eps, beta)
    }

    /// [`Self::loss_graph`] evaluated with parameters from another store of
    /// the same layout.
    pub fn loss_with(&self, store: &ParamStore, g: &mut Graph, x: Var, eps: &Tensor, beta: f64) -> Result<LossVars> {
        let b = g.shape(x)[0] as f64;
        let (mu, logvar) = self.encode_with(store, g, x)?;
        let half = g.scale(logvar, 0.5)?;
        let sigma = g.exp(half)?;
        let e = g.constant(eps.clone());
        let noise = g.mul(sigma, e)?;
        let z = g.add(mu, noise)?;
        let xhat = self.decode_with(store, g, z)?;
        let recon = g.mse(xhat, x)?;
        let var = g.exp(logvar)?;
        let m2 = g.square(mu)?;
        let t = g.add(var, m2)?;
        let t = g.sub(t, logvar)?;
        let t = g.sum(t)?;
        let n = g.constant(Tensor::scalar(-(eps.len() as f64)));
        let t = g.add(t, n)?;
        let kl = g.scale(t, 0.5 / b)?;
        let weighted = g.scale(kl, beta)?;
        let total = g.add(recon, weighted)?;
        Ok(LossVars { total, recon, kl })
    }

    pub fn encode(&self, grid: &FeatureGrid) -> Result<LatentPosterior> {
        let x = self.batch_tensor(&[grid])?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (mu, logvar) = self.encode_graph(&mut g, xv)?;
        let shape = [self.cfg.tokens, self.cfg.latent_dim];
        LatentPosterior::new(g.value(mu).clone().reshape(shape)?, g.value(logvar).clone().reshape(shape)?)
    }

    /// Posterior means of many grids as one `[n, T, d]` tensor.
    pub fn encode_means(&self, grids: &[FeatureGrid]) -> Result<Tensor> {
        let mut data = Vec::new();
        for chunk in grids.chunks(EVAL_CHUNK) {
            let refs: Vec<&FeatureGrid> = chunk.iter().collect();
            let mut g = Graph::new();
            let xv = g.constant(self.batch_tensor(&refs)?);
            let (mu, _) = self.encode_graph(&mut g, xv)?;
            data.extend_from_slice(g.value(mu).data());
        }
        Ok(Tensor::new([grids.len(), self.cfg.tokens, self.cfg.latent_dim], data)?)
    }

    /// Standardised reconstructions of `z: [n, T, d]`, shape `[n, P, D]`.
    pub fn decode_standardized(&self, z: &Tensor) -> Result<Tensor> {
        let (t, d) = (self.cfg.tokens, self.cfg.latent_dim);
        if z.rank() != 3 || z.shape()[1..] != [t, d] {
            return config(format!("latent {:?} does not match [n, {t}, {d}]", z.shape()));
        }
        let n = z.shape()[0];
        let per = t * d;
        let mut data = Vec::new();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let m = EVAL_CHUNK.min(n - start);
            let zc = Tensor::new([m, t, d], z.data()[start * per..(start + m) * per].to_vec())?;
            let mut g = Graph::new();
            let zv = g.constant(zc);
            let y = self.decode_graph(&mut g, zv)?;
            data.extend_from_slice(g.value(y).data());
        }
        Ok(Tensor::new([n, self.cfg.patches(), self.cfg.feature_dim], data)?)
    }

    /// Reconstruction of one `[T, d]` latent in original feature units.
    pub fn decode(&self, z: &Tensor, class_id: u32) -> Result<FeatureGrid> {
        let z = z.clone().reshape([1, self.cfg.tokens, self.cfg.latent_dim]).map_err(|_| {
            Error::Config(format!("latent {:?} does not match [{}, {}]", z.shape(), self.cfg.tokens, self.cfg.latent_dim))
        })?;
        let y = self.decode_standardized(&z)?;
        let raw = self.norm.invert(y.data());
        FeatureGrid::new(
            self.cfg.grid_h,
            self.cfg.grid_w,
            self.cfg.feature_dim,
            raw.into_iter().map(|v| v as f32).collect(),
            class_id,
        )
    }

    /// Single-sample loss with a fresh noise draw.
    pub fn vae_loss(&self, grid: &FeatureGrid, beta: f64, rng: &mut RngStream) -> Result<VaeLossReport> {
        let x = self.batch_tensor(&[grid])?;
        let eps = Tensor::new([1, self.cfg.tokens, self.cfg.latent_dim], rng.normal_vec(self.cfg.tokens * self.cfg.latent_dim))?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let l = self.loss_graph(&mut g, xv, &eps, beta)?;
        let recon = g.value(l.recon).item()?;
        let kl = g.value(l.kl).item()?;
        Ok(VaeLossReport {
            recon,
            kl,
            beta,
            total: g.value(l.total).item()?,
        })
    }

    /// Mean reconstruction MSE (posterior-mean latents) and mean KL over a
    /// set, both in standardised units.
    pub fn evaluate(&self, grids: &[FeatureGrid]) -> Result<(f64, f64)> {
        if grids.is_empty() {
            return contract("evaluation set is empty");
        }
        let (mut recon, mut kl) = (0.0, 0.0);
        for chunk in grids.chunks(EVAL_CHUNK) {
            let refs: Vec<&FeatureGrid> = chunk.iter().collect();
            let x = self.batch_tensor(&refs)?;
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let (mu, logvar) = self.encode_graph(&mut g, xv)?;
            let y = self.decode_graph(&mut g, mu)?;
            let se: f64 = g.value(y).data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            recon += se / (self.cfg.patches() * self.cfg.feature_dim) as f64;
            kl += g
                .value(mu)
                .data()
                .iter()
                .zip(g.value(logvar).data())
                .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
                .sum::<f64>();
        }
        let n = grids.len() as f64;
        Ok((recon / n, kl / n))
    }

    /// Mean per-feature variance of `grids` in standardised units: the MSE
    /// of predicting each feature by its mean.
    pub fn mean_predictor_mse(&self, grids: &[FeatureGrid]) -> Result<f64> {
        let d = self.cfg.feature_dim;
        let rows: Vec<Vec<f64>> = grids.iter().map(|g| self.norm.apply(g)).collect();
        let n = (grids.len() * self.cfg.patches()) as f64;
        let mut total = 0.0;
        for k in 0..d {
            let vals = rows.iter().flat_map(|r| r.iter().skip(k).step_by(d));
            let mean = vals.clone().sum::<f64>() / n;
            total += vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        }
        Ok(total / d as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.add_store("vae.", &self.store);
        let d = self.cfg.feature_dim;
        ck.push("norm.mean", Tensor::new([d], self.norm.mean.clone()).expect("finite"));
        ck.push("norm.std", Tensor::new([d], self.norm.std.clone()).expect("finite"));
        ck
    }

    pub fn from_checkpoint(cfg: &VaeConfig, ck: &Checkpoint) -> Result<Self> {
        let mut vae = Self::new(cfg, &mut RngStream::new(0))?;
        ck.load_store("vae.", &mut vae.store)?;
        let (Some(mean), Some(std)) = (ck.get("norm.mean"), ck.get("norm.std")) else {
            return contract("checkpoint is missing feature statistics");
        };
        if mean.len() != cfg.feature_dim || std.len() != cfg.feature_dim {
            return contract("feature statistics do not match feature_dim");
        }
        vae.norm = Normalizer {
            mean: mean.data().to_vec(),
            std: std.data().to_vec(),
        };
        Ok(vae)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeTrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub schedule: WsdSchedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl VaeTrainConfig {
    /// Desk-scale run: one warmup epoch, a 10% cosine tail, and a peak rate
    /// suited to a few thousand steps.
    pub fn desk(epochs: u32, peak_lr: f64) -> Result<Self> {
        if epochs == 0 {
            return config("epochs must be positive");
        }
        let warmup = 1.min(epochs);
        let decay = ((epochs - warmup) as f64 * 0.1).round() as u32;
        Ok(Self {
            epochs,
            batch_size: 32,
            schedule: WsdSchedule::new(warmup, epochs - warmup - decay, decay, 1e-6, peak_lr, 1e-8)?,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeEpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub train_recon: f64,
    pub train_kl: f64,
    pub val_recon: f64,
    pub val_kl: f64,
    pub total: f64,
}

pub const VAE_LOG_COLUMNS: [&str; 7] = ["epoch", "lr", "train_recon", "train_kl", "val_recon", "val_kl", "total"];

impl VaeEpochLog {
    pub fn row(&self) -> Vec<String> {
        let f = |v: f64| format!("{v:.9e}");
        vec![
            self.epoch.to_string(),
            f(self.lr),
            f(self.train_recon),
            f(self.train_kl),
            f(self.val_recon),
            f(self.val_kl),
            f(self.total),
        ]
    }
}

pub struct VaeTrainOutcome {
    pub log: Vec<VaeEpochLog>,
    pub best_epoch: u32,
    pub best_val_recon: f64,
}

fn training_error(step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(NdError::NonFinite(op)) => Error::Training {
            step,
            message: format!("non-finite value in {op}"),
        },
        Error::Numeric(m) => Error::Training { step, message: m },
        other => other,
    }
}

/// Fits the feature statistics on `train`, then runs AdamW under the WSD
/// schedule. The returned model holds the parameters of the epoch with the
/// lowest validation reconstruction.
pub fn train_vae(
    vae: &mut FlatVae,
    train: &[FeatureGrid],
    val: &[FeatureGrid],
    tc: &VaeTrainConfig,
    rng: &RngStream,
) -> Result<VaeTrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return contract("training and validation sets must be non-empty");
    }
    if tc.batch_size == 0 {
        return config("batch_size must be positive");
    }
    vae.norm = Normalizer::fit(train)?;
    let beta = vae.beta();
    let (t, d) = (vae.cfg.tokens, vae.cfg.latent_dim);
    let mut opt = AdamW::new(
        AdamWConfig {
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: 1e-8,
            weight_decay: tc.weight_decay,
        },
        &vae.store,
    );
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let mut log = Vec::new();
    let mut best = (0u32, f64::INFINITY, vae.store.clone());
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        let mut erng = rng.fork(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        erng.shuffle(&mut order);
        let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
        let mut lr = 0.0;
        for (i, idx) in order.chunks(tc.batch_size).enumerate() {
            lr = tc.schedule.lr(epoch as f64 + i as f64 / steps_per_epoch as f64)?;
            let refs: Vec<&FeatureGrid> = idx.iter().map(|&k| &train[k]).collect();
            let x = vae.batch_tensor(&refs)?;
            let eps = Tensor::new([refs.len(), t, d], erng.normal_vec(refs.len() * t * d))?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let run = |g: &mut Graph| -> Result<LossVars> {
                let l = vae.loss_graph(g, xv, &eps, beta)?;
                g.backward(l.total)?;
                Ok(l)
            };
            let l = run(&mut g).map_err(|e| training_error(step, e))?;
            recon_sum += g.value(l.recon).item()? * refs.len() as f64;
            kl_sum += g.value(l.kl).item()? * refs.len() as f64;
            let grads = g.param_grads(&vae.store);
            opt.step(&mut vae.store, &grads, lr)?;
            step += 1;
        }
        let n = train.len() as f64;
        let (val_recon, val_kl) = vae.evaluate(val).map_err(|e| training_error(step, e))?;
        let row = VaeEpochLog {
            epoch: epoch + 1,
            lr,
            train_recon: recon_sum / n,
            train_kl: kl_sum / n,
            val_recon,
            val_kl,
            total: recon_sum / n + beta * kl_sum / n,
        };
        if !row.total.is_finite() || !val_recon.is_finite() {
            return Err(Error::Training {
                step,
                message: "loss diverged".into(),
            });
        }
        log.push(row);
        if val_recon < best.1 {
            best = (epoch + 1, val_recon, vae.store.clone());
        }
    }
    vae.store = best.2;
    Ok(VaeTrainOutcome {
        log,
        best_epoch: best.0,
        best_val_recon: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndcore::grad_check_params;

    fn tiny_cfg() -> VaeConfig {
        VaeConfig {
            tokens: 2,
            latent_dim: 2,
            grid_h: 2,
            grid_w: 2,
            feature_dim: 3,
            width: 4,
            heads: 2,
            encoder_depth: 1,
            decoder_depth: 1,
            ..Default::default()
        }
    }

    fn random_grid(rng: &mut RngStream, cfg: &VaeConfig) -> FeatureGrid {
        let n = cfg.patches() * cfg.feature_dim;
        let data = rng.normal_vec(n).into_iter().map(|v| v as f32).collect();
        FeatureGrid::new(cfg.grid_h, cfg.grid_w, cfg.feature_dim, data, 0).unwrap()
    }

    #[test]
    fn beta_table() {
        for (td, want) in [(256, 2e-6), (512, 1e-6), (1024, 5e-7), (2048, 2.5e-7), (4096, 1.25e-7)] {
            assert_eq!(beta_for(1, td, 1e-6, 512).unwrap(), want);
        }
        assert_eq!(beta_for(7, 3, 0.25, 21).unwrap(), 0.25);
        assert!(beta_for(0, 4, 1e-6, 512).is_err());
    }

    #[test]
    fn compression_ratios() {
        let paper = VaeConfig {
            tokens: 32,
            latent_dim: 128,
            grid_h: 16,
            grid_w: 16,
            feature_dim: 768,
            ..Default::default()
        };
        assert_eq!(paper.compression_ratio(), 48.0);
        let desk = VaeConfig {
            tokens: 8,
            latent_dim: 8,
            grid_h: 8,
            grid_w: 8,
            feature_dim: 6,
            ..Default::default()
        };
        assert_eq!(desk.compression_ratio(), 6.0);
    }

    #[test]
    fn kl_examples() {
        let zero = LatentPosterior::new(Tensor::zeros([2, 2]), Tensor::zeros([2, 2])).unwrap();
        assert_eq!(kl_divergence(&zero), 0.0);
        let one = LatentPosterior::new(Tensor::scalar(1.0).reshape([1, 1]).unwrap(), Tensor::zeros([1, 1])).unwrap();
        assert_eq!(kl_divergence(&one), 0.5);
    }

    #[test]
    fn logvar_is_clamped() {
        let p = LatentPosterior::new(Tensor::zeros([1, 2]), Tensor::new([1, 2], vec![-100.0, 50.0]).unwrap()).unwrap();
        assert_eq!(p.logvar.data(), &[LOGVAR_MIN, LOGVAR_MAX]);
        let z = reparameterize(
            &LatentPosterior::new(Tensor::full([1, 3], 2.0), Tensor::full([1, 3], -1e3)).unwrap(),
            &mut RngStream::new(1),
        );
        assert!(z.data().iter().all(|v| (v - 2.0).abs() < 1e-5));
    }

    #[test]
    fn encode_shape_and_determinism() {
        let cfg = VaeConfig::default();
        let mut rng = RngStream::new(3);
        let vae = FlatVae::new(&cfg, &mut rng).unwrap();
        let grid = random_grid(&mut rng, &cfg);
        let a = vae.encode(&grid).unwrap();
        assert_eq!(a, vae.encode(&grid).unwrap());
        assert_eq!(a.mu.shape(), &[8, 8]);
        let kl = kl_divergence(&a);
        assert!(kl.is_finite() && kl > 0.0);
        let rec = vae.decode(&a.mu, 0).unwrap();
        assert_eq!((rec.grid_h, rec.grid_w, rec.dim), (8, 8, 16));
        assert_eq!(rec, vae.decode(&a.mu, 0).unwrap());

        let wrong = random_grid(&mut rng, &tiny_cfg());
        assert!(matches!(vae.encode(&wrong), Err(Error::Config(_))));
        assert!(matches!(vae.decode(&Tensor::zeros([3, 8]), 0), Err(Error::Config(_))));
    }

    #[test]
    fn loss_total_combines_terms() {
        let cfg = VaeConfig::default();
        let mut rng = RngStream::new(4);
        let vae = FlatVae::new(&cfg, &mut rng).unwrap();
        let grid = random_grid(&mut rng, &cfg);
        let r = vae.vae_loss(&grid, 0.0, &mut RngStream::new(9)).unwrap();
        assert_eq!(r.total, r.recon);
        let r = vae.vae_loss(&grid, 0.3, &mut RngStream::new(9)).unwrap();
        assert!((r.total - (r.recon + 0.3 * r.kl)).abs() < 1e-9);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = RngStream::new(5);
        let vae = FlatVae::new(&cfg, &mut rng).unwrap();
        let x = Tensor::new([2, 4, 3], rng.normal_vec(24)).unwrap();
        let eps = Tensor::new([2, 2, 2], rng.normal_vec(8)).unwrap();
        let mut store = vae.store.clone();
        let err = grad_check_params(
            |g, s| {
                let xv = g.constant(x.clone());
                let l = vae.loss_with(s, g, xv, &eps, 0.1).map_err(|e| NdError::Numeric(e.to_string()))?;
                Ok(l.total)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
