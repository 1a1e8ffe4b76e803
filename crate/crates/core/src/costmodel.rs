//! Analytical FLOPs of transformer stacks and a wall-clock throughput probe
//! of the local velocity network.
//!
//! One multiply-add counts as one FLOP. A layer with sequence length `S`,
//! width `D` and a SwiGLU hidden width of `8D/3` costs `12·B·S·D²` in its
//! projections and `2·B·S²·D` in attention. All counts are exact integers;
//! floats appear only when rendering tables.

use std::time::{Duration, Instant};

use ndcore::{Graph, RngStream, Tensor};
use num_rational::Ratio;

use crate::error::{config, Error, Result};
use crate::flowmatch::{DitConfig, VelocityModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub seq_len: u64,
    pub hidden_dim: u64,
    pub batch: u64,
}

impl LayerSpec {
    pub fn new(seq_len: u64, hidden_dim: u64) -> Self {
        Self {
            seq_len,
            hidden_dim,
            batch: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostBreakdown {
    pub linear_flops: u64,
    pub attention_flops: u64,
    pub total_flops: u64,
}

impl CostBreakdown {
    fn checked_add(self, other: Self) -> Result<Self> {
        let add = |a: u64, b: u64| a.checked_add(b).ok_or_else(overflow);
        Ok(Self {
            linear_flops: add(self.linear_flops, other.linear_flops)?,
            attention_flops: add(self.attention_flops, other.attention_flops)?,
            total_flops: add(self.total_flops, other.total_flops)?,
        })
    }

    fn checked_scale(self, k: u64) -> Result<Self> {
        let mul = |a: u64| a.checked_mul(k).ok_or_else(overflow);
        Ok(Self {
            linear_flops: mul(self.linear_flops)?,
            attention_flops: mul(self.attention_flops)?,
            total_flops: mul(self.total_flops)?,
        })
    }
}

fn overflow() -> Error {
    Error::Numeric("FLOP count overflows 64-bit integers".into())
}

fn product(factors: &[u64]) -> Result<u64> {
    factors.iter().try_fold(1u64, |acc, &f| acc.checked_mul(f)).ok_or_else(overflow)
}

/// `12·B·S·D²` linear plus `2·B·S²·D` attention FLOPs for one layer.
pub fn layer_flops(spec: &LayerSpec) -> Result<CostBreakdown> {
    let LayerSpec { seq_len: s, hidden_dim: d, batch: b } = *spec;
    let linear_flops = product(&[12, b, s, d, d])?;
    let attention_flops = product(&[2, b, s, s, d])?;
    Ok(CostBreakdown {
        linear_flops,
        attention_flops,
        total_flops: linear_flops.checked_add(attention_flops).ok_or_else(overflow)?,
    })
}

/// A named stack of layer groups, e.g. 28 layers at one width followed by 2
/// wider head layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<(LayerSpec, u64)>,
}

impl ModelSpec {
    pub fn uniform(name: impl Into<String>, seq_len: u64, hidden_dim: u64, depth: u64) -> Self {
        Self {
            name: name.into(),
            layers: vec![(LayerSpec::new(seq_len, hidden_dim), depth)],
        }
    }

    /// Appends `depth` layers of width `hidden_dim` at the stack's sequence
    /// length.
    pub fn with_group(mut self, hidden_dim: u64, depth: u64) -> Self {
        let s = self.layers.first().map_or(0, |(l, _)| l.seq_len);
        self.layers.push((LayerSpec::new(s, hidden_dim), depth));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return config(format!("model '{}' has no layers", self.name));
        }
        Ok(())
    }
}

/// Per-group costs, each already multiplied by its layer count.
pub fn group_flops(spec: &ModelSpec) -> Result<Vec<CostBreakdown>> {
    spec.validate()?;
    spec.layers.iter().map(|(l, n)| layer_flops(l)?.checked_scale(*n)).collect()
}

pub fn model_flops(spec: &ModelSpec) -> Result<CostBreakdown> {
    group_flops(spec)?.into_iter().try_fold(CostBreakdown::default(), |acc, g| acc.checked_add(g))
}

/// Forward FLOPs of an encoder stack; same formula as any other stack.
pub fn encoding_flops(spec: &ModelSpec) -> Result<u64> {
    Ok(model_flops(spec)?.total_flops)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingCost {
    pub encoding_flops: u64,
    pub dit_forward: u64,
    pub dit_backward: u64,
    pub total: u64,
}

impl TrainingCost {
    /// `baseline.total / self.total`.
    pub fn reduction_vs(&self, baseline: &TrainingCost) -> Result<Ratio<u64>> {
        if self.total == 0 {
            return Err(Error::Numeric("reduction against a zero-cost step".into()));
        }
        Ok(Ratio::new(baseline.total, self.total))
    }
}

/// Encoders run forward only; the DiT step costs forward plus a backward of
/// twice the forward.
pub fn training_flops(dit: &ModelSpec, encoders: &[ModelSpec]) -> Result<TrainingCost> {
    let dit_forward = model_flops(dit)?.total_flops;
    let dit_backward = dit_forward.checked_mul(2).ok_or_else(overflow)?;
    let encoding = encoders.iter().try_fold(0u64, |acc, e| acc.checked_add(encoding_flops(e)?).ok_or_else(overflow))?;
    let total = [dit_forward, dit_backward].iter().try_fold(encoding, |a, &b| a.checked_add(b)).ok_or_else(overflow)?;
    Ok(TrainingCost {
        encoding_flops: encoding,
        dit_forward,
        dit_backward,
        total,
    })
}

pub const RAE_TOKENS: u64 = 256;
pub const FLAT_TOKENS: u64 = 32;

pub fn dit_l(seq_len: u64) -> ModelSpec {
    ModelSpec::uniform("DiT-L", seq_len, 1024, 24)
}

pub fn dit_xl(seq_len: u64) -> ModelSpec {
    ModelSpec::uniform("DiT-XL", seq_len, 1152, 28)
}

/// DiT-XL with a 2-layer, 2048-wide decoupled head.
pub fn dit_dh_xl(seq_len: u64) -> ModelSpec {
    let mut m = dit_xl(seq_len).with_group(2048, 2);
    m.name = "DiT-DH-XL".into();
    m
}

/// ViT-B backbone over 256 patches, a class token and 4 registers.
pub fn dinov2_vit_b() -> ModelSpec {
    ModelSpec::uniform("DINOv2 ViT-B", 261, 768, 12)
}

/// ViT-B compression encoder over 256 patches and 32 register tokens.
pub fn flat_encoder_vit_b() -> ModelSpec {
    ModelSpec::uniform("FlatDINO encoder ViT-B", 288, 768, 12)
}

pub fn reference_dits() -> Vec<fn(u64) -> ModelSpec> {
    vec![dit_l, dit_xl, dit_dh_xl]
}

type Q = Ratio<i128>;

const GIGA: i128 = 1_000_000_000;

fn gflops(flops: u64) -> Q {
    Q::new(flops as i128, GIGA)
}

/// Rounds to `decimals` places, ties to even.
pub fn round_half_even(x: Q, decimals: u32) -> Q {
    let scale = 10i128.pow(decimals);
    let scaled = x * scale;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let half = Q::new(1, 2);
    let mut r = floor.to_integer();
    if frac > half || (frac == half && r % 2 != 0) {
        r += 1;
    }
    Q::new(r, scale)
}

/// Fixed-point rendering of an already rounded rational.
pub fn format_fixed(x: Q, decimals: u32) -> String {
    let scale = 10i128.pow(decimals);
    let v = round_half_even(x, decimals) * scale;
    let n = v.to_integer();
    let (sign, n) = if n < 0 { ("-", -n) } else { ("", n) };
    if decimals == 0 {
        return format!("{sign}{n}");
    }
    let int = n / scale;
    let frac = n % scale;
    format!("{sign}{int}.{frac:0width$}", width = decimals as usize)
}

/// Two decimals, or a single significant figure for values that would
/// otherwise print as `0.00`.
fn format_layer_cell(x: Q) -> String {
    if round_half_even(x, 2) != Q::from_integer(0) || x == Q::from_integer(0) {
        return format_fixed(x, 2);
    }
    let mut decimals = 3;
    while round_half_even(x, decimals) == Q::from_integer(0) {
        decimals += 1;
    }
    format_fixed(x, decimals)
}

/// Plain text table: a header row and string cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(title: &str, columns: &[&str]) -> Self {
        Self {
            title: title.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn cell(&self, row: usize, column: &str) -> Option<&str> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.get(row).map(|r| r[c].as_str())
    }

    /// Aligned text for terminals.
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.len()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = format!("{}\n{}\n", self.title, line(&self.columns));
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

/// Displayed GFLOPs of one model on one latent, carried through the tables
/// the way a reader would recompute them from the printed cells: each layer
/// group total is rounded to 0.1 before groups are summed, backward is twice
/// the printed forward, and so on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisplayedCost {
    pub forward: Q,
    pub backward: Q,
    pub dit_train: Q,
    pub encoding: Q,
    pub total: Q,
}

fn tenth(x: Q) -> Q {
    round_half_even(x, 1)
}

pub fn displayed_cost(dit: &ModelSpec, encoders: &[ModelSpec]) -> Result<DisplayedCost> {
    let forward = group_flops(dit)?.iter().map(|g| tenth(gflops(g.total_flops))).sum::<Q>();
    let backward = forward * 2;
    let dit_train = forward + backward;
    let encoding = encoders.iter().map(|e| Ok(tenth(gflops(encoding_flops(e)?)))).sum::<Result<Q>>()?;
    Ok(DisplayedCost {
        forward,
        backward,
        dit_train,
        encoding,
        total: encoding + dit_train,
    })
}

fn ratio_cell(a: Q, b: Q, decimals: u32) -> String {
    format!("{}x", format_fixed(a / b, decimals))
}

fn join_groups(spec: &ModelSpec, f: impl Fn(&CostBreakdown) -> String) -> Result<String> {
    let per_layer: Vec<String> = spec.layers.iter().map(|(l, _)| layer_flops(l).map(|c| f(&c))).collect::<Result<_>>()?;
    Ok(per_layer.join("/"))
}

/// Per-layer linear and attention GFLOPs and per-model forward totals for
/// each reference DiT on 256-token and 32-token latents.
pub fn forward_table() -> Result<Table> {
    let mut t = Table::new(
        "Forward FLOPs per sample",
        &["model", "latent", "S", "D", "linear_gflops", "attention_gflops", "total_gflops", "reduction"],
    );
    for make in reference_dits() {
        let rae = make(RAE_TOKENS);
        let flat = make(FLAT_TOKENS);
        let (dr, df) = (displayed_cost(&rae, &[])?, displayed_cost(&flat, &[])?);
        for (latent, spec, d) in [("RAE", &rae, dr), ("FlatDINO", &flat, df)] {
            let dims = spec.layers.iter().map(|(l, _)| l.hidden_dim.to_string()).collect::<Vec<_>>().join("/");
            t.rows.push(vec![
                spec.name.clone(),
                latent.into(),
                spec.layers[0].0.seq_len.to_string(),
                dims,
                join_groups(spec, |c| format_layer_cell(gflops(c.linear_flops)))?,
                join_groups(spec, |c| format_layer_cell(gflops(c.attention_flops)))?,
                format_fixed(d.forward, 1),
                if latent == "RAE" { String::new() } else { ratio_cell(dr.forward, df.forward, 2) },
            ]);
        }
    }
    Ok(t)
}

pub fn backward_table() -> Result<Table> {
    let mut t = Table::new(
        "DiT forward and backward FLOPs per training step",
        &["model", "latent", "forward_gflops", "backward_gflops", "total_gflops"],
    );
    for make in reference_dits() {
        for (latent, s) in [("RAE", RAE_TOKENS), ("FlatDINO", FLAT_TOKENS)] {
            let spec = make(s);
            let d = displayed_cost(&spec, &[])?;
            t.rows.push(vec![
                spec.name.clone(),
                latent.into(),
                format_fixed(d.forward, 1),
                format_fixed(d.backward, 1),
                format_fixed(d.dit_train, 1),
            ]);
        }
    }
    Ok(t)
}

pub fn training_table() -> Result<Table> {
    let mut t = Table::new(
        "FLOPs per training step including encoding",
        &["model", "latent", "encoding_gflops", "dit_train_gflops", "total_gflops", "reduction"],
    );
    for make in reference_dits() {
        let rae = displayed_cost(&make(RAE_TOKENS), &[dinov2_vit_b()])?;
        let flat = displayed_cost(&make(FLAT_TOKENS), &[dinov2_vit_b(), flat_encoder_vit_b()])?;
        let name = make(RAE_TOKENS).name;
        for (latent, d) in [("RAE", rae), ("FlatDINO", flat)] {
            t.rows.push(vec![
                name.clone(),
                latent.into(),
                format_fixed(d.encoding, 1),
                format_fixed(d.dit_train, 1),
                format_fixed(d.total, 1),
                if latent == "RAE" { String::new() } else { ratio_cell(rae.total, flat.total, 1) },
            ]);
        }
    }
    Ok(t)
}

pub fn encoder_table() -> Result<Table> {
    let mut t = Table::new("Encoder forward FLOPs", &["encoder", "S", "D", "layers", "flops", "gflops"]);
    for e in [dinov2_vit_b(), flat_encoder_vit_b()] {
        let f = encoding_flops(&e)?;
        let (l, n) = e.layers[0];
        t.rows.push(vec![
            e.name.clone(),
            l.seq_len.to_string(),
            l.hidden_dim.to_string(),
            n.to_string(),
            f.to_string(),
            format_fixed(gflops(f), 1),
        ]);
    }
    Ok(t)
}

/// Exact integer counts behind the display tables.
pub fn exact_table() -> Result<Table> {
    let mut t = Table::new("Exact FLOPs per sample", &["model", "S", "linear_flops", "attention_flops", "forward_flops", "train_step_flops"]);
    for make in reference_dits() {
        for s in [RAE_TOKENS, FLAT_TOKENS] {
            let spec = make(s);
            let c = model_flops(&spec)?;
            let tr = training_flops(&spec, &[])?;
            t.rows.push(vec![
                spec.name.clone(),
                s.to_string(),
                c.linear_flops.to_string(),
                c.attention_flops.to_string(),
                c.total_flops.to_string(),
                tr.total.to_string(),
            ]);
        }
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputCell {
    pub seq_len: usize,
    pub batch: usize,
    /// Median over trials of samples pushed through the forward pass per
    /// second.
    pub samples_per_sec: f64,
    pub trials: Vec<f64>,
}

pub const THROUGHPUT_COLUMNS: [&str; 4] = ["seq_len", "batch", "samples_per_sec", "trials"];

impl ThroughputCell {
    pub fn row(&self) -> Vec<String> {
        vec![
            self.seq_len.to_string(),
            self.batch.to_string(),
            format!("{:.3}", self.samples_per_sec),
            self.trials.len().to_string(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub seq_lens: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    /// Wall-clock budget of each trial.
    pub duration: Duration,
    pub trials: usize,
    pub warmup: usize,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Forward passes of a velocity network with `cfg`'s width and depth at each
/// `(S, batch)` pair. Warmup passes are not timed.
pub fn throughput_bench(cfg: &DitConfig, bench: &BenchConfig, seed: u64) -> Result<Vec<ThroughputCell>> {
    if bench.duration.is_zero() {
        return config("benchmark duration must be positive");
    }
    if bench.trials == 0 || bench.seq_lens.is_empty() || bench.batch_sizes.is_empty() {
        return config("benchmark needs at least one trial, sequence length and batch size");
    }
    if bench.seq_lens.contains(&0) || bench.batch_sizes.contains(&0) {
        return config("sequence lengths and batch sizes must be positive");
    }
    let mut cells = Vec::new();
    for &s in &bench.seq_lens {
        let model = VelocityModel::new(&DitConfig { tokens: s, ..cfg.clone() }, &mut RngStream::new(seed))?;
        for &b in &bench.batch_sizes {
            let mut rng = RngStream::new(seed).fork((s * 1_000_003 + b) as u64);
            let z = Tensor::new([b, s, cfg.latent_dim], rng.normal_vec(b * s * cfg.latent_dim))?;
            let ts: Vec<f64> = (0..b).map(|i| (i as f64 + 0.5) / b as f64).collect();
            let labels: Vec<usize> = (0..b).map(|i| i % cfg.classes).collect();
            let pass = || -> Result<()> {
                let mut g = Graph::new();
                let zv = g.constant(z.clone());
                model.forward_with(&model.store, &mut g, zv, &ts, &labels)?;
                Ok(())
            };
            for _ in 0..bench.warmup {
                pass()?;
            }
            let mut trials = Vec::with_capacity(bench.trials);
            for _ in 0..bench.trials {
                let start = Instant::now();
                let mut passes = 0usize;
                while passes == 0 || start.elapsed() < bench.duration {
                    pass()?;
                    passes += 1;
                }
                let secs = start.elapsed().as_secs_f64();
                trials.push((passes * b) as f64 / secs);
            }
            let samples_per_sec = median(&mut trials.clone());
            cells.push(ThroughputCell {
                seq_len: s,
                batch: b,
                samples_per_sec,
                trials,
            });
        }
    }
    Ok(cells)
}

/// Throughput at `short` over throughput at `long` for one batch size.
pub fn throughput_ratio(cells: &[ThroughputCell], short: usize, long: usize, batch: usize) -> Option<f64> {
    let find = |s| cells.iter().find(|c| c.seq_len == s && c.batch == batch).map(|c| c.samples_per_sec);
    Some(find(short)? / find(long)?)
}

/// Median of per-trial ratios, pairing trials by index.
pub fn median_trial_ratio(short: &ThroughputCell, long: &ThroughputCell) -> f64 {
    let mut r: Vec<f64> = short.trials.iter().zip(&long.trials).map(|(a, b)| a / b).collect();
    median(&mut r)
}
