//! Run configuration: defaults, then a TOML file, then `FLATDINO_*`
//! environment variables, then command-line flags.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use flatdino::costmodel::BenchConfig;
use flatdino::flatvae::{VaeConfig, VaeTrainConfig};
use flatdino::flowmatch::{DitConfig, FlowConfig, FlowTrainConfig};
use flatdino::synthdata::SynthConfig;
use flatdino::{Error, Result};
use ndcore::WsdSchedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "FLATDINO_";

#[derive(Parser, Debug, Clone)]
#[command(name = "flatdino", version, about = "Flat latent compression, flow matching and analysis on synthetic feature grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override any config key, e.g. `--set flow.kappa=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoints: Option<PathBuf>,
    #[arg(long, global = true)]
    pub reports: Option<PathBuf>,
    #[arg(long, global = true)]
    pub kappa: Option<f64>,
    #[arg(long, global = true)]
    pub cfg_weight: Option<f64>,
    #[arg(long, global = true)]
    pub euler_steps: Option<usize>,
    /// VAE training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<u32>,
    /// Flow training steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Number of samples drawn by `sample`.
    #[arg(long, global = true)]
    pub count: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Generate the synthetic train/val feature grids.
    GenData,
    TrainVae,
    TrainFlow,
    /// Draw class-conditional samples from the EMA velocity model.
    Sample,
    /// Per-token ablation heatmaps.
    Ablate,
    /// PCA, spatial similarity, noise robustness and k-NN probes.
    Analyze,
    /// Guidance weight × interval start grid.
    SweepCfg,
    /// VAE training over a token-count × token-width grid.
    SweepLatent,
    /// Transformer FLOPs tables.
    Flops,
    /// Velocity-network forward throughput.
    Bench,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainVae => "train-vae",
            Command::TrainFlow => "train-flow",
            Command::Sample => "sample",
            Command::Ablate => "ablate",
            Command::Analyze => "analyze",
            Command::SweepCfg => "sweep-cfg",
            Command::SweepLatent => "sweep-latent",
            Command::Flops => "flops",
            Command::Bench => "bench",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataParams {
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            train_count: 2000,
            val_count: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainParams {
    pub epochs: u32,
    pub batch_size: usize,
    pub warmup_epochs: u32,
    /// Share of the post-warmup epochs spent in the cosine tail.
    pub decay_fraction: f64,
    pub warmup_lr: f64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for VaeTrainParams {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            warmup_epochs: 1,
            decay_fraction: 0.1,
            warmup_lr: 1e-6,
            peak_lr: 1e-3,
            min_lr: 1e-8,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl VaeTrainParams {
    pub fn to_train_config(&self) -> Result<VaeTrainConfig> {
        if self.epochs == 0 {
            return Err(Error::Config("vae_train.epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return Err(Error::Config("vae_train.decay_fraction must lie in [0, 1]".into()));
        }
        let warmup = self.warmup_epochs.min(self.epochs);
        let decay = ((self.epochs - warmup) as f64 * self.decay_fraction).round() as u32;
        Ok(VaeTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: WsdSchedule::new(warmup, self.epochs - warmup - decay, decay, self.warmup_lr, self.peak_lr, self.min_lr)?,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
        })
    }
}

/// Velocity-network size; token shape and class count come from the VAE
/// and dataset sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitParams {
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for DitParams {
    fn default() -> Self {
        let d = DitConfig::default();
        Self {
            model_dim: d.model_dim,
            depth: d.depth,
            heads: d.heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub log_every: usize,
}

impl Default for FlowTrainParams {
    fn default() -> Self {
        let d = FlowTrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
            weight_decay: d.weight_decay,
            log_every: d.log_every,
        }
    }
}

impl FlowTrainParams {
    pub fn to_train_config(&self) -> FlowTrainConfig {
        FlowTrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            log_every: self.log_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleParams {
    pub count: usize,
}

impl Default for SampleParams {
    fn default() -> Self {
        Self { count: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisParams {
    pub ablation_samples: usize,
    pub pca_threshold: f64,
    pub noise_sigmas: Vec<f64>,
    pub noise_draws: usize,
    pub knn_k: usize,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self {
            ablation_samples: flatdino::analysis::DEFAULT_ABLATION_SAMPLES,
            pca_threshold: 0.95,
            noise_sigmas: vec![0.0, 0.1, 0.25, 0.5, 1.0, 2.0],
            noise_draws: 8,
            knn_k: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepCfgParams {
    pub weights: Vec<f64>,
    pub interval_starts: Vec<f64>,
    pub samples: usize,
}

impl Default for SweepCfgParams {
    fn default() -> Self {
        Self {
            weights: vec![1.5, 2.0, 3.0, 4.5, 6.0],
            interval_starts: vec![0.0, 0.1, 0.225, 0.3, 0.4],
            samples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepLatentParams {
    pub tokens: Vec<usize>,
    pub latent_dims: Vec<usize>,
    /// Explicit `[T, d]` pairs; when non-empty they replace the
    /// `tokens × latent_dims` grid.
    pub shapes: Vec<(usize, usize)>,
}

impl SweepLatentParams {
    pub fn points(&self) -> Vec<(usize, usize)> {
        if !self.shapes.is_empty() {
            return self.shapes.clone();
        }
        self.tokens.iter().flat_map(|&t| self.latent_dims.iter().map(move |&d| (t, d))).collect()
    }
}

impl Default for SweepLatentParams {
    fn default() -> Self {
        Self {
            tokens: vec![4, 8, 16],
            latent_dims: vec![4, 8, 16],
            shapes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchParams {
    pub seq_lens: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub duration_ms: u64,
    pub trials: usize,
    pub warmup: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            seq_lens: vec![8, 16, 32, 64],
            batch_sizes: vec![32],
            duration_ms: 400,
            trials: 5,
            warmup: 2,
        }
    }
}

impl BenchParams {
    pub fn to_bench_config(&self) -> BenchConfig {
        BenchConfig {
            seq_lens: self.seq_lens.clone(),
            batch_sizes: self.batch_sizes.clone(),
            duration: Duration::from_millis(self.duration_ms),
            trials: self.trials,
            warmup: self.warmup,
        }
    }
}

/// Everything a command reads, serialisable so it can be hashed into the
/// report provenance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataParams,
    pub synth: SynthConfig,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainParams,
    pub flow: FlowConfig,
    pub dit: DitParams,
    pub flow_train: FlowTrainParams,
    pub sample: SampleParams,
    pub analysis: AnalysisParams,
    pub sweep_cfg: SweepCfgParams,
    pub sweep_latent: SweepLatentParams,
    pub bench: BenchParams,
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.vae.validate()?;
        self.flow.validate()?;
        self.vae_train.to_train_config()?;
        let (gh, gw) = self.synth.grid();
        if (gh, gw, self.synth.feature_dim) != (self.vae.grid_h, self.vae.grid_w, self.vae.feature_dim) {
            return Err(Error::Config(format!(
                "vae grid {}x{}x{} does not match synth grid {gh}x{gw}x{}",
                self.vae.grid_h, self.vae.grid_w, self.vae.feature_dim, self.synth.feature_dim
            )));
        }
        if self.data.train_count == 0 || self.data.val_count == 0 {
            return Err(Error::Config("data.train_count and data.val_count must be positive".into()));
        }
        if self.dit.model_dim == 0 || self.dit.heads == 0 || self.dit.model_dim % self.dit.heads != 0 {
            return Err(Error::Config(format!("dit.model_dim {} must be a positive multiple of dit.heads {}", self.dit.model_dim, self.dit.heads)));
        }
        for (name, p) in [("dataset", &self.paths.dataset), ("checkpoints", &self.paths.checkpoints), ("reports", &self.paths.reports)] {
            if p.as_os_str().is_empty() {
                return Err(Error::Config(format!("paths.{name} is empty")));
            }
            if p.exists() && !p.is_dir() {
                return Err(Error::Config(format!("paths.{name} = {} is not a directory", p.display())));
            }
        }
        Ok(())
    }

    pub fn dit_config(&self) -> DitConfig {
        DitConfig {
            tokens: self.vae.tokens,
            latent_dim: self.vae.latent_dim,
            model_dim: self.dit.model_dim,
            depth: self.dit.depth,
            heads: self.dit.heads,
            classes: self.synth.classes,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialise")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    /// The invocation as typed, recorded in report headers.
    pub command_line: String,
    pub settings: Settings,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// A literal as written in TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, path: &[&str], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| usage("empty config key"))?;
    let mut t = root;
    for (i, p) in parents.iter().enumerate() {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry.as_table_mut().ok_or_else(|| usage(format!("config key '{}' is not a section", parents[..=i].join("."))))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn int_value(name: &str, v: u64) -> Result<Value> {
    i64::try_from(v).map(Value::Integer).map_err(|_| usage(format!("{name} = {v} exceeds the TOML integer range")))
}

/// Resolves the layered configuration. `env` is passed in rather than read
/// so callers and tests control it.
pub fn parse_config(cli: &Cli, command_line: &str, env: &[(String, String)]) -> Result<RunConfig> {
    let mut layered = Value::try_from(Settings::default())
        .map_err(|e| usage(e.to_string()))?
        .as_table()
        .cloned()
        .expect("settings render as a table");

    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
        let file: Table = toml::from_str(&text).map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
        merge(&mut layered, file);
    }

    let mut env_keys: Vec<&(String, String)> = env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env_keys.sort();
    for (k, v) in env_keys {
        let key = k[ENV_PREFIX.len()..].to_ascii_lowercase();
        let path: Vec<&str> = key.split("__").collect();
        set_path(&mut layered, &path, parse_value(v))?;
    }

    let mut flags = Table::new();
    for item in &cli.set {
        let (k, v) = item.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{item}'")))?;
        let path: Vec<&str> = k.trim().split('.').collect();
        set_path(&mut flags, &path, parse_value(v.trim()))?;
    }
    let path_str = |p: &Path| Value::String(p.to_string_lossy().into_owned());
    if let Some(s) = cli.seed {
        set_path(&mut flags, &["seed"], int_value("seed", s)?)?;
    }
    if let Some(p) = &cli.dataset {
        set_path(&mut flags, &["paths", "dataset"], path_str(p))?;
    }
    if let Some(p) = &cli.checkpoints {
        set_path(&mut flags, &["paths", "checkpoints"], path_str(p))?;
    }
    if let Some(p) = &cli.reports {
        set_path(&mut flags, &["paths", "reports"], path_str(p))?;
    }
    if let Some(k) = cli.kappa {
        set_path(&mut flags, &["flow", "kappa"], Value::Float(k))?;
    }
    if let Some(w) = cli.cfg_weight {
        set_path(&mut flags, &["flow", "cfg_weight"], Value::Float(w))?;
    }
    if let Some(n) = cli.euler_steps {
        set_path(&mut flags, &["flow", "euler_steps"], int_value("euler_steps", n as u64)?)?;
    }
    if let Some(n) = cli.epochs {
        set_path(&mut flags, &["vae_train", "epochs"], Value::Integer(n.into()))?;
    }
    if let Some(n) = cli.steps {
        set_path(&mut flags, &["flow_train", "steps"], int_value("steps", n as u64)?)?;
    }
    if let Some(n) = cli.count {
        set_path(&mut flags, &["sample", "count"], int_value("count", n as u64)?)?;
    }
    merge(&mut layered, flags);

    let settings: Settings = Value::Table(layered).try_into().map_err(|e: toml::de::Error| usage(e.message().to_string()))?;
    settings.validate()?;
    Ok(RunConfig {
        command: cli.command,
        command_line: command_line.to_string(),
        settings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("flatdino").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn defaults_are_valid() {
        let rc = parse_config(&cli(&["flops"]), "flatdino flops", &[]).unwrap();
        assert_eq!(rc.settings.flow.kappa, 3.0);
        assert_eq!(rc.settings.flow.cfg_weight, 4.5);
        assert_eq!(rc.settings.flow.cfg_interval, (0.225, 1.0));
        assert_eq!(rc.settings.flow.ema_decay, 0.9995);
        assert_eq!(rc.command, Command::Flops);
    }

    #[test]
    fn env_and_set_paths() {
        let env = vec![("FLATDINO_FLOW__EULER_STEPS".to_string(), "12".to_string()), ("HOME".to_string(), "/x".to_string())];
        let rc = parse_config(&cli(&["flops", "--set", "vae_train.peak_lr=5e-4"]), "", &env).unwrap();
        assert_eq!(rc.settings.flow.euler_steps, 12);
        assert_eq!(rc.settings.vae_train.peak_lr, 5e-4);
    }

    #[test]
    fn unknown_env_key_is_named() {
        let env = vec![("FLATDINO_FLOW__KAPA".to_string(), "2".to_string())];
        let err = parse_config(&cli(&["flops"]), "", &env).unwrap_err();
        assert!(err.to_string().contains("kapa"), "{err}");
    }

    #[test]
    fn type_mismatch_is_a_usage_error() {
        let err = parse_config(&cli(&["flops", "--set", "flow.euler_steps=many"]), "", &[]).unwrap_err();
        assert_eq!(err.category(), flatdino::Category::Config);
    }

    #[test]
    fn hash_tracks_settings() {
        let a = parse_config(&cli(&["flops"]), "", &[]).unwrap();
        let b = parse_config(&cli(&["flops", "--seed", "1"]), "", &[]).unwrap();
        assert_eq!(a.settings.hash().len(), 64);
        assert_ne!(a.settings.hash(), b.settings.hash());
    }
}
