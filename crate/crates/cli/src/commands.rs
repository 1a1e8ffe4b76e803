//! One function per subcommand. Each reads its inputs from the configured
//! directories and writes CSV/SVG reports under `paths.reports`.

use std::path::{Path, PathBuf};

use flatdino::analysis::{
    ablation_heatmaps, decode_latents, knn_eval, noise_sweep, patch_matrix, pca_compressibility, pooled_diversity, spatial_similarity,
    split_half_correlation, CentroidClassifier, PcaReport,
};
use flatdino::checkpoint::Checkpoint;
use flatdino::costmodel::{self, Table, THROUGHPUT_COLUMNS};
use flatdino::flatvae::{train_vae, FlatVae, VaeConfig, VaeTrainOutcome, VAE_LOG_COLUMNS};
use flatdino::flowmatch::{sample_latents, train_flow, DitConfig, FlowConfig, LatentStats, VelocityModel, FLOW_LOG_COLUMNS};
use flatdino::report::{csv_report, emit_report, heatmap_svg, line_chart_svg, write_atomic, HeatPanel, Provenance, Report, Series};
use flatdino::synthdata::{build_dataset, read_fgrd, write_fgrd, Dataset, DatasetManifest, FeatureGrid};
use flatdino::{Error, Result};
use ndcore::{ParamStore, RngStream, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{Command, RunConfig, Settings};

pub const VAE_CHECKPOINT: &str = "vae.fdck";
pub const VAE_CONFIG: &str = "vae.toml";
pub const FLOW_CHECKPOINT: &str = "flow.fdck";
pub const FLOW_CONFIG: &str = "flow.toml";

struct Ctx<'a> {
    s: &'a Settings,
    prov: Provenance,
    root: RngStream,
}

impl Ctx<'_> {
    fn report_path(&self, name: &str) -> PathBuf {
        self.s.paths.reports.join(name)
    }

    fn emit(&self, name: &str, report: &Report) -> Result<()> {
        let path = self.report_path(name);
        emit_report(report, &path)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn csv<S: AsRef<str>>(&self, name: &str, columns: &[&str], rows: &[Vec<S>]) -> Result<()> {
        self.emit(name, &csv_report(&self.prov, columns, rows)?)
    }
}

pub fn run(rc: &RunConfig) -> Result<()> {
    let s = &rc.settings;
    let ctx = Ctx {
        s,
        prov: Provenance {
            command: rc.command_line.clone(),
            seed: s.seed,
            config_hash: s.hash(),
        },
        root: RngStream::new(s.seed),
    };
    match rc.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainVae => train_vae_cmd(&ctx),
        Command::TrainFlow => train_flow_cmd(&ctx),
        Command::Sample => sample(&ctx),
        Command::Ablate => ablate(&ctx),
        Command::Analyze => analyze(&ctx),
        Command::SweepCfg => sweep_cfg(&ctx),
        Command::SweepLatent => sweep_latent(&ctx),
        Command::Flops => flops(&ctx),
        Command::Bench => bench(&ctx),
    }
}

fn f(x: f64) -> String {
    format!("{x}")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found at {} ({hint})", path.display())))
    }
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Format {
        offset: e.span().map_or(0, |s| s.start as u64),
        message: format!("{}: {}", path.display(), e.message()),
    })
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, toml::to_string(value).expect("config serialises").as_bytes())
}

fn labels_of(grids: &[FeatureGrid]) -> Vec<usize> {
    grids.iter().map(|g| g.class_id as usize).collect()
}

fn load_dataset(s: &Settings) -> Result<Dataset> {
    let dir = &s.paths.dataset;
    let manifest = dir.join("manifest.toml");
    require(&manifest, "dataset manifest", "run gen-data first")?;
    let manifest = DatasetManifest::from_toml(&std::fs::read_to_string(&manifest)?)?;
    Ok(Dataset {
        manifest,
        train: read_fgrd(&dir.join("train.fgrd"))?,
        val: read_fgrd(&dir.join("val.fgrd"))?,
    })
}

fn load_vae(s: &Settings) -> Result<FlatVae> {
    let ck = s.paths.checkpoints.join(VAE_CHECKPOINT);
    require(&ck, "VAE checkpoint", "run train-vae first")?;
    let cfg: VaeConfig = read_toml(&s.paths.checkpoints.join(VAE_CONFIG))?;
    FlatVae::from_checkpoint(&cfg, &Checkpoint::load(&ck)?)
}

fn load_flow(s: &Settings) -> Result<(VelocityModel, ParamStore, LatentStats)> {
    let ck = s.paths.checkpoints.join(FLOW_CHECKPOINT);
    require(&ck, "flow checkpoint", "run train-flow first")?;
    let cfg: DitConfig = read_toml(&s.paths.checkpoints.join(FLOW_CONFIG))?;
    VelocityModel::from_checkpoint(&cfg, &Checkpoint::load(&ck)?)
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let s = ctx.s;
    let ds = build_dataset(
        &s.synth,
        // 63 bits so the manifest can record them as TOML integers.
        ctx.root.derive("data").next_u64() >> 1,
        ctx.root.derive("encoder").next_u64() >> 1,
        s.data.train_count,
        s.data.val_count,
    )?;
    let dir = &s.paths.dataset;
    ensure_dir(dir)?;
    write_fgrd(&dir.join("train.fgrd"), &ds.train)?;
    write_fgrd(&dir.join("val.fgrd"), &ds.val)?;
    write_atomic(&dir.join("manifest.toml"), ds.manifest.to_toml()?.as_bytes())?;
    println!("dataset: {} train / {} val grids in {}", ds.train.len(), ds.val.len(), dir.display());

    let mut rows = Vec::new();
    for (split, grids) in [("train", &ds.train), ("val", &ds.val)] {
        for c in 0..s.synth.classes {
            let members: Vec<&FeatureGrid> = grids.iter().filter(|g| g.class_id as usize == c).collect();
            let norm = members
                .iter()
                .map(|g| g.features.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
                / members.len().max(1) as f64;
            rows.push(vec![split.to_string(), c.to_string(), members.len().to_string(), f(norm)]);
        }
    }
    ctx.csv("gen_data.csv", &["split", "class", "count", "mean_grid_norm"], &rows)
}

/// Trains one VAE with the shared seeds; `sweep-latent` calls this per grid
/// point.
fn fit_vae(s: &Settings, cfg: &VaeConfig, ds: &Dataset, root: &RngStream) -> Result<(FlatVae, VaeTrainOutcome)> {
    let mut vae = FlatVae::new(cfg, &mut root.derive("vae-init"))?;
    let out = train_vae(&mut vae, &ds.train, &ds.val, &s.vae_train.to_train_config()?, &root.derive("vae-train"))?;
    Ok((vae, out))
}

fn train_vae_cmd(ctx: &Ctx) -> Result<()> {
    let s = ctx.s;
    let ds = load_dataset(s)?;
    let (vae, out) = fit_vae(s, &s.vae, &ds, &ctx.root)?;
    let dir = &s.paths.checkpoints;
    ensure_dir(dir)?;
    vae.to_checkpoint().save(&dir.join(VAE_CHECKPOINT))?;
    write_toml(&dir.join(VAE_CONFIG), &s.vae)?;

    let baseline = vae.mean_predictor_mse(&ds.val)?;
    println!(
        "best epoch {}: val recon {:.6} vs mean-predictor {:.6} (ratio {:.4})",
        out.best_epoch,
        out.best_val_recon,
        baseline,
        out.best_val_recon / baseline
    );
    let rows: Vec<Vec<String>> = out.log.iter().map(|r| r.row()).collect();
    ctx.csv("vae_log.csv", &VAE_LOG_COLUMNS, &rows)?;
    ctx.csv(
        "vae_summary.csv",
        &["tokens", "latent_dim", "beta", "best_epoch", "best_val_recon", "baseline_mse", "ratio"],
        &[vec![
            s.vae.tokens.to_string(),
            s.vae.latent_dim.to_string(),
            f(vae.beta()),
            out.best_epoch.to_string(),
            f(out.best_val_recon),
            f(baseline),
            f(out.best_val_recon / baseline),
        ]],
    )?;
    let series = |name: &str, pick: fn(&flatdino::flatvae::VaeEpochLog) -> f64| Series {
        name: name.into(),
        points: out.log.iter().map(|r| (r.epoch as f64, pick(r))).collect(),
    };
    ctx.emit(
        "vae_loss.svg",
        &line_chart_svg(&ctx.prov, "VAE reconstruction", "epoch", "MSE", &[series("train", |r| r.train_recon), series("val", |r| r.val_recon)])?,
    )
}

fn train_flow_cmd(ctx: &Ctx) -> Result<()> {
    let s = ctx.s;
    let ds = load_dataset(s)?;
    let vae = load_vae(s)?;
    let z = vae.encode_means(&ds.train)?;
    let stats = LatentStats::fit(&z)?;
    let zs = stats.standardize(&z);
    let zv = stats.standardize(&vae.encode_means(&ds.val)?);
    let (tl, vl) = (labels_of(&ds.train), labels_of(&ds.val));
    let dit = DitConfig {
        tokens: vae.cfg.tokens,
        latent_dim: vae.cfg.latent_dim,
        ..s.dit_config()
    };
    let mut model = VelocityModel::new(&dit, &mut ctx.root.derive("dit-init"))?;
    let out = train_flow(&mut model, &zs, &tl, (&zv, &vl), &s.flow_train.to_train_config(), &s.flow, &ctx.root.derive("flow-train"))?;
    let dir = &s.paths.checkpoints;
    ensure_dir(dir)?;
    model.to_checkpoint(&out.ema, &stats).save(&dir.join(FLOW_CHECKPOINT))?;
    write_toml(&dir.join(FLOW_CONFIG), &dit)?;

    if let Some(last) = out.log.last() {
        println!("step {}: loss {:.5}, EMA held-out loss {:.5}", last.step, last.loss, last.ema_loss);
    }
    let rows: Vec<Vec<String>> = out.log.iter().map(|r| r.row()).collect();
    ctx.csv("flow_log.csv", &FLOW_LOG_COLUMNS, &rows)?;
    let series = |name: &str, pick: fn(&flatdino::flowmatch::FlowLogRow) -> f64| Series {
        name: name.into(),
        points: out.log.iter().map(|r| (r.step as f64, pick(r))).collect(),
    };
    ctx.emit(
        "flow_loss.svg",
        &line_chart_svg(&ctx.prov, "Flow-matching loss", "step", "MSE", &[series("train", |r| r.loss), series("EMA held-out", |r| r.ema_loss)])?,
    )
}

/// Balanced labels `i % classes`.
fn balanced_labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

/// Samples in VAE latent units, decoded grids, and the sampled labels.
fn draw(vae: &FlatVae, model: &VelocityModel, ema: &ParamStore, stats: &LatentStats, n: usize, flow: &FlowConfig, rng: &RngStream) -> Result<(Tensor, Vec<FeatureGrid>, Vec<usize>)> {
    let labels = balanced_labels(n, model.cfg.classes);
    let z = sample_latents(&model.field(ema), &labels, model.cfg.tokens, model.cfg.latent_dim, flow, &mut rng.clone())?;
    let z = stats.destandardize(&z);
    let grids = decode_latents(vae, &z, &labels)?;
    Ok((z, grids, labels))
}

fn sample(ctx: &Ctx) -> Result<()> {
    let s = ctx.s;
    let (model, ema, stats) = load_flow(s)?;
    let vae = load_vae(s)?;
    let ds = load_dataset(s)?;
    if s.sample.count == 0 {
        return Err(Error::Config("sample.count must be positive".into()));
    }
    let (z, grids, labels) = draw(&vae, &model, &ema, &stats, s.sample.count, &s.flow, &ctx.root.derive("sampling"))?;
    let (t, d) = (model.cfg.tokens, model.cfg.latent_dim);
    let latents = z
        .data()
        .chunks_exact(t * d)
        .zip(&labels)
        .map(|(c, &l)| FeatureGrid::new(1, t, d, c.iter().map(|&v| v as f32).collect(), l as u32))
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(&s.paths.reports)?;
    for (name, g) in [("samples.fgrd", &latents), ("samples_decoded.fgrd", &grids)] {
        let path = ctx.report_path(name);
        write_fgrd(&path, g)?;
        println!("wrote {}", path.display());
    }
    let clf = CentroidClassifier::fit(&ds.train)?;
    let rows: Vec<Vec<String>> = grids.iter().zip(&labels).enumerate().map(|(i, (g, l))| vec![i.to_string(), l.to_string(), clf.predict(g).to_string()]).collect();
    ctx.csv("samples.csv", &["index", "label", "nearest_centroid"], &rows)?;
    let acc = clf.accuracy(&grids, &labels)?;
    println!("{} samples, w = {}, centroid accuracy {:.4}", labels.len(), s.flow.cfg_weight, acc);
    ctx.csv("sample_summary.csv", &["count", "cfg_weight", "centroid_accuracy", "diversity"], &[vec![
        labels.len().to_string(),
        f(s.flow.cfg_weight),
        f(acc),
        f(pooled_diversity(&grids)),
    ]])
}

fn ablate(ctx: &Ctx) -> Result<()> {
    let s = ctx.s;
    let vae = load_vae(s)?;
    let ds = load_dataset(s)?;
    let grids: Vec<FeatureGrid> = ds.val.iter().chain(&ds.train).take(s.analysis.ablation_samples).cloned().collect();
    let tokens: Vec<usize> = (0..vae.cfg.tokens).collect();
    let maps = ablation_heatmaps(&vae, &grids, &tokens)?;
    let split = split_half_correlation(&vae, &grids)?;

    let mut cells = Vec::new();
    for m in &maps {
        for y in 0..m.grid_h {
            for x in 0..m.grid_w {
                cells.push(vec![m.token.to_string(), y.to_string(), x.to_string(), f(m.at(y, x))]);
            }
        }
    }
    ctx.csv("ablation.csv", &["token", "y", "x", "l2_change"], &cells)?;
    let summary: Vec<Vec<String>> = maps
        .iter()
        .zip(&split)
        .map(|(m, r)| vec![m.token.to_string(), m.samples.to_string(), f(m.mass()), f(m.locality()), f(*r)])
        .collect();
    ctx.csv("ablation_summary.csv", &["token", "samples", "mass", "locality", "split_half_r"], &summary)?;
    let panels: Vec<HeatPanel> = maps
        .iter()
        .map(|m| HeatPanel {
            label: format!("token {}", m.token),
            rows: m.grid_h,
            cols: m.grid_w,
            values: m.values.clone(),
        })
        .collect();
    ctx.emit("ablation.svg", &heatmap_svg(&ctx.prov, "Token ablation: mean L2 change per patch", &panels)?)?;
    println!("{} tokens over {} samples; min split-half r {:.3}", maps.len(), grids.len(), split.iter().copied().fold(f64::INFINITY, f64::min));
    Ok(())
}

fn pca_rows(name: &str, r: &PcaReport) -> Vec<Vec<String>> {
    (0..r.eigenvalues.len())
        .map(|i| vec![name.to_string(), (i + 1).to_string(), f(r.eigenvalues[i]), f(r.retained(i + 1))])
        .collect()
}

fn analyze(ctx: &Ctx) -> Result<()> {
    let s = ctx.s;
    let a = &s.analysis;
    let ds = load_dataset(s)?;
    let vae = load_vae(s)?;
    let mut summary: Vec<Vec<String>> = Vec::new();
    let mut put = |k: &str, v: String| summary.push(vec![k.to_string(), v]);

    let pca_patch = pca_compressibility(&patch_matrix(&ds.train)?, a.pca_threshold)?;
    let z_train = vae.encode_means(&ds.train)?;
    let (n, t, d) = (z_train.shape()[0], z_train.shape()[1], z_train.shape()[2]);
    let pca_latent = pca_compressibility(&z_train.clone().reshape([n * t, d])?, a.pca_threshold)?;
    let mut rows = pca_rows("patch", &pca_patch);
    rows.extend(pca_rows("latent_token", &pca_latent));
    ctx.csv("pca.csv", &["features", "component", "eigenvalue", "retained"], &rows)?;
    put("pca_threshold", f(a.pca_threshold));
    put("patch_dims_for_threshold", pca_patch.dims_for_threshold.to_string());
    put("patch_compression_ratio", f(pca_patch.compression_ratio));
    put("latent_dims_for_threshold", pca_latent.dims_for_threshold.to_string());
    put("latent_compression_ratio", f(pca_latent.compression_ratio));

    let sim = spatial_similarity(&ds.val)?;
    let rows: Vec<Vec<String>> = sim.bins.iter().map(|b| vec![b.distance.to_string(), f(b.mean), b.count.to_string()]).collect();
    ctx.csv("similarity.csv", &["distance", "mean_cosine", "pairs"], &rows)?;
    ctx.emit(
        "similarity.svg",
        &line_chart_svg(&ctx.prov, "Patch similarity against distance", "Chebyshev distance", "mean cosine", &[Series {
            name: "val".into(),
            points: sim.bins.iter().map(|b| (b.distance as f64, b.mean)).collect(),
        }])?,
    )?;

    let sweep = noise_sweep(&vae, &ds.val, &a.noise_sigmas, a.noise_draws, &ctx.root.derive("noise"))?;
    let rows: Vec<Vec<String>> = sweep.points.iter().map(|(sg, e)| vec![f(*sg), f(*e)]).collect();
    ctx.csv("noise.csv", &["sigma", "recon_mse"], &rows)?;
    ctx.emit(
        "noise.svg",
        &line_chart_svg(&ctx.prov, "Reconstruction under latent noise", "sigma", "MSE", &[Series {
            name: "val".into(),
            points: sweep.points.clone(),
        }])?,
    )?;

    let (tl, vl) = (labels_of(&ds.train), labels_of(&ds.val));
    let grid_tensor = |gs: &[FeatureGrid]| -> Result<Tensor> {
        let p = gs[0].patches();
        let dim = gs[0].dim;
        Ok(Tensor::new([gs.len(), p, dim], gs.iter().flat_map(|g| g.features.iter().map(|&v| v as f64)).collect())?)
    };
    let knn_patch = knn_eval(&grid_tensor(&ds.train)?, &tl, &grid_tensor(&ds.val)?, &vl, a.knn_k)?;
    let knn_latent = knn_eval(&z_train, &tl, &vae.encode_means(&ds.val)?, &vl, a.knn_k)?;
    put("knn_k", a.knn_k.to_string());
    put("knn_patch_accuracy", f(knn_patch.accuracy));
    put("knn_latent_accuracy", f(knn_latent.accuracy));
    println!(
        "PCA {}/{} patch dims, {}/{} latent dims; k-NN {:.3} (patches) {:.3} (latents)",
        pca_patch.dims_for_threshold,
        pca_patch.eigenvalues.len(),
        pca_latent.dims_for_threshold,
        pca_latent.eigenvalues.len(),
        knn_patch.accuracy,
        knn_latent.accuracy
    );
    ctx.csv("analyze_summary.csv", &["metric", "value"], &summary)
}

fn sweep_cfg(ctx: &Ctx) -> Result<()> {
    let s = ctx.s;
    let p = &s.sweep_cfg;
    if p.weights.is_empty() || p.interval_starts.is_empty() || p.samples == 0 {
        return Err(Error::Config("sweep_cfg needs weights, interval_starts and a positive sample count".into()));
    }
    let (model, ema, stats) = load_flow(s)?;
    let vae = load_vae(s)?;
    let ds = load_dataset(s)?;
    let clf = CentroidClassifier::fit(&ds.train)?;
    // Every cell integrates the same starting noise.
    let rng = ctx.root.derive("sampling");
    let mut rows = Vec::new();
    let (mut acc_map, mut div_map) = (Vec::new(), Vec::new());
    for &w in &p.weights {
        for &lo in &p.interval_starts {
            let flow = FlowConfig {
                cfg_weight: w,
                cfg_interval: (lo, s.flow.cfg_interval.1),
                ..s.flow.clone()
            };
            flow.validate()?;
            let (_, grids, labels) = draw(&vae, &model, &ema, &stats, p.samples, &flow, &rng)?;
            let acc = clf.accuracy(&grids, &labels)?;
            let div = pooled_diversity(&grids);
            println!("w = {w:<4} t_lo = {lo:<6} accuracy {acc:.3} diversity {div:.4}");
            rows.push(vec![f(w), f(lo), f(acc), f(div)]);
            acc_map.push(acc);
            div_map.push(div);
        }
    }
    ctx.csv("sweep_cfg.csv", &["cfg_weight", "interval_start", "centroid_accuracy", "diversity"], &rows)?;
    let panel = |label: &str, values: Vec<f64>| HeatPanel {
        label: label.into(),
        rows: p.weights.len(),
        cols: p.interval_starts.len(),
        values,
    };
    ctx.emit(
        "sweep_cfg_accuracy.svg",
        &heatmap_svg(&ctx.prov, "Centroid accuracy (rows: weight, cols: interval start)", &[panel("accuracy", acc_map)])?,
    )?;
    ctx.emit(
        "sweep_cfg_diversity.svg",
        &heatmap_svg(&ctx.prov, "Sample diversity (rows: weight, cols: interval start)", &[panel("diversity", div_map)])?,
    )
}

fn sweep_latent(ctx: &Ctx) -> Result<()> {
    let s = ctx.s;
    let points = s.sweep_latent.points();
    if points.is_empty() {
        return Err(Error::Config("sweep_latent has no configurations".into()));
    }
    let ds = load_dataset(s)?;
    let mut rows = Vec::new();
    let mut series: Vec<Series> = Vec::new();
    for (t, d) in points {
        let cfg = VaeConfig {
            tokens: t,
            latent_dim: d,
            ..s.vae.clone()
        };
        let (vae, out) = fit_vae(s, &cfg, &ds, &ctx.root)?;
        println!("T = {t:<3} d = {d:<3} val recon {:.6}", out.best_val_recon);
        rows.push(vec![t.to_string(), d.to_string(), (t * d).to_string(), f(vae.beta()), f(out.best_val_recon)]);
        let name = format!("T = {t}");
        let point = ((t * d) as f64, out.best_val_recon);
        match series.iter_mut().find(|x| x.name == name) {
            Some(x) => x.points.push(point),
            None => series.push(Series { name, points: vec![point] }),
        }
    }
    for x in &mut series {
        x.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    ctx.csv("sweep_latent.csv", &["tokens", "latent_dim", "total_dim", "beta", "val_mse"], &rows)?;
    ctx.emit("sweep_latent.svg", &line_chart_svg(&ctx.prov, "Validation MSE against latent size", "T x d", "val MSE", &series)?)
}

fn flops(ctx: &Ctx) -> Result<()> {
    let tables: [(&str, Table); 5] = [
        ("flops_forward.csv", costmodel::forward_table()?),
        ("flops_backward.csv", costmodel::backward_table()?),
        ("flops_training.csv", costmodel::training_table()?),
        ("flops_encoders.csv", costmodel::encoder_table()?),
        ("flops_exact.csv", costmodel::exact_table()?),
    ];
    for (name, t) in &tables {
        println!("{}", t.render());
        let cols: Vec<&str> = t.columns.iter().map(String::as_str).collect();
        ctx.csv(name, &cols, &t.rows)?;
    }
    Ok(())
}

fn bench(ctx: &Ctx) -> Result<()> {
    let s = ctx.s;
    let cells = costmodel::throughput_bench(&s.dit_config(), &s.bench.to_bench_config(), s.seed)?;
    for c in &cells {
        println!("S = {:<4} batch = {:<4} {:.1} samples/s", c.seq_len, c.batch, c.samples_per_sec);
    }
    let (Some(&short), Some(&long)) = (s.bench.seq_lens.iter().min(), s.bench.seq_lens.iter().max()) else {
        return Err(Error::Config("bench.seq_lens is empty".into()));
    };
    for &b in &s.bench.batch_sizes {
        if let Some(r) = costmodel::throughput_ratio(&cells, short, long, b) {
            println!("batch {b}: throughput S={short} / S={long} = {r:.2}x");
        }
    }
    let rows: Vec<Vec<String>> = cells.iter().map(|c| c.row()).collect();
    ctx.csv("bench.csv", &THROUGHPUT_COLUMNS, &rows)
}
