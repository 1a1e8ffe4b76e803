//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any enforced criterion fails.
//!
//! `cargo test -p flatdino-cli --test acceptance`

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use flatdino::analysis::{knn_eval, noise_sweep, pca_compressibility, spatial_similarity, token_ablation};
use flatdino::checkpoint::Checkpoint;
use flatdino::costmodel::{median_trial_ratio, throughput_bench, BenchConfig};
use flatdino::flatvae::{beta_for, kl_divergence, FlatVae, LatentPosterior, VaeConfig};
use flatdino::flowmatch::{
    draw_flow_batch, euler_sample, fm_loss_graph, guided_velocity, time_grid, time_shift, DitConfig, FlowConfig, VelocityField, VelocityModel,
};
use flatdino::report::read_csv;
use flatdino::synthdata::{read_fgrd, FeatureGrid};
use ndcore::{grad_check, grad_check_many, grad_check_params, Graph, NdError, RngStream, Tensor, Unary, Var};

type Outcome = Result<String, String>;

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn flatdino(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_flatdino"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("flatdino {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn csv_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), String> {
    read_csv(&std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?).map_err(|e| e.to_string())
}

fn csv_value(path: &Path, column: &str) -> Result<f64, String> {
    let (h, rows) = csv_rows(path)?;
    let c = h.iter().position(|x| x == column).ok_or(format!("no column {column}"))?;
    rows[0][c].parse().map_err(|e| format!("{e}"))
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    let mut r = RngStream::new(seed);
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> ndcore::Result<Var> {
    let w = g.constant(random(g.shape(y), seed));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn c1_cost_tables(work: &Path) -> Outcome {
    let start = Instant::now();
    let text = flatdino(work, &["flops"])?;
    let secs = start.elapsed().as_secs_f64();
    let col = |file: &str, name: &str| -> Result<Vec<String>, String> {
        let (h, rows) = csv_rows(&work.join("reports").join(file))?;
        let c = h.iter().position(|x| x == name).ok_or(format!("{file}: no column {name}"))?;
        Ok(rows.iter().map(|r| r[c].clone()).collect())
    };
    let want: [(&str, &str, &[&str]); 9] = [
        ("flops_forward.csv", "linear_gflops", &["3.22", "0.40", "4.08", "0.51", "4.08/12.88", "0.51/1.61"]),
        ("flops_forward.csv", "attention_gflops", &["0.13", "0.002", "0.15", "0.002", "0.15/0.27", "0.002/0.004"]),
        ("flops_forward.csv", "total_gflops", &["80.5", "9.7", "118.4", "14.3", "144.7", "17.5"]),
        ("flops_backward.csv", "backward_gflops", &["161.0", "19.4", "236.8", "28.6", "289.4", "35.0"]),
        ("flops_backward.csv", "total_gflops", &["241.5", "29.1", "355.2", "42.9", "434.1", "52.5"]),
        ("flops_training.csv", "encoding_gflops", &["23.4", "49.4", "23.4", "49.4", "23.4", "49.4"]),
        ("flops_training.csv", "total_gflops", &["264.9", "78.5", "378.6", "92.3", "457.5", "101.9"]),
        ("flops_training.csv", "reduction", &["", "3.4x", "", "4.1x", "", "4.5x"]),
        ("flops_encoders.csv", "gflops", &["23.4", "26.0"]),
    ];
    for (file, name, cells) in want {
        let got = col(file, name)?;
        if got != cells {
            return Err(format!("{file}:{name} = {got:?}, expected {cells:?}"));
        }
    }
    let fwd = col("flops_forward.csv", "reduction")?;
    let xl: f64 = fwd[3].trim_end_matches('x').parse().map_err(|e| format!("{e}"))?;
    if format!("{xl:.1}") != "8.3" || !text.contains("118.4") {
        return Err(format!("DiT-XL forward reduction {xl}"));
    }
    check(secs < 1.0, format!("all cells match, XL forward reduction {xl}x, {secs:.2}s"))
}

fn c2_kl_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..6).map(|_| rng.uniform_range(-1.5, 1.5)).collect();
        let logvar: Vec<f64> = (0..6).map(|_| rng.uniform_range(-1.5, 1.0)).collect();
        let post = LatentPosterior::new(Tensor::new([2, 3], mu.clone()).unwrap(), Tensor::new([2, 3], logvar.clone()).unwrap()).unwrap();
        let exact = kl_divergence(&post);
        // E_q[log q(z) - log p(z)] per dimension, summed.
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for (m, lv) in mu.iter().zip(&logvar) {
                let e = rng.normal();
                let z = m + (0.5 * lv).exp() * e;
                acc += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
            }
        }
        let mc = acc / n as f64;
        worst = worst.max((mc - exact).abs() / exact);
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 0.01 && secs < 30.0, format!("worst relative gap {worst:.2e} over 20 posteriors, {secs:.1}s"))
}

fn c3_gradients() -> Outcome {
    let h = 1e-5;
    let a = random(&[3, 4], 1);
    let mut cases: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, r: ndcore::Result<f64>| cases.push((name.to_string(), r.unwrap_or(f64::INFINITY)));
    push("add", grad_check_many(|g, v| { let y = g.add(v[0], v[1])?; weighted_sum(g, y, 9) }, &[a.clone(), random(&[3, 4], 2)], h));
    push("sub", grad_check_many(|g, v| { let y = g.sub(v[0], v[1])?; weighted_sum(g, y, 9) }, &[a.clone(), random(&[3, 4], 2)], h));
    push("mul", grad_check_many(|g, v| { let y = g.mul(v[0], v[1])?; weighted_sum(g, y, 9) }, &[a.clone(), random(&[3, 4], 2)], h));
    push("scale", grad_check(|g, x| { let y = g.scale(x, -1.7)?; weighted_sum(g, y, 3) }, &a, h));
    push("add_bias", grad_check_many(|g, v| { let y = g.add_bias(v[0], v[1])?; weighted_sum(g, y, 4) }, &[a.clone(), random(&[4], 5)], h));
    push("matmul", grad_check_many(|g, v| { let y = g.matmul(v[0], v[1])?; weighted_sum(g, y, 6) }, &[a.clone(), random(&[4, 2], 7)], h));
    push("bmm", grad_check_many(|g, v| { let y = g.bmm(v[0], v[1], false)?; weighted_sum(g, y, 8) }, &[random(&[2, 3, 4], 9), random(&[2, 4, 5], 10)], h));
    push("bmm_t", grad_check_many(|g, v| { let y = g.bmm(v[0], v[1], true)?; weighted_sum(g, y, 11) }, &[random(&[2, 3, 4], 12), random(&[2, 5, 4], 13)], h));
    push("softmax", grad_check(|g, x| { let y = g.softmax(x)?; weighted_sum(g, y, 14) }, &random(&[3, 5], 15), h));
    push(
        "layer_norm",
        grad_check_many(|g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted_sum(g, y, 16) }, &[random(&[3, 6], 17), random(&[6], 18), random(&[6], 19)], h),
    );
    for kind in [Unary::Silu, Unary::Tanh, Unary::Exp, Unary::Sin, Unary::Square] {
        push(&format!("{kind:?}"), grad_check(|g, x| { let y = g.unary(kind, x)?; weighted_sum(g, y, 20) }, &random(&[7], 21), h));
    }
    push("clamp", grad_check(|g, x| { let y = g.clamp(x, -0.5, 0.5)?; weighted_sum(g, y, 22) }, &Tensor::new([4], vec![-0.9, -0.2, 0.3, 0.8]).unwrap(), h));
    push("mean", grad_check(|g, x| g.mean(x), &a, h));
    push("reshape", grad_check(|g, x| { let y = g.reshape(x, [2, 6])?; weighted_sum(g, y, 23) }, &a, h));
    push("swap_axes12", grad_check(|g, x| { let y = g.swap_axes12(x)?; weighted_sum(g, y, 24) }, &random(&[2, 3, 4, 2], 25), h));
    push("concat", grad_check_many(|g, v| { let y = g.concat(v[0], v[1], 1)?; weighted_sum(g, y, 26) }, &[random(&[2, 3, 4], 27), random(&[2, 2, 4], 28)], h));
    push("slice", grad_check(|g, x| { let y = g.slice(x, 1, 1, 2)?; weighted_sum(g, y, 29) }, &random(&[2, 4, 3], 30), h));
    push("repeat", grad_check(|g, x| { let y = g.repeat(x, 1, 3)?; weighted_sum(g, y, 31) }, &random(&[2, 4], 32), h));
    push("gather_rows", grad_check(|g, x| { let y = g.gather_rows(x, &[2, 0, 2])?; weighted_sum(g, y, 33) }, &random(&[3, 4], 34), h));
    push(
        "linear+mse",
        grad_check_many(
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                let target = g.constant(random(&[2, 3, 5], 35));
                g.mse(y, target)
            },
            &[random(&[2, 3, 4], 36), random(&[4, 5], 37), random(&[5], 38)],
            h,
        ),
    );

    let vcfg = VaeConfig {
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
    };
    let mut rng = RngStream::new(5);
    let vae = FlatVae::new(&vcfg, &mut rng).unwrap();
    let x = Tensor::new([2, 4, 3], rng.normal_vec(24)).unwrap();
    let eps = Tensor::new([2, 2, 2], rng.normal_vec(8)).unwrap();
    let mut store = vae.store.clone();
    push(
        "vae_loss",
        grad_check_params(
            |g, s| {
                let xv = g.constant(x.clone());
                Ok(vae.loss_with(s, g, xv, &eps, 0.1).map_err(|e| NdError::Numeric(e.to_string()))?.total)
            },
            &mut store,
            h,
        ),
    );

    let dcfg = DitConfig {
        tokens: 2,
        latent_dim: 2,
        model_dim: 8,
        depth: 1,
        heads: 2,
        classes: 2,
    };
    let mut model = VelocityModel::new(&dcfg, &mut rng).unwrap();
    // Zero-initialised output layers would hide most parameters from the check.
    for id in model.store.ids().collect::<Vec<_>>() {
        for v in model.store.get_mut(id).data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let z1 = Tensor::new([3, 2, 2], rng.normal_vec(12)).unwrap();
    let batch = draw_flow_batch(&z1, &[0, 1, 0], 2, &FlowConfig::default(), &mut rng).unwrap();
    let mut store = model.store.clone();
    push("fm_loss", grad_check_params(|g, s| fm_loss_graph(&model, s, g, &batch).map_err(|e| NdError::Numeric(e.to_string())), &mut store, 1e-6));

    let (name, worst) = cases.iter().cloned().fold((String::new(), 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    check(worst < 1e-4, format!("{} checks, worst {name} at {worst:.2e}", cases.len()))
}

struct Linear {
    a: f64,
    b: f64,
}

impl VelocityField for Linear {
    fn velocity(&self, z: &Tensor, _t: f64, _l: &[usize]) -> flatdino::Result<Tensor> {
        Ok(map(z, |v| self.a * v + self.b))
    }
    fn null_label(&self) -> usize {
        0
    }
}

/// Conditional and unconditional fields that differ, to make guidance visible.
struct Split;

impl VelocityField for Split {
    fn velocity(&self, z: &Tensor, t: f64, labels: &[usize]) -> flatdino::Result<Tensor> {
        let shift = if labels[0] == 9 { -0.4 } else { 0.3 + t };
        Ok(map(z, |v| 0.7 * v.sin() + shift))
    }
    fn null_label(&self) -> usize {
        9
    }
}

/// Velocity of the straight path from the current point to `target`.
struct ToPoint {
    target: Vec<f64>,
}

impl VelocityField for ToPoint {
    fn velocity(&self, z: &Tensor, t: f64, _l: &[usize]) -> flatdino::Result<Tensor> {
        let v = z.data().iter().zip(self.target.iter().cycle()).map(|(z, x)| (x - z) / (1.0 - t)).collect();
        Ok(Tensor::new(z.shape().to_vec(), v)?)
    }
    fn null_label(&self) -> usize {
        0
    }
}

fn c4_shift_and_guidance() -> Outcome {
    for kappa in [1.0, 2.0, 3.0, 7.5] {
        if time_shift(0.0, kappa).unwrap() != 0.0 || time_shift(1.0, kappa).unwrap() != 1.0 {
            return Err(format!("fixed points fail at kappa {kappa}"));
        }
    }
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        if time_shift(t, 1.0).unwrap() != t {
            return Err(format!("kappa = 1 is not the identity at {t}"));
        }
    }
    if time_shift(0.5, 3.0).unwrap() != 0.25 {
        return Err("t'(0.5, 3) != 0.25".into());
    }
    let z = random(&[2, 3, 4], 40);
    let labels = [1, 1];
    let cfg = |w: f64| FlowConfig {
        cfg_weight: w,
        ..FlowConfig::default()
    };
    let mut checked = 0;
    for &t in &time_grid(50, 3.0).unwrap()[..50] {
        let cond = Split.velocity(&z, t, &labels).unwrap();
        if guided_velocity(&Split, &z, t, &labels, &cfg(1.0)).unwrap() != cond {
            return Err(format!("w = 1 differs from conditional at t = {t}"));
        }
        let (lo, hi) = FlowConfig::default().cfg_interval;
        let guided = guided_velocity(&Split, &z, t, &labels, &cfg(4.5)).unwrap();
        let inside = t >= lo && t <= hi;
        if !inside && guided != cond {
            return Err(format!("guidance leaked outside the interval at t = {t}"));
        }
        if inside && guided == cond {
            return Err(format!("guidance missing inside the interval at t = {t}"));
        }
        checked += 1;
    }
    check(true, format!("fixed points, identity, t'(0.5,3)=0.25, {checked} grid steps bitwise"))
}

fn c5_sampler_oracles() -> Outcome {
    let w1 = FlowConfig {
        cfg_weight: 1.0,
        euler_steps: 37,
        ..FlowConfig::default()
    };
    let z0 = random(&[2, 3, 2], 41);
    let out = euler_sample(&Linear { a: 0.0, b: 1.25 }, &z0, &[0, 0], &w1).unwrap();
    let const_err = out.data().iter().zip(z0.data()).map(|(o, z)| (o - z - 1.25).abs()).fold(0.0, f64::max);
    if const_err > 1e-12 {
        return Err(format!("constant field error {const_err:.2e}"));
    }
    let lin = FlowConfig {
        euler_steps: 1000,
        ..w1.clone()
    };
    let out = euler_sample(&Linear { a: -1.0, b: 0.0 }, &z0, &[0, 0], &lin).unwrap();
    let decay_err = out
        .data()
        .iter()
        .zip(z0.data())
        .map(|(o, z)| (o / z / (-1.0f64).exp() - 1.0).abs())
        .fold(0.0, f64::max);
    if decay_err > 0.01 {
        return Err(format!("linear field decay off by {decay_err:.2e}"));
    }
    let target = vec![0.5, -1.5, 2.0, 0.25];
    let mut straight_err: f64 = 0.0;
    for steps in [1, 3, 10, 50] {
        let cfg = FlowConfig {
            euler_steps: steps,
            ..w1.clone()
        };
        let z0 = random(&[1, 2, 2], 42 + steps as u64);
        let out = euler_sample(&ToPoint { target: target.clone() }, &z0, &[0], &cfg).unwrap();
        straight_err = straight_err.max(out.data().iter().zip(&target).map(|(o, x)| (o - x).abs()).fold(0.0, f64::max));
    }
    check(
        straight_err < 1e-6,
        format!("constant {const_err:.1e}, linear decay {decay_err:.1e}, straight path {straight_err:.1e}"),
    )
}

fn c6_beta() -> Outcome {
    for (td, want) in [(256, 2e-6), (512, 1e-6), (1024, 5e-7), (2048, 2.5e-7), (4096, 1.25e-7)] {
        let b = beta_for(1, td, 1e-6, 512).map_err(|e| e.to_string())?;
        if b != want {
            return Err(format!("beta({td}) = {b:e}, expected {want:e}"));
        }
    }
    let shapes = [(1, 256), (32, 16), (16, 64), (64, 32), (4, 1024), (8, 8), (16, 4), (4, 16), (3, 7)];
    let mut worst: f64 = 0.0;
    for &(t1, d1) in &shapes {
        for &(t2, d2) in &shapes {
            let a = beta_for(t1, d1, 1e-6, 512).unwrap() * (t1 * d1) as f64;
            let b = beta_for(t2, d2, 1e-6, 512).unwrap() * (t2 * d2) as f64;
            worst = worst.max((a - b).abs() / a);
        }
    }
    check(worst <= 1e-15, format!("five table values exact, beta*T*d spread {worst:.1e}"))
}

fn load_vae(dir: &Path) -> Result<FlatVae, String> {
    let cfg: VaeConfig = toml::from_str(&std::fs::read_to_string(dir.join("checkpoints/vae.toml")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let ck = Checkpoint::load(&dir.join("checkpoints/vae.fdck")).map_err(|e| e.to_string())?;
    FlatVae::from_checkpoint(&cfg, &ck).map_err(|e| e.to_string())
}

fn c7_vae(work: &Path) -> Outcome {
    flatdino(work, &["gen-data"])?;
    let start = Instant::now();
    flatdino(work, &["train-vae", "--epochs", "30"])?;
    let secs = start.elapsed().as_secs_f64();
    let summary = work.join("reports/vae_summary.csv");
    let (recon, base) = (csv_value(&summary, "best_val_recon")?, csv_value(&summary, "baseline_mse")?);
    check(
        recon < 0.5 * base && secs < 600.0,
        format!("val MSE {recon:.4} vs baseline {base:.4} (ratio {:.3}), {secs:.0}s", recon / base),
    )
}

fn c8_latent_shape(work: &Path) -> Outcome {
    flatdino(work, &["sweep-latent", "--epochs", "30", "--set", "sweep_latent.shapes=[[16, 4], [4, 16]]"])?;
    let (_, rows) = csv_rows(&work.join("reports/sweep_latent.csv"))?;
    let mse = |t: &str| rows.iter().find(|r| r[0] == t).map(|r| r[4].parse::<f64>().unwrap()).ok_or("missing row".to_string());
    let (many, few) = (mse("16")?, mse("4")?);
    check(many <= few, format!("16x4 val MSE {many:.4}, 4x16 val MSE {few:.4}"))
}

fn c9_generation(work: &Path) -> Outcome {
    let start = Instant::now();
    // Desk learning rate: with EMA decay 0.9995 the average spans ~2000
    // steps, so the live weights must settle well inside the 5000-step run.
    flatdino(work, &["train-flow", "--set", "flow_train.lr=1e-3"])?;
    let accuracy = |w: &str| -> Result<f64, String> {
        flatdino(work, &["sample", "--count", "400", "--cfg-weight", w])?;
        csv_value(&work.join("reports/sample_summary.csv"), "centroid_accuracy")
    };
    let plain = accuracy("1")?;
    let guided = accuracy("2")?;
    let secs = start.elapsed().as_secs_f64();
    check(
        plain > 0.9 && guided >= plain && secs < 1200.0,
        format!("centroid accuracy {plain:.3} at w=1, {guided:.3} at w=2, {secs:.0}s"),
    )
}

fn c10_ablation(work: &Path) -> Outcome {
    let vae = load_vae(work)?;
    let val = read_fgrd(&work.join("data/val.fgrd")).map_err(|e| e.to_string())?;
    let grids = &val[..16];
    let (t, d) = (vae.cfg.tokens, vae.cfg.latent_dim);
    let mut worst: f64 = 0.0;
    for token in 0..t {
        let map = token_ablation(&vae, grids, token).map_err(|e| e.to_string())?;
        if map.values.iter().any(|&v| v < 0.0) {
            return Err(format!("negative heatmap entry for token {token}"));
        }
        // Two plain decodes per sample.
        let mut naive = vec![0.0; grids[0].patches()];
        for g in grids {
            let mu = vae.encode(g).map_err(|e| e.to_string())?.mu;
            let mut zeroed = mu.data().to_vec();
            zeroed[token * d..(token + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            // Stay in f64: FeatureGrid stores f32 and would round the decodes.
            let raw = |z: Vec<f64>| -> Result<Vec<f64>, String> {
                let y = vae.decode_standardized(&Tensor::new([1, t, d], z).unwrap()).map_err(|e| e.to_string())?;
                Ok(vae.norm.invert(y.data()))
            };
            let full = raw(mu.data().to_vec())?;
            let cut = raw(zeroed)?;
            let fd = vae.cfg.feature_dim;
            for (p, acc) in naive.iter_mut().enumerate() {
                let dist: f64 = full[p * fd..(p + 1) * fd].iter().zip(&cut[p * fd..(p + 1) * fd]).map(|(a, b)| (a - b).powi(2)).sum();
                *acc += dist.sqrt() / grids.len() as f64;
            }
        }
        worst = worst.max(map.values.iter().zip(&naive).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let sweep = noise_sweep(&vae, &val, &[0.0, 0.5], 4, &RngStream::new(3)).map_err(|e| e.to_string())?;
    let base = vae.evaluate(&val).map_err(|e| e.to_string())?.0;
    let exact = sweep.points[0].1 == base;
    check(
        worst < 1e-10 && exact,
        format!("max deviation from brute force {worst:.1e}, sigma=0 point {} baseline", if exact { "equals" } else { "differs from" }),
    )
}

fn c11_analysis(work: &Path) -> Outcome {
    let rows: Vec<Vec<f64>> = (0..60).map(|i| {
        let s = i as f64 - 30.0;
        vec![s, -2.0 * s, 0.5 * s, 3.0 * s]
    }).collect();
    let rank1 = pca_compressibility(&Tensor::from_rows(&rows).unwrap(), 0.95).map_err(|e| e.to_string())?.dims_for_threshold;
    let mut rng = RngStream::new(11);
    let iso = Tensor::new([20_000, 20], rng.normal_vec(20_000 * 20)).unwrap();
    let iso = pca_compressibility(&iso, 0.95).map_err(|e| e.to_string())?.dims_for_threshold;

    let val: Vec<FeatureGrid> = read_fgrd(&work.join("data/val.fgrd")).map_err(|e| e.to_string())?;
    let curve = spatial_similarity(&val).map_err(|e| e.to_string())?;
    let half = val[0].grid_h / 2;
    let mut rise: f64 = 0.0;
    for d in 1..=half {
        let (a, b) = (curve.get(d - 1).unwrap().mean, curve.get(d).unwrap().mean);
        rise = rise.max(b - a);
    }

    let centres = [[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]];
    let mut pts = |n: usize| {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| centres[i % 3].iter().map(|c| c + 0.3 * rng.normal()).collect()).collect();
        (Tensor::from_rows(&rows).unwrap(), (0..n).map(|i| i % 3).collect::<Vec<_>>())
    };
    let (tr, tl) = pts(90);
    let (va, vl) = pts(30);
    let knn = knn_eval(&tr, &tl, &va, &vl, 5).map_err(|e| e.to_string())?;
    let scaled = knn_eval(&map(&tr, |v| v * 37.5), &tl, &map(&va, |v| v * 37.5), &vl, 5).map_err(|e| e.to_string())?;
    let ok = rank1 == 1 && (18..=20).contains(&iso) && rise <= 0.02 && knn.accuracy == 1.0 && knn.predictions == scaled.predictions;
    check(
        ok,
        format!(
            "rank-1 -> {rank1}, isotropic -> {iso}, largest rise {rise:.4} up to d={half}, k-NN {:.2}, scaled predictions {}",
            knn.accuracy,
            if knn.predictions == scaled.predictions { "equal" } else { "differ" }
        ),
    )
}

fn c12_throughput() -> Outcome {
    let bench = BenchConfig {
        seq_lens: vec![8, 64],
        batch_sizes: vec![32],
        duration: Duration::from_millis(400),
        trials: 5,
        warmup: 2,
    };
    let cells = throughput_bench(&DitConfig::default(), &bench, 0).map_err(|e| e.to_string())?;
    let ratio = median_trial_ratio(&cells[0], &cells[1]);
    check(ratio > 2.0, format!("S=8 / S=64 median trial ratio {ratio:.2}x at batch 32"))
}

fn smoke(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    for args in [&["gen-data"][..], &["train-vae", "--epochs", "2"], &["train-flow", "--steps", "100"], &["sample", "--count", "8"]] {
        flatdino(dir, args)?;
    }
    let mut csvs = BTreeMap::new();
    for entry in std::fs::read_dir(dir.join("reports")).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.extension().is_some_and(|e| e == "csv") {
            csvs.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).map_err(|e| e.to_string())?);
        }
    }
    Ok(csvs)
}

fn c13_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (ra, rb) = (smoke(a.path())?, smoke(b.path())?);
    if ra.keys().ne(rb.keys()) {
        return Err("runs wrote different report sets".into());
    }
    let differing: Vec<String> = ra.iter().filter(|(k, v)| rb[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    check(differing.is_empty() && !ra.is_empty(), format!("{} CSV files compared, differing: {differing:?}", ra.len()))
}

fn ensure_data(work: &Path) -> Result<(), String> {
    if !work.join("data/val.fgrd").is_file() {
        flatdino(work, &["gen-data"])?;
    }
    Ok(())
}

/// Criterion numbers given as arguments select a subset; criteria that need
/// the trained VAE pull in its training run.
fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: u32| selected.is_empty() || selected.contains(&id);
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let mut failed = 0;
    let mut report = |id: u32, name: &str, soft: bool, outcome: Outcome| match &outcome {
        Ok(detail) => println!("[PASS] {id:>2} {name}: {detail}"),
        Err(detail) if soft => println!("[FAIL] {id:>2} {name} (soft, not enforced): {detail}"),
        Err(detail) => {
            failed += 1;
            println!("[FAIL] {id:>2} {name}: {detail}")
        }
    };
    if want(1) {
        report(1, "cost-table exactness", false, c1_cost_tables(w));
    }
    if want(2) {
        report(2, "KL oracle", false, c2_kl_oracle());
    }
    if want(3) {
        report(3, "gradient suite", false, c3_gradients());
    }
    if want(4) {
        report(4, "time-shift and guidance algebra", false, c4_shift_and_guidance());
    }
    if want(5) {
        report(5, "sampler oracles", false, c5_sampler_oracles());
    }
    if want(6) {
        report(6, "beta normalisation", false, c6_beta());
    }
    if want(7) || want(9) || want(10) {
        report(7, "desk-scale VAE training", false, c7_vae(w));
    }
    let have_vae = w.join("checkpoints/vae.fdck").is_file();
    let skipped = || Err::<String, String>("skipped: no trained VAE".into());
    if want(9) {
        report(9, "desk-scale generation", false, if have_vae { c9_generation(w) } else { skipped() });
    }
    if want(10) {
        report(10, "ablation brute-force equivalence", false, if have_vae { c10_ablation(w) } else { skipped() });
    }
    if want(11) {
        report(11, "analysis properties", false, ensure_data(w).and_then(|_| c11_analysis(w)));
    }
    if want(12) {
        report(12, "throughput ratio", false, c12_throughput());
    }
    if want(13) {
        report(13, "determinism", false, c13_determinism());
    }
    // Last: it retrains two VAEs and is reported without being enforced.
    if want(8) {
        report(8, "latent-shape ordering", true, ensure_data(w).and_then(|_| c8_latent_shape(w)));
    }
    if failed > 0 {
        println!("{failed} enforced criteria failed");
        std::process::exit(1);
    }
    println!("all enforced criteria passed");
}
