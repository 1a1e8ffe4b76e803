//! Deterministic stand-in for a frozen vision backbone.
//!
//! Images are class templates (bars, blobs, rings) placed with a random
//! smooth deformation and pixel noise. The frozen encoder turns each image
//! into a `grid_h × grid_w` grid of `dim`-wide patch features with a fixed
//! random projection of overlapping windows, a `tanh`, and a 3×3 neighbour
//! blend that makes nearby patches similar.

use std::io::Write;
use std::path::Path;

use ndcore::{RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub patch: usize,
    pub window: usize,
    pub feature_dim: usize,
    pub classes: usize,
    /// Scale of the per-image deformation (position, size, background field).
    pub jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub flip: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            window: 6,
            feature_dim: 16,
            classes: 4,
            jitter: 1.0,
            noise: 0.02,
            flip: true,
        }
    }
}

impl SynthConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size / self.patch, self.image_size / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return config(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.window < self.patch || (self.window - self.patch) % 2 != 0 {
            return config(format!("window {} must cover patch {} symmetrically", self.window, self.patch));
        }
        if self.feature_dim == 0 || self.classes == 0 {
            return config("feature_dim and classes must be positive");
        }
        if !(self.jitter >= 0.0 && self.noise >= 0.0) {
            return config("jitter and noise must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub height: usize,
    pub width: usize,
    /// Row-major, single channel, values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub class_id: usize,
}

impl SyntheticImage {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Mean squared horizontal and vertical finite differences.
    pub fn gradient_energy(&self) -> (f64, f64) {
        let (h, w) = (self.height, self.width);
        let mut gx = 0.0;
        let mut gy = 0.0;
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    gx += (self.at(y, x + 1) - self.at(y, x)).powi(2);
                }
                if y + 1 < h {
                    gy += (self.at(y + 1, x) - self.at(y, x)).powi(2);
                }
            }
        }
        (gx / (h * (w - 1)) as f64, gy / ((h - 1) * w) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    HorizontalBar,
    VerticalBar,
    Blob,
    Ring,
}

struct Placement {
    cx: f64,
    cy: f64,
    length: f64,
    thickness: f64,
    intensity: f64,
    field: [f64; 4],
}

const BACKGROUND: f64 = 0.2;

fn soft_bar(along: f64, across: f64, length: f64, thickness: f64) -> f64 {
    let profile = (-(across / thickness).powi(2)).exp();
    let edge = 1.0 / (1.0 + ((along.abs() - length / 2.0) / 0.75).exp());
    profile * edge
}

/// Three parallel bars, `along` being the bar direction.
fn grating(along: f64, across: f64, p: &Placement) -> f64 {
    let gap = 3.0 * p.thickness;
    [-gap, 0.0, gap]
        .iter()
        .map(|o| soft_bar(along, across - o, p.length, p.thickness))
        .fold(0.0, f64::max)
}

fn shape_of(class_id: usize) -> Shape {
    match class_id % 4 {
        0 => Shape::HorizontalBar,
        1 => Shape::VerticalBar,
        2 => Shape::Blob,
        _ => Shape::Ring,
    }
}

fn render(cfg: &SynthConfig, class_id: usize, p: &Placement) -> Vec<f64> {
    let n = cfg.image_size;
    let shape = shape_of(class_id);
    let mut pixels = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let dx = x as f64 + 0.5 - p.cx;
            let dy = y as f64 + 0.5 - p.cy;
            let v = match shape {
                Shape::HorizontalBar => grating(dx, dy, p),
                Shape::VerticalBar => grating(dy, dx, p),
                Shape::Blob => (-(dx * dx + dy * dy) / (1.6 * p.thickness).powi(2)).exp(),
                Shape::Ring => (-(((dx * dx + dy * dy).sqrt() - 0.3 * p.length) / p.thickness).powi(2)).exp(),
            };
            let (u, w) = (x as f64 / n as f64, y as f64 / n as f64);
            let field = p.field[0] * (std::f64::consts::PI * u).cos()
                + p.field[1] * (std::f64::consts::PI * w).cos()
                + p.field[2] * (std::f64::consts::TAU * u).sin()
                + p.field[3] * (std::f64::consts::TAU * w).sin();
            pixels[y * n + x] = BACKGROUND + p.intensity * v + field;
        }
    }
    pixels
}

fn canonical(cfg: &SynthConfig, class_id: usize) -> Placement {
    let c = cfg.image_size as f64 / 2.0;
    Placement {
        cx: c,
        cy: c,
        length: 0.625 * cfg.image_size as f64,
        thickness: 1.5 + 1.0 * (class_id / 4) as f64,
        intensity: [0.6, 0.36, 0.9, 0.3][class_id % 4],
        field: [0.0; 4],
    }
}

fn check_class(cfg: &SynthConfig, class_id: usize) -> Result<()> {
    if class_id >= cfg.classes {
        return contract(format!("class {class_id} outside 0..{}", cfg.classes));
    }
    Ok(())
}

/// The undeformed, noise-free image of a class.
pub fn class_template(class_id: usize, cfg: &SynthConfig) -> Result<SyntheticImage> {
    check_class(cfg, class_id)?;
    let p = canonical(cfg, class_id);
    let pixels = render(cfg, class_id, &p).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(SyntheticImage {
        height: cfg.image_size,
        width: cfg.image_size,
        pixels,
        class_id,
    })
}

pub fn generate_image(class_id: usize, cfg: &SynthConfig, rng: &mut RngStream) -> Result<SyntheticImage> {
    check_class(cfg, class_id)?;
    let j = cfg.jitter;
    let n = cfg.image_size as f64;
    let base = canonical(cfg, class_id);
    let mut u = |lo: f64, hi: f64| rng.uniform_range(lo, hi);
    // Translations snap to whole patches plus a small sub-patch offset, so
    // the template's phase against the patch grid stays roughly fixed.
    let step = cfg.patch as f64;
    let shift = |u: &mut dyn FnMut(f64, f64) -> f64| step * (j * u(-0.15, 0.15) * n / step).round() + j * u(-0.5, 0.5);
    let p = Placement {
        cx: base.cx + shift(&mut u),
        cy: base.cy + shift(&mut u),
        length: base.length * (1.0 + j * u(-0.1, 0.1)),
        thickness: base.thickness * (1.0 + j * u(-0.1, 0.1)),
        intensity: base.intensity * (1.0 + j * u(-0.05, 0.05)),
        field: [j * u(-0.03, 0.03), j * u(-0.03, 0.03), j * u(-0.02, 0.02), j * u(-0.02, 0.02)],
    };
    let flip = cfg.flip && rng.bernoulli(0.5);
    let mut pixels = render(cfg, class_id, &p);
    if flip {
        for row in pixels.chunks_exact_mut(cfg.image_size) {
            row.reverse();
        }
    }
    if cfg.noise > 0.0 {
        let noise = rng.normal_vec(pixels.len());
        for (px, e) in pixels.iter_mut().zip(noise) {
            *px += cfg.noise * e;
        }
    }
    pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(SyntheticImage {
        height: cfg.image_size,
        width: cfg.image_size,
        pixels,
        class_id,
    })
}

/// Patch features of one image. `features` is `(grid_h · grid_w) × dim`,
/// row-major over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub features: Vec<f32>,
    pub class_id: u32,
}

impl FeatureGrid {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, features: Vec<f32>, class_id: u32) -> Result<Self> {
        if features.len() != grid_h * grid_w * dim {
            return contract(format!(
                "{}x{}x{} grid needs {} values, got {}",
                grid_h,
                grid_w,
                dim,
                grid_h * grid_w * dim,
                features.len()
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature grid contains non-finite values".into()));
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            features,
            class_id,
        })
    }

    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Features as a `[patches, dim]` f64 tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.patches(), self.dim], self.features.iter().map(|&v| v as f64).collect()).expect("finite features")
    }

    /// Mean over patches.
    pub fn mean_pool(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for i in 0..self.patches() {
            for (o, v) in out.iter_mut().zip(self.patch(i)) {
                *o += *v as f64;
            }
        }
        let n = self.patches() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// Fixed random patch encoder. Never trained; fully determined by its seed
/// and the image geometry.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    cfg: SynthConfig,
    projection: Vec<f64>,
    bias: Vec<f64>,
}

/// Weight of the centre patch in the neighbour blend.
const CENTER_WEIGHT: f64 = 0.5;

impl FrozenEncoder {
    pub fn new(seed: u64, cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(seed).derive("frozen-encoder");
        let taps = cfg.window * cfg.window;
        let std = 4.0 / (taps as f64).sqrt();
        let projection = rng.normal_vec(taps * cfg.feature_dim).into_iter().map(|w| w * std).collect();
        let bias = rng.normal_vec(cfg.feature_dim).into_iter().map(|b| 0.5 * b).collect();
        Ok(Self {
            cfg: cfg.clone(),
            projection,
            bias,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn encode(&self, img: &SyntheticImage) -> Result<FeatureGrid> {
        let cfg = &self.cfg;
        if img.height != cfg.image_size || img.width != cfg.image_size {
            return config(format!(
                "image {}x{} does not match encoder geometry {}",
                img.height, img.width, cfg.image_size
            ));
        }
        let (gh, gw) = cfg.grid();
        let d = cfg.feature_dim;
        let pad = (cfg.window - cfg.patch) / 2;
        let n = cfg.image_size as isize;
        let mut raw = vec![0.0; gh * gw * d];
        let mut window = vec![0.0; cfg.window * cfg.window];
        for gy in 0..gh {
            for gx in 0..gw {
                let y0 = (gy * cfg.patch) as isize - pad as isize;
                let x0 = (gx * cfg.patch) as isize - pad as isize;
                for wy in 0..cfg.window {
                    for wx in 0..cfg.window {
                        let y = (y0 + wy as isize).clamp(0, n - 1) as usize;
                        let x = (x0 + wx as isize).clamp(0, n - 1) as usize;
                        window[wy * cfg.window + wx] = img.at(y, x) - BACKGROUND;
                    }
                }
                let out = &mut raw[(gy * gw + gx) * d..(gy * gw + gx + 1) * d];
                out.copy_from_slice(&self.bias);
                for (t, &px) in window.iter().enumerate() {
                    for (o, w) in out.iter_mut().zip(&self.projection[t * d..(t + 1) * d]) {
                        *o += w * px;
                    }
                }
                out.iter_mut().zip(&self.bias).for_each(|(o, b)| *o = o.tanh() - b.tanh());
            }
        }
        let blended = blend_neighbours(&raw, gh, gw, d);
        FeatureGrid::new(gh, gw, d, blended.into_iter().map(|v| v as f32).collect(), img.class_id as u32)
    }
}

/// Centre weight 0.5; the other 0.5 spread over the available 3×3
/// neighbours with binomial weights (2 for edge neighbours, 1 for corners).
fn blend_neighbours(raw: &[f64], gh: usize, gw: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; raw.len()];
    for y in 0..gh {
        for x in 0..gw {
            let mut acc = vec![0.0; d];
            let mut total = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= gh as isize || nx >= gw as isize {
                        continue;
                    }
                    let w = if dx == 0 || dy == 0 { 2.0 } else { 1.0 };
                    total += w;
                    let src = (ny as usize * gw + nx as usize) * d;
                    for (a, v) in acc.iter_mut().zip(&raw[src..src + d]) {
                        *a += w * v;
                    }
                }
            }
            let dst = (y * gw + x) * d;
            for k in 0..d {
                let nb = if total > 0.0 { acc[k] / total } else { raw[dst + k] };
                out[dst + k] = CENTER_WEIGHT * raw[dst + k] + (1.0 - CENTER_WEIGHT) * nb;
            }
        }
    }
    out
}

pub fn frozen_encode(img: &SyntheticImage, cfg: &SynthConfig, encoder_seed: u64) -> Result<FeatureGrid> {
    FrozenEncoder::new(encoder_seed, cfg)?.encode(img)
}

/// `count` grids with balanced labels (`i % classes`), image `i` drawn
/// from `rng.fork(i)`.
pub fn generate_grids(cfg: &SynthConfig, encoder: &FrozenEncoder, rng: &RngStream, count: usize) -> Result<Vec<FeatureGrid>> {
    (0..count)
        .map(|i| {
            let mut r = rng.fork(i as u64);
            let img = generate_image(i % cfg.classes, cfg, &mut r)?;
            encoder.encode(&img)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub data_seed: u64,
    pub encoder_seed: u64,
    pub feature_standardization: String,
    pub synth: SynthConfig,
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<FeatureGrid>,
    pub val: Vec<FeatureGrid>,
}

/// Train and val splits come from distinct labelled sub-streams of the data
/// seed, so they never share an image.
pub fn build_dataset(cfg: &SynthConfig, data_seed: u64, encoder_seed: u64, train_count: usize, val_count: usize) -> Result<Dataset> {
    let encoder = FrozenEncoder::new(encoder_seed, cfg)?;
    let root = RngStream::new(data_seed);
    let train = generate_grids(cfg, &encoder, &root.derive("train"), train_count)?;
    let val = generate_grids(cfg, &encoder, &root.derive("val"), val_count)?;
    Ok(Dataset {
        manifest: DatasetManifest {
            classes: cfg.classes,
            train_count,
            val_count,
            data_seed,
            encoder_seed,
            feature_standardization: "per-feature z-score from train split".into(),
            synth: cfg.clone(),
        },
        train,
        val,
    })
}

impl DatasetManifest {
    /// Fails for seeds above `i64::MAX`, which TOML integers cannot hold.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("manifest does not serialise: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }
}

pub const FGRD_MAGIC: &[u8; 4] = b"FGRD";
pub const FGRD_VERSION: u32 = 1;

/// Serialises grids that share one geometry:
/// `"FGRD" | u32 version | u32 count | u32 Ph | u32 Pw | u32 D`, then per
/// grid `u32 class_id` followed by `Ph·Pw·D` little-endian f32 values.
pub fn encode_fgrd(grids: &[FeatureGrid]) -> Result<Vec<u8>> {
    let (gh, gw, d) = grids.first().map_or((0, 0, 0), |g| (g.grid_h, g.grid_w, g.dim));
    if let Some(bad) = grids.iter().find(|g| (g.grid_h, g.grid_w, g.dim) != (gh, gw, d)) {
        return contract(format!(
            "mixed geometries: {gh}x{gw}x{d} and {}x{}x{}",
            bad.grid_h, bad.grid_w, bad.dim
        ));
    }
    let mut out = Vec::with_capacity(24 + grids.len() * (4 + 4 * gh * gw * d));
    out.extend_from_slice(FGRD_MAGIC);
    for v in [FGRD_VERSION, grids.len() as u32, gh as u32, gw as u32, d as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for g in grids {
        out.extend_from_slice(&g.class_id.to_le_bytes());
        for v in &g.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) struct ByteReader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn fail<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: offset as u64,
            message: message.into(),
        })
    }
}

pub fn decode_fgrd(bytes: &[u8]) -> Result<Vec<FeatureGrid>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != FGRD_MAGIC {
        return r.fail(0, "bad magic, expected \"FGRD\"");
    }
    let version = r.u32("version")?;
    if version != FGRD_VERSION {
        return r.fail(4, format!("unsupported version {version}"));
    }
    let count = r.u32("count")? as usize;
    let (gh, gw, d) = (r.u32("Ph")? as usize, r.u32("Pw")? as usize, r.u32("D")? as usize);
    let per = gh * gw * d;
    let mut grids = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let class_id = r.u32(&format!("class of grid {i}"))?;
        let start = r.pos;
        let raw = r.take(per * 4, &format!("features of grid {i}"))?;
        let features: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if features.iter().any(|v| !v.is_finite()) {
            return r.fail(start, format!("non-finite feature in grid {i}"));
        }
        grids.push(FeatureGrid {
            grid_h: gh,
            grid_w: gw,
            dim: d,
            features,
            class_id,
        });
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(grids)
}

pub fn write_fgrd(path: &Path, grids: &[FeatureGrid]) -> Result<()> {
    let bytes = encode_fgrd(grids)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_fgrd(path: &Path) -> Result<Vec<FeatureGrid>> {
    decode_fgrd(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_gives_identical_images() {
        let cfg = SynthConfig::default();
        let a = generate_image(1, &cfg, &mut RngStream::new(11)).unwrap();
        let b = generate_image(1, &cfg, &mut RngStream::new(11)).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn zero_noise_and_jitter_reproduce_the_template() {
        let cfg = SynthConfig {
            jitter: 0.0,
            noise: 0.0,
            ..Default::default()
        };
        for class in 0..cfg.classes {
            for seed in 0..4 {
                let img = generate_image(class, &cfg, &mut RngStream::new(seed)).unwrap();
                assert_eq!(img, class_template(class, &cfg).unwrap());
            }
        }
    }

    #[test]
    fn classes_differ_in_orientation_energy() {
        let cfg = SynthConfig::default();
        let mut ratio = [0.0; 2];
        for seed in 0..20 {
            for class in 0..2 {
                let img = generate_image(class, &cfg, &mut RngStream::new(seed)).unwrap();
                let (gx, gy) = img.gradient_energy();
                ratio[class] += (gx / gy).ln();
            }
        }
        // Horizontal bars change along y, vertical bars along x.
        assert!(ratio[0] < -5.0 && ratio[1] > 5.0, "{ratio:?}");
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let cfg = SynthConfig::default();
        assert!(matches!(generate_image(4, &cfg, &mut RngStream::new(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn encoder_is_pure_and_checks_geometry() {
        let cfg = SynthConfig::default();
        let enc = FrozenEncoder::new(5, &cfg).unwrap();
        let img = generate_image(2, &cfg, &mut RngStream::new(3)).unwrap();
        let first = enc.encode(&img).unwrap();
        for _ in 0..10 {
            assert_eq!(enc.encode(&img).unwrap(), first);
        }
        assert_eq!(frozen_encode(&img, &cfg, 5).unwrap(), first);
        assert_eq!((first.grid_h, first.grid_w, first.dim), (8, 8, 16));

        let bad = SynthConfig {
            image_size: 30,
            ..Default::default()
        };
        assert!(matches!(FrozenEncoder::new(5, &bad), Err(Error::Config(_))));
        let small = SyntheticImage {
            height: 16,
            width: 16,
            pixels: vec![0.5; 256],
            class_id: 0,
        };
        assert!(matches!(enc.encode(&small), Err(Error::Config(_))));
    }

    #[test]
    fn constant_image_gives_uniform_features() {
        let cfg = SynthConfig::default();
        let img = SyntheticImage {
            height: 32,
            width: 32,
            pixels: vec![0.37; 1024],
            class_id: 0,
        };
        let grid = frozen_encode(&img, &cfg, 1).unwrap();
        for i in 1..grid.patches() {
            for (a, b) in grid.patch(i).iter().zip(grid.patch(0)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fgrd_errors_name_offsets() {
        let grid = FeatureGrid::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0], 3).unwrap();
        let mut bytes = encode_fgrd(&[grid]).unwrap();
        let truncated = decode_fgrd(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(truncated, Error::Format { offset: 28, .. }), "{truncated}");
        bytes[4] = 2;
        assert!(matches!(decode_fgrd(&bytes), Err(Error::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_fgrd(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn manifest_round_trips_through_toml() {
        let ds = build_dataset(&SynthConfig::default(), 1, 2, 3, 1).unwrap();
        let text = ds.manifest.to_toml().unwrap();
        assert_eq!(DatasetManifest::from_toml(&text).unwrap(), ds.manifest);
        assert!(DatasetManifest::from_toml(&format!("{text}\nbogus = 1\n")).is_err());
    }
}
