//! Representation analyses: token ablation heatmaps, PCA compressibility,
//! spatial redundancy of feature grids, latent noise sweeps and k-NN.

use nalgebra::{DMatrix, SymmetricEigen};
use ndcore::{RngStream, Tensor};

use crate::error::{contract, Result};
use crate::flatvae::{FlatVae, EVAL_CHUNK};
use crate::synthdata::FeatureGrid;

pub const DEFAULT_ABLATION_SAMPLES: usize = 1000;

/// Mean per-patch L2 change of the reconstruction when one latent token is
/// zeroed, laid out as `grid_h × grid_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationHeatmap {
    pub token: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<f64>,
    pub samples: usize,
}

impl AblationHeatmap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.grid_w + x]
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Spatial variance of the heatmap read as a distribution over patch
    /// positions. Small values mean the token acts locally; zero mass gives 0.
    pub fn locality(&self) -> f64 {
        let mass = self.mass();
        if mass <= 0.0 {
            return 0.0;
        }
        let (mut my, mut mx) = (0.0, 0.0);
        for (i, v) in self.values.iter().enumerate() {
            my += v * (i / self.grid_w) as f64;
            mx += v * (i % self.grid_w) as f64;
        }
        my /= mass;
        mx /= mass;
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| v * (((i / self.grid_w) as f64 - my).powi(2) + ((i % self.grid_w) as f64 - mx).powi(2)))
            .sum::<f64>()
            / mass
    }
}

fn check_grids(vae: &FlatVae, grids: &[FeatureGrid]) -> Result<()> {
    if grids.is_empty() {
        return contract("analysis needs at least one grid");
    }
    let c = &vae.cfg;
    if let Some(g) = grids.iter().find(|g| (g.grid_h, g.grid_w, g.dim) != (c.grid_h, c.grid_w, c.feature_dim)) {
        return contract(format!(
            "grid {}x{}x{} does not match the model's {}x{}x{}",
            g.grid_h, g.grid_w, g.dim, c.grid_h, c.grid_w, c.feature_dim
        ));
    }
    Ok(())
}

/// Decodes `z: [n, T, d]` back to original feature units, `[n, P, D]`.
fn decode_raw(vae: &FlatVae, z: &Tensor) -> Result<Vec<f64>> {
    let y = vae.decode_standardized(z)?;
    Ok(vae.norm.invert(y.data()))
}

fn accumulate_patch_l2(base: &[f64], other: &[f64], dim: usize, out: &mut [f64]) {
    let patches = out.len();
    for (i, (a, b)) in base.chunks_exact(dim).zip(other.chunks_exact(dim)).enumerate() {
        out[i % patches] += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    }
}

fn zero_token(z: &Tensor, token: usize) -> Tensor {
    let (t, d) = (z.shape()[1], z.shape()[2]);
    let mut out = z.clone();
    for row in out.data_mut().chunks_exact_mut(t * d) {
        row[token * d..(token + 1) * d].iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

/// Heatmaps for the given tokens, sharing one encode and one clean decode.
pub fn ablation_heatmaps(vae: &FlatVae, grids: &[FeatureGrid], tokens: &[usize]) -> Result<Vec<AblationHeatmap>> {
    check_grids(vae, grids)?;
    let c = &vae.cfg;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= c.tokens) {
        return contract(format!("token index {bad} outside 0..{}", c.tokens));
    }
    let z = vae.encode_means(grids)?;
    let base = decode_raw(vae, &z)?;
    let n = grids.len() as f64;
    tokens
        .iter()
        .map(|&token| {
            let ablated = decode_raw(vae, &zero_token(&z, token))?;
            let mut values = vec![0.0; c.patches()];
            accumulate_patch_l2(&base, &ablated, c.feature_dim, &mut values);
            values.iter_mut().for_each(|v| *v /= n);
            Ok(AblationHeatmap {
                token,
                grid_h: c.grid_h,
                grid_w: c.grid_w,
                values,
                samples: grids.len(),
            })
        })
        .collect()
}

pub fn token_ablation(vae: &FlatVae, grids: &[FeatureGrid], token: usize) -> Result<AblationHeatmap> {
    Ok(ablation_heatmaps(vae, grids, &[token])?.remove(0))
}

/// Pearson correlation between heatmaps computed on the first and second
/// halves of `grids`, one value per token. Values near 1 mean the sample
/// size is large enough for a stable heatmap.
pub fn split_half_correlation(vae: &FlatVae, grids: &[FeatureGrid]) -> Result<Vec<f64>> {
    if grids.len() < 2 {
        return contract("split-half diagnostic needs at least two grids");
    }
    let (a, b) = grids.split_at(grids.len() / 2);
    let tokens: Vec<usize> = (0..vae.cfg.tokens).collect();
    let ha = ablation_heatmaps(vae, a, &tokens)?;
    let hb = ablation_heatmaps(vae, b, &tokens)?;
    Ok(ha.iter().zip(&hb).map(|(x, y)| pearson(&x.values, &y.values)).collect())
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaReport {
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub dims_for_threshold: usize,
    pub threshold: f64,
    pub compression_ratio: f64,
}

impl PcaReport {
    /// Fraction of total variance kept by the leading `r` components.
    pub fn retained(&self, r: usize) -> f64 {
        let total: f64 = self.eigenvalues.iter().sum();
        self.eigenvalues.iter().take(r).sum::<f64>() / total
    }
}

/// PCA of the rows of `features: [N, D]`: the smallest `r` whose leading
/// components explain at least `threshold` of the variance, and `D / r`.
pub fn pca_compressibility(features: &Tensor, threshold: f64) -> Result<PcaReport> {
    if features.rank() != 2 || features.shape()[0] < 2 || features.shape()[1] == 0 {
        return contract(format!("PCA needs an [N >= 2, D >= 1] matrix, got {:?}", features.shape()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return contract(format!("variance threshold must lie in (0, 1], got {threshold}"));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let mut mean = vec![0.0; d];
    for row in features.data().chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centred = vec![0.0; d];
    for row in features.data().chunks_exact(d) {
        centred.iter_mut().zip(row.iter().zip(&mean)).for_each(|(c, (v, m))| *c = v - m);
        for i in 0..d {
            let ci = centred[i];
            for j in i..d {
                cov[(i, j)] += ci * centred[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return contract("features have zero variance");
    }
    let mut cum = 0.0;
    let mut r = d;
    for (i, v) in eigenvalues.iter().enumerate() {
        cum += v;
        if cum / total >= threshold {
            r = i + 1;
            break;
        }
    }
    Ok(PcaReport {
        eigenvalues,
        dims_for_threshold: r,
        threshold,
        compression_ratio: d as f64 / r as f64,
    })
}

/// All patch vectors of `grids` stacked as rows.
pub fn patch_matrix(grids: &[FeatureGrid]) -> Result<Tensor> {
    let Some(first) = grids.first() else {
        return contract("no grids given");
    };
    let d = first.dim;
    if grids.iter().any(|g| g.dim != d) {
        return contract("grids disagree on feature dimension");
    }
    let data: Vec<f64> = grids.iter().flat_map(|g| g.features.iter().map(|&v| v as f64)).collect();
    Ok(Tensor::new([data.len() / d, d], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityBin {
    pub distance: usize,
    pub mean: f64,
    pub count: u64,
}

/// Mean cosine similarity of patch pairs by rounded Euclidean distance.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityCurve {
    pub bins: Vec<SimilarityBin>,
}

impl SimilarityCurve {
    pub fn get(&self, distance: usize) -> Option<&SimilarityBin> {
        self.bins.iter().find(|b| b.distance == distance)
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

/// Every unordered pair of patches in every grid, self-pairs included,
/// keyed by Euclidean distance rounded to the nearest patch unit. Self-pairs
/// count as similarity exactly 1.
pub fn spatial_similarity(grids: &[FeatureGrid]) -> Result<SimilarityCurve> {
    let Some(first) = grids.first() else {
        return contract("no grids given");
    };
    let (h, w) = (first.grid_h, first.grid_w);
    if grids.iter().any(|g| (g.grid_h, g.grid_w) != (h, w)) {
        return contract("grids disagree on geometry");
    }
    let max_bin = (((h - 1).pow(2) + (w - 1).pow(2)) as f64).sqrt().round() as usize;
    let mut sums = vec![0.0; max_bin + 1];
    let mut counts = vec![0u64; max_bin + 1];
    let p = h * w;
    let bin_of: Vec<usize> = (0..p * p)
        .map(|k| {
            let (i, j) = (k / p, k % p);
            let dy = (i / w) as f64 - (j / w) as f64;
            let dx = (i % w) as f64 - (j % w) as f64;
            (dy * dy + dx * dx).sqrt().round() as usize
        })
        .collect();
    for g in grids {
        for i in 0..p {
            sums[0] += 1.0;
            counts[0] += 1;
            for j in i + 1..p {
                let b = bin_of[i * p + j];
                sums[b] += cosine(g.patch(i), g.patch(j));
                counts[b] += 1;
            }
        }
    }
    let bins = sums
        .iter()
        .zip(&counts)
        .enumerate()
        .filter(|(_, (_, &c))| c > 0)
        .map(|(distance, (s, &count))| SimilarityBin {
            distance,
            mean: s / count as f64,
            count,
        })
        .collect();
    Ok(SimilarityCurve { bins })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSweep {
    /// `(σ, mean squared error)` with σ ascending.
    pub points: Vec<(f64, f64)>,
    pub draws: usize,
}

/// Mean per-element squared error between reconstructions of `z` and the
/// standardised `grids`, accumulated exactly as [`FlatVae::evaluate`] does.
fn recon_error(vae: &FlatVae, grids: &[FeatureGrid], z: &Tensor) -> Result<f64> {
    let per_grid = (vae.cfg.patches() * vae.cfg.feature_dim) as f64;
    let y = vae.decode_standardized(z)?;
    let per = vae.cfg.patches() * vae.cfg.feature_dim;
    let mut total = 0.0;
    for (ci, chunk) in grids.chunks(crate::flatvae::EVAL_CHUNK).enumerate() {
        let refs: Vec<&FeatureGrid> = chunk.iter().collect();
        let x = vae.batch_tensor(&refs)?;
        let start = ci * crate::flatvae::EVAL_CHUNK * per;
        let se: f64 = y.data()[start..start + x.len()].iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += se / per_grid;
    }
    Ok(total / grids.len() as f64)
}

/// Reconstruction error after perturbing posterior means by `σ ε`, averaged
/// over `draws` independent noise draws per σ.
pub fn noise_sweep(vae: &FlatVae, grids: &[FeatureGrid], sigmas: &[f64], draws: usize, rng: &RngStream) -> Result<NoiseSweep> {
    check_grids(vae, grids)?;
    if sigmas.windows(2).any(|w| !(w[0] < w[1])) || sigmas.first() != Some(&0.0) || sigmas.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return contract(format!("sigma grid must be strictly ascending within [0, 1] and start at 0, got {sigmas:?}"));
    }
    if draws < 4 {
        return contract(format!("noise sweep needs at least 4 draws, got {draws}"));
    }
    let z = vae.encode_means(grids)?;
    let mut points = Vec::with_capacity(sigmas.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        if sigma == 0.0 {
            points.push((sigma, recon_error(vae, grids, &z)?));
            continue;
        }
        let mut acc = 0.0;
        for draw in 0..draws {
            let mut r = rng.fork(si as u64).fork(draw as u64);
            let noisy: Vec<f64> = z.data().iter().map(|m| m + sigma * r.normal()).collect();
            acc += recon_error(vae, grids, &Tensor::new(z.shape().to_vec(), noisy)?)?;
        }
        points.push((sigma, acc / draws as f64));
    }
    Ok(NoiseSweep { points, draws })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnReport {
    pub k: usize,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Mean over the middle axis of `[n, s, c]` (rank 2 passes through), then
/// unit L2 norm per row. Zero rows stay zero.
fn pooled_unit_rows(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, s, c) = match x.shape() {
        &[n, c] => (n, 1, c),
        &[n, s, c] => (n, s, c),
        other => return contract(format!("k-NN features must be [n, c] or [n, s, c], got {other:?}")),
    };
    if n == 0 || s == 0 || c == 0 {
        return contract("k-NN feature set is empty");
    }
    Ok(x.data()
        .chunks_exact(s * c)
        .map(|sample| {
            let mut row = vec![0.0; c];
            for tok in sample.chunks_exact(c) {
                row.iter_mut().zip(tok).for_each(|(r, v)| *r += v);
            }
            row.iter_mut().for_each(|r| *r /= s as f64);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|r| *r /= norm);
            }
            row
        })
        .collect())
}

/// Cosine k-NN with majority vote; a tied vote goes to the class whose
/// voters have the smallest summed distance, then the smallest label.
pub fn knn_eval(train: &Tensor, train_labels: &[usize], val: &Tensor, val_labels: &[usize], k: usize) -> Result<KnnReport> {
    let tr = pooled_unit_rows(train)?;
    let va = pooled_unit_rows(val)?;
    if tr.len() != train_labels.len() || va.len() != val_labels.len() {
        return contract("k-NN label count does not match feature count");
    }
    if k == 0 || k > tr.len() {
        return contract(format!("k must lie in 1..={}, got {k}", tr.len()));
    }
    if tr[0].len() != va[0].len() {
        return contract("train and val feature widths differ");
    }
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut predictions = Vec::with_capacity(va.len());
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(tr.len());
    for q in &va {
        dists.clear();
        dists.extend(tr.iter().enumerate().map(|(i, r)| (1.0 - r.iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), i)));
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![(0usize, 0.0f64); classes];
        for &(d, i) in &dists[..k] {
            let v = &mut votes[train_labels[i]];
            v.0 += 1;
            v.1 += d;
        }
        let best = (0..classes)
            .filter(|&c| votes[c].0 > 0)
            .min_by(|&a, &b| votes[b].0.cmp(&votes[a].0).then(votes[a].1.total_cmp(&votes[b].1)).then(a.cmp(&b)))
            .expect("k >= 1 gives at least one vote");
        predictions.push(best);
    }
    let correct = predictions.iter().zip(val_labels).filter(|(p, l)| p == l).count();
    Ok(KnnReport {
        k,
        accuracy: correct as f64 / va.len() as f64,
        predictions,
    })
}

/// Nearest class mean over mean-pooled features, Euclidean.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidClassifier {
    pub centroids: Vec<Vec<f64>>,
}

impl CentroidClassifier {
    pub fn fit(grids: &[FeatureGrid]) -> Result<Self> {
        let Some(first) = grids.first() else {
            return contract("centroid classifier needs at least one grid");
        };
        let dim = first.dim;
        let classes = grids.iter().map(|g| g.class_id as usize + 1).max().unwrap_or(0);
        let mut sums = vec![vec![0.0; dim]; classes];
        let mut counts = vec![0usize; classes];
        for g in grids {
            if g.dim != dim {
                return contract("grids disagree on feature width");
            }
            let c = g.class_id as usize;
            sums[c].iter_mut().zip(g.mean_pool()).for_each(|(s, v)| *s += v);
            counts[c] += 1;
        }
        if counts.contains(&0) {
            return contract("every class below the largest label needs a grid");
        }
        for (s, &n) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(Self { centroids: sums })
    }

    pub fn predict(&self, grid: &FeatureGrid) -> usize {
        let f = grid.mean_pool();
        let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        (0..self.centroids.len())
            .min_by(|&a, &b| dist(&self.centroids[a]).total_cmp(&dist(&self.centroids[b])))
            .expect("at least one centroid")
    }

    /// Fraction of grids whose prediction equals `labels[i]`.
    pub fn accuracy(&self, grids: &[FeatureGrid], labels: &[usize]) -> Result<f64> {
        if grids.is_empty() || grids.len() != labels.len() {
            return contract("accuracy needs one label per grid");
        }
        let hits = grids.iter().zip(labels).filter(|(g, &l)| self.predict(g) == l).count();
        Ok(hits as f64 / grids.len() as f64)
    }
}

/// Mean pairwise Euclidean distance between mean-pooled features.
pub fn pooled_diversity(grids: &[FeatureGrid]) -> f64 {
    let pooled: Vec<Vec<f64>> = grids.iter().map(|g| g.mean_pool()).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            total += pooled[i].iter().zip(&pooled[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Decodes `[n, T, d]` latents (VAE scale) back to feature grids tagged
/// with `labels`.
pub fn decode_latents(vae: &FlatVae, z: &Tensor, labels: &[usize]) -> Result<Vec<FeatureGrid>> {
    let &[n, t, d] = z.shape() else {
        return contract(format!("latents must be [n, T, d], got {:?}", z.shape()));
    };
    if n != labels.len() {
        return contract("one label per latent");
    }
    if t != vae.cfg.tokens || d != vae.cfg.latent_dim {
        return contract(format!("latents [{t}, {d}] do not match the VAE"));
    }
    let (gh, gw, f) = (vae.cfg.grid_h, vae.cfg.grid_w, vae.cfg.feature_dim);
    let mut out = Vec::with_capacity(n);
    for (chunk, ls) in z.data().chunks(EVAL_CHUNK * t * d).zip(labels.chunks(EVAL_CHUNK)) {
        let y = vae.decode_standardized(&Tensor::new(vec![ls.len(), t, d], chunk.to_vec())?)?;
        for (row, &l) in y.data().chunks_exact(gh * gw * f).zip(ls) {
            let raw = vae.norm.invert(row);
            out.push(FeatureGrid::new(gh, gw, f, raw.into_iter().map(|v| v as f32).collect(), l as u32)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, d: usize, f: impl Fn(usize, usize) -> f32) -> FeatureGrid {
        let features = (0..h * w * d).map(|i| f(i / d, i % d)).collect();
        FeatureGrid::new(h, w, d, features, 0).unwrap()
    }

    #[test]
    fn pca_rank_one() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![1.0 + i as f64, 2.0 + 2.0 * i as f64, 3.0 - i as f64, 0.5]).collect();
        let r = pca_compressibility(&Tensor::from_rows(&rows).unwrap(), 0.95).unwrap();
        assert_eq!(r.dims_for_threshold, 1);
        assert_eq!(r.compression_ratio, 4.0);
        assert!(r.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pca_isotropic() {
        let mut rng = RngStream::new(3);
        let x = Tensor::new([100_000, 20], rng.normal_vec(2_000_000)).unwrap();
        let r = pca_compressibility(&x, 0.95).unwrap();
        assert!((18..=20).contains(&r.dims_for_threshold), "{}", r.dims_for_threshold);
        assert!(r.retained(r.dims_for_threshold) >= 0.95);
        assert!(r.retained(r.dims_for_threshold - 1) < 0.95);
    }

    #[test]
    fn pca_rejects_degenerate_input() {
        assert!(pca_compressibility(&Tensor::zeros([1, 3]), 0.95).is_err());
        assert!(pca_compressibility(&Tensor::zeros([5, 3]), 0.95).is_err());
    }

    #[test]
    fn identical_patches_are_fully_similar() {
        let g = grid(4, 4, 3, |_, k| [1.0, -2.0, 0.5][k]);
        let c = spatial_similarity(&[g]).unwrap();
        for b in &c.bins {
            assert!((b.mean - 1.0).abs() < 1e-12);
        }
        assert_eq!(c.bins.last().unwrap().distance, 4);
    }

    #[test]
    fn orthogonal_patches_have_zero_similarity() {
        let g = grid(3, 3, 9, |p, k| if p == k { 1.0 } else { 0.0 });
        let c = spatial_similarity(&[g]).unwrap();
        assert_eq!(c.bins[0].mean, 1.0);
        assert_eq!(c.bins[0].count, 9);
        assert!(c.bins[1..].iter().all(|b| b.mean == 0.0));
        assert_eq!(c.bins.iter().map(|b| b.count).sum::<u64>(), 45);
    }

    #[test]
    fn knn_duplicate_point_and_ties() {
        let train = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.7, 0.7]]).unwrap();
        let val = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let r = knn_eval(&train, &[0, 1, 2], &val, &[1], 1).unwrap();
        assert_eq!(r.predictions, vec![1]);
        // One vote each for labels 1 and 2: label 1 is closer.
        let r = knn_eval(&train, &[0, 1, 2], &val, &[1], 2).unwrap();
        assert_eq!(r.predictions, vec![1]);
        assert!(knn_eval(&train, &[0, 1, 2], &Tensor::zeros([0, 2]), &[], 1).is_err());
        assert!(knn_eval(&train, &[0, 1, 2], &val, &[1], 4).is_err());
    }

    #[test]
    fn knn_separated_clusters() {
        let mut rng = RngStream::new(8);
        let mut make = |n: usize| {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let l = i % 2;
                let c = if l == 0 { [5.0, 0.0, 1.0] } else { [0.0, 5.0, 1.0] };
                rows.push(c.iter().map(|v| v + 0.3 * rng.normal()).collect::<Vec<_>>());
                labels.push(l);
            }
            (Tensor::from_rows(&rows).unwrap(), labels)
        };
        let (tr, tl) = make(100);
        let (va, vl) = make(40);
        assert_eq!(knn_eval(&tr, &tl, &va, &vl, 5).unwrap().accuracy, 1.0);
    }

    #[test]
    fn pooling_averages_tokens() {
        let x = Tensor::new([1, 2, 2], vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        assert_eq!(pooled_unit_rows(&x).unwrap(), vec![vec![1.0, 0.0]]);
    }

    #[test]
    fn locality_of_point_and_spread_maps() {
        let point = AblationHeatmap {
            token: 0,
            grid_h: 3,
            grid_w: 3,
            values: vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0],
            samples: 1,
        };
        assert_eq!(point.locality(), 0.0);
        let flat = AblationHeatmap {
            values: vec![1.0; 9],
            ..point.clone()
        };
        assert!((flat.locality() - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), 0.0);
    }
    fn small_vae() -> (FlatVae, Vec<FeatureGrid>) {
        use crate::flatvae::{Normalizer, VaeConfig};
        use crate::synthdata::{build_dataset, SynthConfig};
        let synth = SynthConfig {
            image_size: 16,
            ..Default::default()
        };
        let ds = build_dataset(&synth, 4, 5, 16, 0).unwrap();
        let cfg = VaeConfig {
            grid_h: 4,
            grid_w: 4,
            tokens: 4,
            latent_dim: 3,
            width: 16,
            heads: 2,
            encoder_depth: 1,
            decoder_depth: 1,
            ..Default::default()
        };
        let mut vae = FlatVae::new(&cfg, &mut RngStream::new(6)).unwrap();
        vae.norm = Normalizer::fit(&ds.train).unwrap();
        (vae, ds.train)
    }

    fn brute_force(vae: &FlatVae, grids: &[FeatureGrid], token: usize) -> Vec<f64> {
        let c = &vae.cfg;
        let mut out = vec![0.0; c.patches()];
        for g in grids {
            let mu = vae.encode(g).unwrap().mu;
            let z = mu.clone().reshape([1, c.tokens, c.latent_dim]).unwrap();
            let mut za = z.clone();
            for v in &mut za.data_mut()[token * c.latent_dim..(token + 1) * c.latent_dim] {
                *v = 0.0;
            }
            let a = vae.norm.invert(vae.decode_standardized(&z).unwrap().data());
            let b = vae.norm.invert(vae.decode_standardized(&za).unwrap().data());
            for p in 0..c.patches() {
                let r = p * c.feature_dim..(p + 1) * c.feature_dim;
                out[p] += a[r.clone()].iter().zip(&b[r]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            }
        }
        out.iter().map(|v| v / grids.len() as f64).collect()
    }

    #[test]
    fn ablation_matches_brute_force() {
        let (vae, grids) = small_vae();
        for token in 0..vae.cfg.tokens {
            let h = token_ablation(&vae, &grids, token).unwrap();
            let b = brute_force(&vae, &grids, token);
            assert_eq!(h.samples, 16);
            assert!(h.values.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-10));
            assert!(h.mass() > 0.0);
            let one = token_ablation(&vae, &grids[..1], token).unwrap();
            let b1 = brute_force(&vae, &grids[..1], token);
            assert!(one.values.iter().zip(&b1).all(|(x, y)| (x - y).abs() < 1e-10));
        }
        assert!(matches!(token_ablation(&vae, &grids, 4), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn ignored_latent_gives_empty_heatmap() {
        let (mut vae, grids) = small_vae();
        let w = vae.dec_in.weight;
        vae.store.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let h = token_ablation(&vae, &grids, 2).unwrap();
        assert!(h.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_sweep_baseline_is_exact() {
        let (vae, grids) = small_vae();
        let s = noise_sweep(&vae, &grids, &[0.0, 0.5, 1.0], 4, &RngStream::new(1)).unwrap();
        assert_eq!(s.points[0].1, vae.evaluate(&grids).unwrap().0);
        assert!(noise_sweep(&vae, &grids, &[0.1, 0.5], 4, &RngStream::new(1)).is_err());
        assert!(noise_sweep(&vae, &grids, &[0.0, 0.5], 3, &RngStream::new(1)).is_err());
        let again = noise_sweep(&vae, &grids, &[0.0, 0.5, 1.0], 4, &RngStream::new(1)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn centroids_separate_shifted_clusters() {
        let grids: Vec<FeatureGrid> = (0..12)
            .map(|i| {
                let c = i % 3;
                let features = (0..4 * 2).map(|k| c as f32 * 2.0 + (i as f32 * 0.01) + k as f32 * 0.0).collect();
                FeatureGrid::new(2, 2, 2, features, c as u32).unwrap()
            })
            .collect();
        let clf = CentroidClassifier::fit(&grids).unwrap();
        let labels: Vec<usize> = grids.iter().map(|g| g.class_id as usize).collect();
        assert_eq!(clf.accuracy(&grids, &labels).unwrap(), 1.0);
        assert!(pooled_diversity(&grids) > 0.0);
        assert_eq!(pooled_diversity(&grids[..1]), 0.0);
    }
}
