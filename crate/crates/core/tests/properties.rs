use flatdino::analysis::{knn_eval, pca_compressibility, spatial_similarity};
use flatdino::costmodel::{layer_flops, LayerSpec};
use flatdino::flatvae::{beta_for, kl_divergence, LatentPosterior};
use flatdino::flowmatch::{time_shift, time_unshift};
use flatdino::synthdata::FeatureGrid;
use ndcore::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new([rows, cols], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_ignores_global_scale(
        train in prop::collection::vec(-1.0f64..1.0, 24 * 3),
        val in prop::collection::vec(-1.0f64..1.0, 6 * 3),
        scale in 1e-3f64..1e3,
        k in 1usize..6,
    ) {
        let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let val_labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let scaled = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<_>>();
        let a = knn_eval(&matrix(24, 3, train.clone()), &labels, &matrix(6, 3, val.clone()), &val_labels, k).unwrap();
        let b = knn_eval(&matrix(24, 3, scaled(&train)), &labels, &matrix(6, 3, scaled(&val)), &val_labels, k).unwrap();
        prop_assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn pca_reports_the_smallest_sufficient_rank(
        data in prop::collection::vec(-1.0f64..1.0, 40 * 6),
        threshold in 0.5f64..0.99,
    ) {
        let r = pca_compressibility(&matrix(40, 6, data), threshold).unwrap();
        prop_assert!(r.eigenvalues.iter().all(|&e| e >= 0.0));
        prop_assert!(r.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(r.dims_for_threshold >= 1 && r.dims_for_threshold <= 6);
        prop_assert!(r.retained(r.dims_for_threshold) >= threshold);
        prop_assert!(r.retained(r.dims_for_threshold - 1) < threshold);
    }

    #[test]
    fn self_similarity_is_one(
        feats in prop::collection::vec(0.1f32..1.0, 3 * 4 * 5),
    ) {
        let g = FeatureGrid::new(3, 4, 5, feats, 0).unwrap();
        let curve = spatial_similarity(&[g]).unwrap();
        prop_assert!((curve.get(0).unwrap().mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn beta_times_size_is_constant(t1 in 1usize..128, d1 in 1usize..128, t2 in 1usize..128, d2 in 1usize..128) {
        let a = beta_for(t1, d1, 1e-6, 512).unwrap() * (t1 * d1) as f64;
        let b = beta_for(t2, d2, 1e-6, 512).unwrap() * (t2 * d2) as f64;
        prop_assert!((a - b).abs() <= 1e-15 * a.abs());
    }

    #[test]
    fn kl_is_non_negative(
        mu in prop::collection::vec(-3.0f64..3.0, 8),
        logvar in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let post = LatentPosterior::new(matrix(2, 4, mu), matrix(2, 4, logvar)).unwrap();
        prop_assert!(kl_divergence(&post) >= 0.0);
    }

    #[test]
    fn time_shift_is_monotone_and_below_identity(a in 0.0f64..=1.0, b in 0.0f64..=1.0, kappa in 1.0f64..10.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (sl, sh) = (time_shift(lo, kappa).unwrap(), time_shift(hi, kappa).unwrap());
        prop_assert!(sl <= sh);
        if lo < hi {
            prop_assert!(sl < sh);
        }
        prop_assert!(sl <= lo + 1e-15);
        prop_assert!((time_unshift(sl, kappa).unwrap() - lo).abs() < 1e-12);
    }

    #[test]
    fn layer_flops_scale_linearly_with_batch(s in 1u64..1024, d in 1u64..4096, b in 1u64..64) {
        let one = layer_flops(&LayerSpec::new(s, d)).unwrap();
        let many = layer_flops(&LayerSpec { seq_len: s, hidden_dim: d, batch: b }).unwrap();
        prop_assert_eq!(many.total_flops, b * one.total_flops);
        prop_assert_eq!(one.total_flops, 2 * s * d * (6 * d + s));
    }
}
