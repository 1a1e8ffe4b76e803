use flatdino::analysis::{knn_eval, spatial_similarity};
use flatdino::synthdata::{build_dataset, FeatureGrid, SynthConfig};
use ndcore::Tensor;

fn pooled(grids: &[FeatureGrid]) -> (Tensor, Vec<usize>) {
    let rows: Vec<Vec<f64>> = grids.iter().map(|g| g.mean_pool()).collect();
    (Tensor::from_rows(&rows).unwrap(), grids.iter().map(|g| g.class_id as usize).collect())
}

#[test]
fn classes_are_recoverable_by_knn() {
    let ds = build_dataset(&SynthConfig::default(), 11, 12, 500, 100).unwrap();
    let (tr, tl) = pooled(&ds.train);
    let (va, vl) = pooled(&ds.val);
    let r = knn_eval(&tr, &tl, &va, &vl, 5).unwrap();
    assert!(r.accuracy > 0.95, "{}", r.accuracy);
}

#[test]
fn similarity_decays_with_distance() {
    let ds = build_dataset(&SynthConfig::default(), 13, 12, 1000, 0).unwrap();
    let curve = spatial_similarity(&ds.train).unwrap();
    assert_eq!(curve.bins[0].mean, 1.0);
    let at = |d: usize| curve.get(d).unwrap().mean;
    let far: Vec<f64> = curve.bins.iter().filter(|b| b.distance >= 4).map(|b| b.mean).collect();
    assert!(far.iter().all(|&f| at(1) > f), "{curve:?}");
    for d in 1..=4 {
        assert!(at(d) <= at(d - 1) + 0.02, "{curve:?}");
    }
}
