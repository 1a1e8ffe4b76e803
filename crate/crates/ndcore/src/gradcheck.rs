//! Central finite-difference check of tape gradients.

use crate::error::{NdError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Max over all coordinates of `|analytic - numeric| / max(1, |analytic|)`
/// for a scalar function of several tensor inputs.
pub fn grad_check_many<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        let y = g.value(out).item()?;
        if !y.is_finite() {
            return Err(NdError::Numeric("function value is not finite".into()));
        }
        Ok(y)
    };

    let mut work: Vec<Tensor> = points.to_vec();
    let mut worst = 0.0_f64;
    for (which, grads) in analytic.iter().enumerate() {
        for i in 0..grads.len() {
            let x0 = points[which].data()[i];
            work[which].data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work[which].data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work[which].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (grads[i] - numeric).abs() / grads[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Same measure as [`grad_check_many`], taken over every parameter of a
/// store. `f` must be deterministic in the parameters.
pub fn grad_check_params<F>(f: F, store: &mut ParamStore, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let grads = g.param_grads(store);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        let y = g.value(out).item()?;
        if !y.is_finite() {
            return Err(NdError::Numeric("function value is not finite".into()));
        }
        Ok(y)
    };

    let mut worst = 0.0_f64;
    for id in store.ids().collect::<Vec<_>>() {
        for i in 0..store.get(id).len() {
            let x0 = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = x0 + h;
            let fp = eval(store)?;
            store.get_mut(id).data_mut()[i] = x0 - h;
            let fm = eval(store)?;
            store.get_mut(id).data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grads.get(id)[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(point), h)
}
