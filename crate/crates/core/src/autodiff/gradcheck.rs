//! Central finite-difference verification of tape gradients.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares the tape gradient of the scalar `f(x)` at `point` against central
/// differences with the given step and returns the worst relative error.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone())?;
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p)?;
        let y = f(&mut g, x)?;
        Ok(g.scalar(y))
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Gradient magnitude below which [`grad_check_params`] compares absolutely;
/// finite-difference noise through a deep graph is of this order.
pub const PARAM_FLOOR: f64 = 1e-5;

/// Finite-difference check over every scalar of every parameter in `store`.
/// Returns the worst relative error and the parameter it occurred in.
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64) -> Result<(f64, String)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    let grads = g.backward(y)?;
    let analytic = g.param_grads(&grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let y = f(&mut g, s)?;
        Ok(g.scalar(y))
    };
    let mut worst = (0.0f64, String::new());
    let mut probe = store.clone();
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let n = store.get(&name).map_or(0, Tensor::len);
        for i in 0..n {
            let orig = store.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let fp = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let fm = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            let e = (a - numeric).abs() / a.abs().max(numeric.abs()).max(PARAM_FLOOR);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}] analytic={a:e} numeric={numeric:e}"));
            }
        }
    }
    Ok(worst)
}
