//! Central finite-difference gradient checks in `f64`.

use crate::error::{invalid, Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite { op: "grad_check" })
    }
}

fn eval_scalar(g: &Graph<f64>, y: Var) -> Result<f64> {
    if g.value(y).len() != 1 {
        return Err(TensorError::NotScalar(g.shape(y).to_vec()));
    }
    finite(g.scalar(y))
}

/// Compares the analytic gradient of `f` at `point` against central
/// differences with the given `step`. Returns the largest
/// `|a - n| / max(1, |a|, |n|)` over all components.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(invalid("grad_check", "step must be positive"));
    }
    let mut g = Graph::new();
    let x = g.input_grad(point.clone())?;
    let y = f(&mut g, x)?;
    eval_scalar(&g, y)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .map(|v| v.to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let eval_at = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(p)?;
        let y = f(&mut g, x)?;
        eval_scalar(&g, y)
    };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let num = (eval_at(plus)? - eval_at(minus)?) / (2.0 * step);
        worst = worst.max(rel_err(a, num));
    }
    Ok(worst)
}

/// Finite-difference check over parameters of a store. `f` builds the loss on
/// a fresh graph that loads parameters with [`Graph::param`]. At most
/// `max_components` evenly spaced entries of each parameter are probed.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    max_components: usize,
    step: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(invalid("grad_check", "step must be positive"));
    }
    let mut g = Graph::new();
    let y = f(&mut g)?;
    eval_scalar(&g, y)?;
    g.backward(y)?;

    let base = |id: ParamId| -> Vec<f64> { store.get(id).data.iter().map(|&v| v as f64).collect() };
    let mut worst = 0.0f64;
    for &id in ids {
        let n = store.get(id).data.len();
        let analytic = g
            .param_grad(id)
            .map(|v| v.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let count = n.min(max_components.max(1));
        for c in 0..count {
            let i = c * n / count;
            let eval = |delta: f64| -> Result<f64> {
                let mut vals = base(id);
                vals[i] += delta;
                let mut g = Graph::new();
                g.override_param(id, vals);
                let y = f(&mut g)?;
                eval_scalar(&g, y)
            };
            let num = (eval(step)? - eval(-step)?) / (2.0 * step);
            worst = worst.max(rel_err(analytic[i], num));
        }
    }
    Ok(worst)
}
