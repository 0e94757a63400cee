//! Central finite-difference checks for [`Graph`] gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Relative error used by every check: `|analytic − numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar_of(graph: &Graph, v: Var) -> Result<f64> {
    graph.value(v).item()
}

/// Maximum relative error between the reverse-mode gradient of `f` at
/// `point` and central differences with the given `step`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let x = graph.input(point.clone());
    let y = f(&mut graph, x)?;
    let analytic = graph.backward(y)?.wrt(&graph, x);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };
    let mut worst = 0.0_f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    if worst.is_nan() {
        return Err(Error::numerical("gradient check produced NaN"));
    }
    Ok(worst)
}

/// Same as [`grad_check`] but differentiates with respect to the listed
/// parameters of `store`. `f` must be deterministic given the store.
pub fn grad_check_params<F>(f: F, store: &ParamStore, ids: &[String], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut graph = Graph::new();
    let y = f(&mut graph, store)?;
    let grads = graph.backward(y)?;

    let mut probe = store.clone();
    let mut worst = 0.0_f64;
    for id in ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| {
            Tensor::zeros(
                store
                    .get(id)
                    .map(|t| t.shape().to_vec())
                    .unwrap_or_default(),
            )
        });
        let n = store.get(id)?.len();
        for i in 0..n {
            let orig = probe.get(id)?.data()[i];
            let at = |v: f64, probe: &mut ParamStore| -> Result<f64> {
                probe.get_mut(id)?.data_mut()[i] = v;
                let mut g = Graph::new();
                let y = f(&mut g, probe)?;
                scalar_of(&g, y)
            };
            let up = at(orig + step, &mut probe)?;
            let down = at(orig - step, &mut probe)?;
            probe.get_mut(id)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    if worst.is_nan() {
        return Err(Error::numerical("gradient check produced NaN"));
    }
    Ok(worst)
}
