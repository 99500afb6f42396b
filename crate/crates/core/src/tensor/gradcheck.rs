//! Central-difference gradient verification at f64.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `name[flat index]` of the worst coordinate.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn scalar_loss(g: &Graph<'_, f64>, v: Var) -> Result<f64> {
    g.value(v).item()
}

/// Compares reverse-mode gradients of a scalar function of the store's
/// parameters against central differences with step `eps`, over every
/// coordinate of every parameter.
pub fn check_param_gradients<F>(store: &ParamStore<f64>, f: F, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        g.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect();
        for (id, grad) in g.param_grads() {
            grads[id.index()].copy_from_slice(grad);
        }
        grads
    };

    let mut probe = store.clone();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(s);
        let loss = f(&mut g)?;
        scalar_loss(&g, loss)
    };
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for (i, &a) in analytic[id.index()].iter().enumerate() {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err;
                report.worst = format!("{}[{i}]", store.get(id).name);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    if report.checked == 0 {
        return Err(Error::contract(
            "gradient check over an empty parameter set",
        ));
    }
    Ok(report)
}

/// Maximum relative gradient error of `f` with respect to its input `x`.
pub fn check_gradients<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", x.clone())?;
    let report = check_param_gradients(
        &store,
        |g| {
            let v = g.param(id)?;
            f(g, v)
        },
        eps,
    )?;
    Ok(report.max_rel_err)
}
