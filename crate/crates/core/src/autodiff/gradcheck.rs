//! Central-difference verification of analytic gradients.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Step used for every central difference.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1e-8, |analytic| + |numeric|)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<(Graph, Var)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    Ok((g, loss))
}

/// Compares backward-pass gradients of `f` against central differences
/// with step [`FD_STEP`] for every coordinate of every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let (graph, loss) = evaluate(&f, store)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    graph.backward_into(loss, &mut analytic)?;

    let mut probe = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for id in store.ids() {
        for i in 0..store.value(id).len() {
            let numeric = central_difference(&f, &mut probe, id, i)?;
            let a = analytic.grad(id).data()[i];
            if !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "analytic gradient of {}[{i}] (parameter {})",
                    store.name(id),
                    id.index()
                )));
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

fn central_difference<F>(f: &F, probe: &mut ParamStore, id: ParamId, i: usize) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let x0 = probe.value(id).data()[i];
    let mut at = |x: f64| -> Result<f64> {
        probe.value_mut(id).data_mut()[i] = x;
        let (g, loss) = evaluate(f, probe)?;
        Ok(g.value(loss).item())
    };
    let plus = at(x0 + FD_STEP)?;
    let minus = at(x0 - FD_STEP)?;
    probe.value_mut(id).data_mut()[i] = x0;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFinite(format!(
            "perturbed loss at {}[{i}] (parameter {})",
            probe.name(id),
            id.index()
        )));
    }
    Ok((plus - minus) / (2.0 * FD_STEP))
}

/// Grad check for a function of plain input tensors.
pub fn grad_check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> =
        inputs.iter().enumerate().map(|(i, t)| store.add(format!("input{i}"), t.clone())).collect();
    grad_check(&store, |g, s| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        f(g, &vars)
    })
}
