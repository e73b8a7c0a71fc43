//! Finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub trainable: bool,
    pub checked: usize,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many evenly strided entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_param: None,
        }
    }
}

/// Compares reverse-mode gradients of the scalar built by `loss` against
/// central differences `(f(θ+ε) − f(θ−ε)) / 2ε`. Frozen parameters are
/// treated as constants: they are not perturbed and have no analytic
/// gradient, so both sides are reported as zero.
pub fn grad_check<L>(store: &ParamStore<f64>, opts: GradCheckOptions, loss: L) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::no_grad(s);
        let l = loss(&mut g)?;
        Ok(g.value(l).data()[0])
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        params: Vec::new(),
    };
    for id in store.ids() {
        let p = store.get(id);
        let mut check = ParamCheck {
            name: p.name.clone(),
            trainable: p.trainable,
            checked: 0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
            max_rel_error: 0.0,
        };
        if !p.trainable {
            report.params.push(check);
            continue;
        }
        let n = p.value.len();
        let stride = match opts.max_entries_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let numeric = central_difference(&mut work, id, i, opts.eps, &eval)?;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            check.checked += 1;
            check.max_abs_analytic = check.max_abs_analytic.max(a.abs());
            check.max_abs_numeric = check.max_abs_numeric.max(numeric.abs());
            check.max_rel_error = check.max_rel_error.max(rel);
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}

fn central_difference(
    work: &mut ParamStore<f64>,
    id: ParamId,
    i: usize,
    eps: f64,
    eval: &impl Fn(&ParamStore<f64>) -> Result<f64>,
) -> Result<f64> {
    let orig = work.get(id).value.data()[i];
    work.get_mut(id).value.data_mut()[i] = orig + eps;
    let plus = eval(work)?;
    work.get_mut(id).value.data_mut()[i] = orig - eps;
    let minus = eval(work)?;
    work.get_mut(id).value.data_mut()[i] = orig;
    Ok((plus - minus) / (2.0 * eps))
}
