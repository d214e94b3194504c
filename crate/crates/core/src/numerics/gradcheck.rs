//! Central finite-difference checks of analytic parameter gradients.

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Var};

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Denominator floor of the relative error; below it the check is absolute.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares backward-pass gradients with `(f(θ+h) − f(θ−h)) / 2h` for every
/// entry of every parameter in `which` (all parameters when `None`).
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    which: Option<&[ParamId]>,
    h: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss)?;
    let analytic = g.param_grads(store.len());
    drop(g);

    let ids: Vec<ParamId> = match which {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.scalar(l))
    };

    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for id in ids {
        let n = store.get(id).numel();
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            let err = rel_err(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), i, a, numeric));
            }
        }
    }
    Ok(report)
}
