//! Central finite-difference checks of tape gradients.

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name, flat index, analytic and numeric value of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a floor on the denominator so that entries whose true
/// gradient is ~0 are judged on absolute agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of the scalar built by `f` with central
/// differences of step `h`, for every scalar entry of the listed parameters.
pub fn check_gradients<F>(store: &mut ParamStore, ids: &[ParamId], h: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss);
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let l = f(&mut g, store);
        g.scalar(l)
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for &id in ids {
        let n = store.get(id).len();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| crate::autograd::Tensor::zeros(store.get(id).raw_dim()));
        let analytic = analytic.as_standard_layout().into_owned();
        for k in 0..n {
            let orig = flat(store, id)[k];
            flat(store, id)[k] = orig + h;
            let fp = eval(store);
            flat(store, id)[k] = orig - h;
            let fm = eval(store);
            flat(store, id)[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice().expect("standard layout")[k];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((store.name(id).to_string(), k, a, numeric));
            }
        }
    }
    report
}

fn flat(store: &mut ParamStore, id: ParamId) -> &mut [f64] {
    store
        .get_mut(id)
        .as_slice_mut()
        .expect("parameters are stored in standard layout")
}
