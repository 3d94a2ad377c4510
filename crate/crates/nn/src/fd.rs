//! Central finite differences over store parameters.
//!
//! Used by gradient-correctness tests as the independent oracle: it only
//! ever calls the forward evaluation closure, never the backward kernels.

use crate::params::{ParamId, ParamStore};

/// `d loss / d store[id][idx]` by central differences with step `h`.
pub fn central_difference(
    store: &mut ParamStore,
    id: ParamId,
    idx: usize,
    h: f64,
    eval: &mut dyn FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.entry(id).data[idx];
    store.entry_mut(id).data[idx] = orig + h;
    let fp = eval(store);
    store.entry_mut(id).data[idx] = orig - h;
    let fm = eval(store);
    store.entry_mut(id).data[idx] = orig;
    (fp - fm) / (2.0 * h)
}

/// Relative error between an analytic and a numeric derivative. The
/// denominator saturates at 1e-6 so matching near-zero slopes pass.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}
