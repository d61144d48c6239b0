//! Finite-difference gradient verification utilities.
//!
//! Central differences in `f64`: truncation error is O(eps^2) and roundoff
//! is O(ulp/eps), so `eps = 1e-5` keeps both far below the 1e-4 relative
//! tolerances asserted by the test suites.

use ndarray::ArrayD;

pub const FD_EPS: f64 = 1e-5;

/// Central-difference gradient of `f` w.r.t. the selected flat indices of `x`.
pub fn fd_grad_select(
    f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    x: &ArrayD<f64>,
    idxs: &[usize],
    eps: f64,
) -> Vec<f64> {
    let mut xs = x.clone();
    let mut out = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let orig = xs.as_slice_mut().unwrap()[i];
        xs.as_slice_mut().unwrap()[i] = orig + eps;
        let fp = f(&xs);
        xs.as_slice_mut().unwrap()[i] = orig - eps;
        let fm = f(&xs);
        xs.as_slice_mut().unwrap()[i] = orig;
        out.push((fp - fm) / (2.0 * eps));
    }
    out
}

/// Full central-difference gradient of `f` w.r.t. every element of `x`.
pub fn fd_grad_full(f: &mut dyn FnMut(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
    let idxs: Vec<usize> = (0..x.len()).collect();
    let g = fd_grad_select(f, x, &idxs, eps);
    ArrayD::from_shape_vec(x.raw_dim(), g).unwrap()
}

/// `max_i |a_i - b_i| / max(max|a|, max|b|, floor)` — scale-aware worst-case
/// relative disagreement between two gradient estimates.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
        .max(1e-12);
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc.max((x - y).abs()))
        / scale
}
