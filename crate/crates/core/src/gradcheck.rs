//! Central finite differences, the oracle every analytic gradient is checked against.

use crate::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every element `i`.
pub fn finite_diff_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let grad = (0..x.len())
        .map(|i| central_difference(&mut f, &mut probe, i, eps))
        .collect();
    Tensor::new(x.shape().to_vec(), grad).expect("same shape")
}

/// Finite-difference derivative w.r.t. the listed flat indices only.
pub fn finite_diff_at(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    indices: &[usize],
    eps: f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| central_difference(&mut f, &mut probe, i, eps))
        .collect()
}

fn central_difference(
    f: &mut impl FnMut(&Tensor) -> f64,
    probe: &mut Tensor,
    i: usize,
    eps: f64,
) -> f64 {
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + eps;
    let plus = f(probe);
    probe.data_mut()[i] = orig - eps;
    let minus = f(probe);
    probe.data_mut()[i] = orig;
    (plus - minus) / (2.0 * eps)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest elementwise [`relative_error`] between two equally long slices.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}
