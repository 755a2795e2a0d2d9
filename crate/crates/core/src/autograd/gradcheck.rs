//! Central finite differences, the independent oracle for backward rules.

use crate::tensor::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Norms below this are treated as zero by [`relative_error`].
const NORM_FLOOR: f64 = 1e-6;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element `i` of `x`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape copied from x")
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-6)`; the floor keeps gradients that are
/// analytically zero (a bias feeding batch norm) from dividing noise by noise.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}
