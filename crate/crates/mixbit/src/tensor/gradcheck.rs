//! Central finite-difference verification harness (64-bit).

use super::Tensor;

/// Compares `analytic` against central differences of `f` at `at`, one
/// coordinate at a time. Returns the worst relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check(
    f: impl Fn(&Tensor<f64>) -> f64,
    at: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
) -> f64 {
    assert_eq!(at.shape(), analytic.shape());
    let mut worst = 0.0f64;
    let mut probe = at.clone();
    for i in 0..at.numel() {
        let x0 = at.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let fp = f(&probe);
        probe.data_mut()[i] = x0 - eps;
        let fm = f(&probe);
        probe.data_mut()[i] = x0;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let at = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let analytic = Tensor::new(vec![2], vec![2.0, 4.0]).unwrap();
        let f = |x: &Tensor<f64>| x.data().iter().map(|v| v * v).sum();
        let err = finite_difference_check(f, &at, &analytic, 1e-5);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn constant_function() {
        let at = Tensor::new(vec![3], vec![0.5, -0.5, 2.0]).unwrap();
        let analytic = Tensor::zeros(&[3]);
        let err = finite_difference_check(|_| 3.25, &at, &analytic, 1e-4);
        assert_eq!(err, 0.0);
    }
}
