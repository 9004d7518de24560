//! Central-difference gradients for validating the handwritten backward
//! passes. Runs in double precision only; truncation error is O(h²), so
//! h = 1e-5 leaves ~1e-10 headroom above f64 roundoff for smooth ops.

use super::Tensor;

/// Numerical gradient of a scalar-valued function at `x`:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate.
pub fn finite_difference_grad(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    h: f64,
) -> Tensor<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)` between two tensors
/// of identical shape. The floor keeps near-zero coordinates from dominating.
pub fn max_rel_error(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in comparison");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&av, &bv)| (av - bv).abs() / av.abs().max(bv.abs()).max(floor))
        .fold(0.0, f64::max)
}
