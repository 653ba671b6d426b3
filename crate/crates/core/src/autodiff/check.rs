use crate::tensor::Tensor;

/// Central finite-difference gradient of a scalar function of `x`:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`, the norm-wise relative error used by
/// the gradient checks.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(floor)
}
