//! Central finite differences, used to validate analytic gradients.

use super::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn numeric_gradient(
    f: impl Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    step: f64,
) -> Vec<f64> {
    let base = inputs[which].to_vec();
    let shape = inputs[which].shape().to_vec();
    let mut probe = inputs.to_vec();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += step;
            probe[which] = Tensor::from_parts(shape.clone(), plus);
            let fp = f(&probe);
            let mut minus = base.clone();
            minus[i] -= step;
            probe[which] = Tensor::from_parts(shape.clone(), minus);
            let fm = f(&probe);
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Largest element-wise relative error `|a - n| / max(|a| + |n|, floor)`.
///
/// The floor keeps entries whose true gradient is zero from dominating via
/// rounding noise in the difference quotient.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
        .fold(0.0, f64::max)
}
