use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so entries where both
/// gradients vanish are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat input index of the worst relative error.
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Fixed weights in [0.5, 1.5] for the scalar head `sum_i w_i y_i`. A plain
/// sum would make some layers (batch norm) look constant.
pub fn weighted_sum_head(len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1_ab1e);
    (0..len).map(|_| rng.gen_range(0.5..1.5)).collect()
}

/// Compares an analytic vector-Jacobian product against central finite
/// differences of `sum_i w_i forward(x)_i`.
///
/// `backward(x, grad_out)` must return the gradient with respect to `x`.
/// Failures are reported, never raised.
pub fn grad_check<F, B>(forward: F, backward: B, input: &Tensor<f64>, tolerance: f64) -> GradCheckReport
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
    B: Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
{
    let y = forward(input);
    let w = Tensor::from_vec(y.shape().to_vec(), weighted_sum_head(y.len())).expect("head matches output");
    let head = |out: &Tensor<f64>| -> f64 { out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum() };
    let analytic = backward(input, &w);
    assert_eq!(analytic.shape(), input.shape(), "backward must return a gradient shaped like the input");

    let mut probe = input.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: input.len(),
        tolerance,
        passed: true,
    };
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let plus = head(&forward(&probe));
        probe.data_mut()[i] = orig - FD_STEP;
        let minus = head(&forward(&probe));
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        if !rel.is_finite() || rel > report.max_rel_error {
            report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
    }
    report.passed = report.max_rel_error < tolerance;
    report
}
