//! Central finite-difference gradient verification.
//!
//! The checks compare an analytic backward pass against the two-sided
//! difference quotient `(f(x + h) - f(x - h)) / 2h` evaluated per element,
//! using the error metric `max|g_a - g_fd| / max(1, max|g_fd|)`.

use crate::error::Result;
use crate::numerics::tape::{GradTape, TensorId};
use crate::numerics::tensor::Tensor;

/// Probe step for 64-bit central differences.
pub const FD_STEP: f64 = 1e-6;

/// Default acceptance threshold for the relative-error metric.
pub const FD_TOLERANCE: f64 = 1e-5;

/// `max|g_a - g_fd| / max(1, max|g_fd|)` over all elements.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(
        analytic.shape(),
        numeric.shape(),
        "gradient shapes must match"
    );
    let max_diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    max_diff / 1.0_f64.max(numeric.max_abs())
}

/// Central finite differences of a scalar function of one tensor.
pub fn finite_difference(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, step: f64) -> Tensor {
    let mut grad = Tensor::zeros(at.shape());
    let mut probe = at.clone();
    for i in 0..at.numel() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let plus = f(&probe);
        probe.data_mut()[i] = original - step;
        let minus = f(&probe);
        probe.data_mut()[i] = original;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Verifies the tape gradient of a scalar-valued computation against finite
/// differences for every input tensor, returning the worst relative error.
///
/// `build` receives a fresh tape plus the leaf ids of `inputs` (in order)
/// and must return a one-element output. It is re-invoked for every probe,
/// so it must be a pure function of the leaf values.
pub fn check_scalar_fn(
    inputs: &[Tensor],
    build: impl Fn(&mut GradTape, &[TensorId]) -> Result<TensorId>,
) -> Result<f64> {
    let run = |values: &[Tensor]| -> Result<(GradTape, Vec<TensorId>, TensorId)> {
        let mut tape = GradTape::new();
        let ids: Vec<TensorId> = values.iter().map(|t| tape.var(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        Ok((tape, ids, out))
    };

    let (tape, ids, out) = run(inputs)?;
    let seed = Tensor::new(tape.value(out).shape().to_vec(), vec![1.0])?;
    let grads = tape.backward(out, seed)?;

    let mut worst = 0.0_f64;
    for (slot, input) in inputs.iter().enumerate() {
        let fd = finite_difference(
            |probe| {
                let mut values = inputs.to_vec();
                values[slot] = probe.clone();
                let (tape, _, out) = run(&values).expect("probe forward failed");
                tape.value(out).data()[0]
            },
            input,
            FD_STEP,
        );
        worst = worst.max(relative_error(&grads.get(ids[slot]), &fd));
    }
    Ok(worst)
}
