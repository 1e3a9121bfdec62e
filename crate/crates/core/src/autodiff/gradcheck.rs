//! Central-difference gradient oracle.
//!
//! Used by the test suites and the `gradcheck` CLI command to audit the
//! tape's backward pass. The oracle never touches the tape: it only
//! evaluates the supplied closure.

use super::Tensor;

/// Central finite differences, (f(x + h e_i) - f(x - h e_i)) / 2h per
/// coordinate.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite_diff_grad step must be positive, got {}", h);
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
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

/// Worst per-coordinate deviation between two gradients, normalised by the
/// larger of the two infinity norms (floored at 1e-6 so that all-zero
/// gradients compare by absolute error).
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert!(
        analytic.shape() == numeric.shape(),
        "gradient shape mismatch {:?} vs {:?}",
        analytic.shape(),
        numeric.shape()
    );
    let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-6);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}

/// Push coordinates away from the kink at zero so that central
/// differences stay valid for relu-style operators. `margin` should be a
/// few multiples of the difference step.
pub fn displace_from_kinks(x: &Tensor, margin: f64) -> Tensor {
    x.map(|v| {
        if v.abs() < margin {
            if v >= 0.0 {
                margin
            } else {
                -margin
            }
        } else {
            v
        }
    })
}
