//! Armijo backtracking line search.
//!
//! Tries alpha in {b^0, b^1, ...} from the largest down and accepts the
//! first step with L(y + alpha d) <= L(y) + alpha xi pᵀd. Exhausting the
//! backtrack budget is reported through a flag, not an error.

use super::dot;

#[derive(Debug, Clone, Copy)]
pub struct ArmijoParams {
    pub xi: f64,
    pub b: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        ArmijoParams { xi: 1e-4, b: 0.5, max_backtracks: 20 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ArmijoResult {
    /// Accepted step size; 0 when the search was exhausted.
    pub alpha: f64,
    pub accepted: bool,
    /// Objective value at the accepted point (f0 when not accepted).
    pub f_new: f64,
    /// Number of objective evaluations spent.
    pub evals: usize,
}

/// Search along `d` from `y`, where `f0 = f(y)` and `grad_dot_dir = pᵀd`
/// must be negative (descent direction).
pub fn armijo_search(
    mut f: impl FnMut(&[f64]) -> f64,
    y: &[f64],
    f0: f64,
    d: &[f64],
    grad_dot_dir: f64,
    params: ArmijoParams,
) -> ArmijoResult {
    assert!(
        params.xi > 0.0 && params.xi < 1.0 && params.b > 0.0 && params.b < 1.0,
        "armijo parameters must lie in (0,1): xi={}, b={}",
        params.xi,
        params.b
    );
    assert!(
        grad_dot_dir < 0.0,
        "armijo precondition violated: pᵀd = {grad_dot_dir} is not a descent direction"
    );
    let mut alpha = 1.0;
    let mut trial = vec![0.0; y.len()];
    for eval in 0..params.max_backtracks {
        for ((t, &yi), &di) in trial.iter_mut().zip(y).zip(d) {
            *t = yi + alpha * di;
        }
        let fv = f(&trial);
        if fv.is_finite() && fv <= f0 + alpha * params.xi * grad_dot_dir {
            return ArmijoResult { alpha, accepted: true, f_new: fv, evals: eval + 1 };
        }
        alpha *= params.b;
    }
    ArmijoResult { alpha: 0.0, accepted: false, f_new: f0, evals: params.max_backtracks }
}

/// Convenience wrapper computing pᵀd from the gradient.
pub fn armijo_search_with_grad(
    f: impl FnMut(&[f64]) -> f64,
    y: &[f64],
    f0: f64,
    d: &[f64],
    grad: &[f64],
    params: ArmijoParams,
) -> ArmijoResult {
    armijo_search(f, y, f0, d, dot(grad, d), params)
}
