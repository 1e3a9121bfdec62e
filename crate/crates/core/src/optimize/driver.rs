//! Stand-alone quasi-Newton drivers over closure objectives.
//!
//! Used by the regularized attack solver, the subspace diagnostics and
//! the contract tests; the image inference loop has its own driver in
//! `runloop`.

use super::{armijo_search_with_grad, ArmijoParams, DenseBfgs, LbfgsHistory};
use crate::record::LineSearchTrace;

pub struct MinimizeOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub armijo: ArmijoParams,
    pub memory: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            max_iters: 100,
            grad_tol: 1e-8,
            armijo: ArmijoParams::default(),
            memory: 10,
        }
    }
}

pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub line_searches: Vec<LineSearchTrace>,
}

/// L-BFGS with Armijo backtracking. `project`, when given, is applied to
/// every candidate point (box constraints and the like); `observe` sees
/// each iterate with its gradient before the step.
pub fn minimize_lbfgs(
    mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    x0: Vec<f64>,
    opts: &MinimizeOptions,
    mut project: Option<&mut dyn FnMut(&mut [f64])>,
    mut observe: Option<&mut dyn FnMut(usize, &[f64], &[f64])>,
) -> MinimizeResult {
    let mut x = x0;
    if let Some(p) = project.as_mut() {
        p(&mut x);
    }
    let mut history = LbfgsHistory::new(opts.memory);
    let (mut fx, mut gx) = f(&x);
    let mut traces = Vec::new();
    let mut iters = 0;
    for it in 0..opts.max_iters {
        iters = it;
        if let Some(obs) = observe.as_mut() {
            obs(it, &x, &gx);
        }
        let gnorm = super::norm2(&gx);
        if gnorm < opts.grad_tol {
            return MinimizeResult { x, f: fx, grad_norm: gnorm, iterations: it, line_searches: traces };
        }
        let d = history.direction(&gx);
        let dir_dot = super::dot(&gx, &d);
        if dir_dot >= 0.0 {
            history.clear();
            continue;
        }
        let mut trial_buf: Vec<f64> = Vec::new();
        let res = armijo_search_with_grad(
            |cand| {
                trial_buf.clear();
                trial_buf.extend_from_slice(cand);
                if let Some(p) = project.as_mut() {
                    p(&mut trial_buf);
                }
                f(&trial_buf).0
            },
            &x,
            fx,
            &d,
            &gx,
            opts.armijo,
        );
        traces.push(LineSearchTrace {
            iteration: it,
            f_before: fx,
            f_after: res.f_new,
            alpha: res.alpha,
            dir_dot,
            xi: opts.armijo.xi,
            accepted: res.accepted,
        });
        if !res.accepted {
            // direction no longer trustworthy, drop the history
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        }
        let mut x_new: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + res.alpha * di).collect();
        if let Some(p) = project.as_mut() {
            p(&mut x_new);
        }
        let (f_new, g_new) = f(&x_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let o: Vec<f64> = g_new.iter().zip(&gx).map(|(a, b)| a - b).collect();
        history.push(s, o);
        x = x_new;
        fx = f_new;
        gx = g_new;
    }
    if let Some(obs) = observe.as_mut() {
        obs(iters + 1, &x, &gx);
    }
    let grad_norm = super::norm2(&gx);
    MinimizeResult { x, f: fx, grad_norm, iterations: opts.max_iters, line_searches: traces }
}

/// Dense-BFGS variant for small problems; also checks the secant
/// equation after every applied update when `audit` is set, panicking on
/// violation beyond 1e-8.
pub fn minimize_bfgs_dense(
    mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    x0: Vec<f64>,
    opts: &MinimizeOptions,
    audit: bool,
) -> MinimizeResult {
    let mut x = x0;
    let mut bfgs = DenseBfgs::new(x.len());
    let (mut fx, mut gx) = f(&x);
    let mut traces = Vec::new();
    for it in 0..opts.max_iters {
        let gnorm = super::norm2(&gx);
        if gnorm < opts.grad_tol {
            return MinimizeResult { x, f: fx, grad_norm: gnorm, iterations: it, line_searches: traces };
        }
        let d = bfgs.direction(&gx);
        let dir_dot = super::dot(&gx, &d);
        if dir_dot >= 0.0 {
            continue;
        }
        let res = armijo_search_with_grad(|cand| f(cand).0, &x, fx, &d, &gx, opts.armijo);
        traces.push(LineSearchTrace {
            iteration: it,
            f_before: fx,
            f_after: res.f_new,
            alpha: res.alpha,
            dir_dot,
            xi: opts.armijo.xi,
            accepted: res.accepted,
        });
        if !res.accepted {
            break;
        }
        let x_new: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + res.alpha * di).collect();
        let (f_new, g_new) = f(&x_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let o: Vec<f64> = g_new.iter().zip(&gx).map(|(a, b)| a - b).collect();
        if bfgs.update(&s, &o) && audit {
            // secant equation B s = o
            let bs = bfgs.matrix() * nalgebra::DVector::from_column_slice(&s);
            let worst = bs
                .iter()
                .zip(&o)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let scale = super::norm2(&o).max(1.0);
            assert!(
                worst <= 1e-8 * scale,
                "secant equation violated: |B s - o| = {worst} (scale {scale})"
            );
        }
        x = x_new;
        fx = f_new;
        gx = g_new;
    }
    let grad_norm = super::norm2(&gx);
    MinimizeResult { x, f: fx, grad_norm, iterations: opts.max_iters, line_searches: traces }
}
