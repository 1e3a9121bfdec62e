//! The alternating inference loop.
//!
//! Phase 1 runs Adam jointly on the network parameters and the
//! intermediate image variable. Phase 2 alternates a quasi-Newton step
//! on the image variable (dense BFGS up to 1024 dimensions, L-BFGS with
//! memory 10 beyond) with Adam steps on a designated parameter subset,
//! usually the last block. The regularization weight shrinks whenever
//! the regularizer overtakes the data term.
//!
//! A non-finite loss restarts the current phase with gamma halved and
//! the learning rate halved, at most twice, before giving up.

use indexmap::IndexMap;

use super::{adam_step, AdamConfig, AdamState, ArmijoParams, DenseBfgs, LbfgsHistory};
use crate::autodiff::Tensor;
use crate::convexify::{adapt_gamma, GammaSchedule};
use crate::error::DncfError;
use crate::filters::ImageBuffer;
use crate::networks::ParamSet;
use crate::record::{LineSearchTrace, RecordRow, RunRecord, StepKind};

/// Loss split reported by an objective evaluation. The invariant
/// `total = data + beta * consistency + reg` is exact.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: f64,
    pub data: f64,
    pub consistency: f64,
    pub reg: f64,
}

/// Which leaves the backward pass should cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// All parameters plus the image variable.
    Joint,
    /// The phase-2 parameter subset plus the image variable.
    Phase2,
    /// Only the image variable.
    YOnly,
}

/// A task objective as seen by the loop.
pub trait DncfObjective {
    /// Forward-only evaluation.
    fn loss(&self, params: &ParamSet, y: &Tensor, gamma: f64) -> LossTerms;

    /// Forward and backward; returns the terms, gradients for every
    /// parameter within scope, and the gradient for `y`.
    fn loss_and_grads(
        &self,
        params: &ParamSet,
        y: &Tensor,
        gamma: f64,
        scope: GradScope,
    ) -> (LossTerms, IndexMap<String, Tensor>, Tensor);

    /// Raw (gamma-free) regularizer norm, for auto-scaling the initial
    /// gamma.
    fn raw_reg_norm(&self, params: &ParamSet) -> f64;

    /// Parameter names updated during phase 2.
    fn phase2_subset(&self) -> Vec<String>;

    /// Current reconstruction for snapshot frames.
    fn snapshot(&self, params: &ParamSet, y: &Tensor) -> ImageBuffer;
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    /// Total iteration budget across both phases.
    pub budget: usize,
    /// Fraction of the budget spent in the joint Adam phase.
    pub phase1_fraction: f64,
    pub adam: AdamConfig,
    pub armijo: ArmijoParams,
    pub lbfgs_memory: usize,
    /// Fixed initial gamma; None auto-scales it to 0.01 x data / reg.
    pub gamma_init: Option<f64>,
    /// Disable to hold gamma fixed for ablation sweeps.
    pub gamma_adaptive: bool,
    /// Snapshot every k iterations; 0 disables intermediate frames.
    pub snapshot_interval: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            budget: 400,
            phase1_fraction: 2.0 / 3.0,
            adam: AdamConfig::default(),
            armijo: ArmijoParams::default(),
            lbfgs_memory: 10,
            gamma_init: None,
            gamma_adaptive: true,
            snapshot_interval: 200,
        }
    }
}

/// Dimension bound under which the dense BFGS matrix is used for the
/// image variable.
pub const DENSE_BFGS_MAX_DIM: usize = 1024;

const STALL_WINDOW: usize = 50;
const STALL_REL_TOL: f64 = 1e-6;
const MAX_RESTARTS: usize = 2;

enum YOptimizer {
    Dense(DenseBfgs),
    Limited(LbfgsHistory),
}

impl YOptimizer {
    fn new(dim: usize, memory: usize) -> Self {
        if dim <= DENSE_BFGS_MAX_DIM {
            YOptimizer::Dense(DenseBfgs::new(dim))
        } else {
            YOptimizer::Limited(LbfgsHistory::new(memory))
        }
    }

    fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        match self {
            YOptimizer::Dense(b) => b.direction(grad),
            YOptimizer::Limited(h) => h.direction(grad),
        }
    }

    fn update(&mut self, s: Vec<f64>, o: Vec<f64>) {
        match self {
            YOptimizer::Dense(b) => {
                b.update(&s, &o);
            }
            YOptimizer::Limited(h) => {
                h.push(s, o);
            }
        }
    }
}

/// Run the full alternating schedule. Returns the optimized parameters,
/// the final image variable and the run record.
pub fn alternate_optimize(
    obj: &dyn DncfObjective,
    params: ParamSet,
    y0: Tensor,
    cfg: &LoopConfig,
) -> Result<(ParamSet, Tensor, RunRecord), DncfError> {
    let mut record = RunRecord::default();
    let mut params = params;
    let mut y = y0;

    // initial gamma: explicit, or scaled so the regularizer starts at 1%
    // of the data term
    let mut sched = GammaSchedule::new(match cfg.gamma_init {
        Some(g) => g,
        None => {
            let raw = obj.raw_reg_norm(&params);
            if raw > 0.0 {
                let t = obj.loss(&params, &y, 0.0);
                0.01 * t.data / raw
            } else {
                0.0
            }
        }
    });

    let mut adam = AdamState::new(cfg.adam);
    let phase1_iters = ((cfg.budget as f64) * cfg.phase1_fraction).round() as usize;
    let phase1_iters = phase1_iters.min(cfg.budget);

    let mut totals: Vec<f64> = Vec::with_capacity(cfg.budget);
    let mut restarts = 0usize;
    let mut iter = 0usize;

    // phase snapshots for restart-on-divergence
    let mut phase_start = (params.clone(), y.clone());

    macro_rules! restart_phase {
        () => {{
            restarts += 1;
            if restarts > MAX_RESTARTS {
                return Err(DncfError::Diverged(format!(
                    "non-finite loss at iteration {iter} after {MAX_RESTARTS} restarts"
                )));
            }
            params = phase_start.0.clone();
            y = phase_start.1.clone();
            sched.gamma *= 0.5;
            let lr = adam.cfg.lr * 0.5;
            adam = AdamState::new(cfg.adam);
            adam.set_lr(lr);
            record.restarts = restarts;
            continue;
        }};
    }

    let mut stalled = false;

    // ---- phase 1: joint Adam on parameters and y ----
    while iter < phase1_iters && !stalled {
        let (terms, pgrads, ygrad) = obj.loss_and_grads(&params, &y, sched.gamma, GradScope::Joint);
        if !terms.total.is_finite() {
            restart_phase!();
        }
        record.push_row(RecordRow {
            iteration: iter,
            data_term: terms.data,
            consistency_term: terms.consistency,
            reg_term: terms.reg,
            gamma: sched.gamma,
            step_size: adam.cfg.lr,
            kind: StepKind::Adam,
        });
        maybe_snapshot(&mut record, obj, &params, &y, iter, cfg);
        adam_step(&mut adam, &mut params, &pgrads);
        adam.update("__y", y.data_mut(), ygrad.data());
        if cfg.gamma_adaptive {
            sched = adapt_gamma(sched, terms.data, terms.reg);
        }
        totals.push(terms.total);
        stalled = is_stalled(&totals);
        iter += 1;
    }

    // ---- phase 2: quasi-Newton on y alternating with subset Adam ----
    phase_start = (params.clone(), y.clone());
    let subset: Vec<String> = obj.phase2_subset();
    let mut yopt = YOptimizer::new(y.len(), cfg.lbfgs_memory);

    while iter < cfg.budget && !stalled {
        let rows_mark = record.rows.len();
        let ls_mark = record.line_searches.len();
        let snap_mark = record.snapshots.len();
        let (terms, _, ygrad) = obj.loss_and_grads(&params, &y, sched.gamma, GradScope::YOnly);
        if !terms.total.is_finite() {
            yopt = YOptimizer::new(y.len(), cfg.lbfgs_memory);
            restart_phase!();
        }
        let d = yopt.direction(ygrad.data());
        let dir_dot = super::dot(ygrad.data(), &d);
        let gamma_now = sched.gamma;
        let mut alpha = 0.0;
        let mut y_new = y.clone();
        if dir_dot < 0.0 {
            let res = super::armijo_search(
                |cand| {
                    let t = Tensor::new(y.shape().to_vec(), cand.to_vec());
                    obj.loss(&params, &t, gamma_now).total
                },
                y.data(),
                terms.total,
                &d,
                dir_dot,
                cfg.armijo,
            );
            record.line_searches.push(LineSearchTrace {
                iteration: iter,
                f_before: terms.total,
                f_after: res.f_new,
                alpha: res.alpha,
                dir_dot,
                xi: cfg.armijo.xi,
                accepted: res.accepted,
            });
            if res.accepted {
                alpha = res.alpha;
                for ((n, &yi), &di) in y_new.data_mut().iter_mut().zip(y.data()).zip(&d) {
                    *n = yi + alpha * di;
                }
            } else {
                // stale curvature; fall back to steepest descent next time
                yopt = YOptimizer::new(y.len(), cfg.lbfgs_memory);
            }
        } else {
            yopt = YOptimizer::new(y.len(), cfg.lbfgs_memory);
        }
        record.push_row(RecordRow {
            iteration: iter,
            data_term: terms.data,
            consistency_term: terms.consistency,
            reg_term: terms.reg,
            gamma: sched.gamma,
            step_size: alpha,
            kind: StepKind::Lbfgs,
        });
        maybe_snapshot(&mut record, obj, &params, &y, iter, cfg);

        // fresh gradients at the moved y drive both the curvature pair
        // and the parameter subset update
        let (terms2, pgrads2, ygrad2) =
            obj.loss_and_grads(&params, &y_new, sched.gamma, GradScope::Phase2);
        if !terms2.total.is_finite() {
            record.rows.truncate(rows_mark);
            record.line_searches.truncate(ls_mark);
            record.snapshots.truncate(snap_mark);
            yopt = YOptimizer::new(y.len(), cfg.lbfgs_memory);
            restart_phase!();
        }
        if alpha > 0.0 {
            let s: Vec<f64> = y_new.data().iter().zip(y.data()).map(|(a, b)| a - b).collect();
            let o: Vec<f64> = ygrad2.data().iter().zip(ygrad.data()).map(|(a, b)| a - b).collect();
            yopt.update(s, o);
        }
        if !subset.is_empty() {
            let subset_grads: IndexMap<String, Tensor> = pgrads2
                .into_iter()
                .filter(|(n, _)| subset.contains(n))
                .collect();
            adam_step(&mut adam, &mut params, &subset_grads);
        }
        y = y_new;
        if cfg.gamma_adaptive {
            sched = adapt_gamma(sched, terms.data, terms.reg);
        }
        totals.push(terms.total);
        stalled = is_stalled(&totals);
        iter += 1;
    }

    Ok((params, y, record))
}

fn is_stalled(totals: &[f64]) -> bool {
    let n = totals.len();
    if n < STALL_WINDOW + 1 {
        return false;
    }
    let prev = totals[n - 1 - STALL_WINDOW];
    let cur = totals[n - 1];
    ((prev - cur).abs() / prev.abs().max(1e-30)) < STALL_REL_TOL
}

fn maybe_snapshot(
    record: &mut RunRecord,
    obj: &dyn DncfObjective,
    params: &ParamSet,
    y: &Tensor,
    iter: usize,
    cfg: &LoopConfig,
) {
    if cfg.snapshot_interval > 0 && iter % cfg.snapshot_interval == 0 {
        record.snapshots.push((iter, obj.snapshot(params, y)));
    }
}
