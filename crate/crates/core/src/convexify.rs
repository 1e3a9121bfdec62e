//! Soft nonnegativity regularizers and the adaptive shrink schedule.
//!
//! The regularizer is gamma * ||max(-theta, 0)|| over selected weight
//! tensors; biases are always exempt since convexity of a relu network
//! in its input depends only on the weights. As gamma grows the network
//! interpolates toward a hard input-convex one.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Value};
use crate::networks::{self, BoundParams, NetworkSpec, ParamSet};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegNorm {
    L1,
    L2,
}

/// Non-increasing regularization weight. On each trigger (regularizer
/// exceeding the data term) gamma shrinks by `shrink_factor`, never
/// below `floor`.
#[derive(Debug, Clone, Copy)]
pub struct GammaSchedule {
    pub gamma: f64,
    pub shrink_factor: f64,
    pub floor: f64,
}

impl GammaSchedule {
    pub fn new(gamma: f64) -> Self {
        assert!(gamma >= 0.0, "gamma must be nonnegative, got {gamma}");
        GammaSchedule { gamma, shrink_factor: 0.25, floor: 0.0 }
    }
}

impl Default for GammaSchedule {
    fn default() -> Self {
        Self::new(0.0)
    }
}

/// Shrink gamma when the regularization term dominates the data term.
pub fn adapt_gamma(sched: GammaSchedule, mse_term: f64, reg_term: f64) -> GammaSchedule {
    assert!(
        mse_term >= 0.0 && reg_term >= 0.0,
        "loss terms must be nonnegative, got mse={mse_term}, reg={reg_term}"
    );
    if reg_term > mse_term {
        GammaSchedule {
            gamma: (sched.gamma * sched.shrink_factor).max(sched.floor),
            ..sched
        }
    } else {
        sched
    }
}

fn negative_norm(entries: &[&Value], norm: RegNorm) -> Option<Value> {
    let mut acc: Option<Value> = None;
    for v in entries {
        let neg = v.negative_part();
        let term = match norm {
            RegNorm::L1 => neg.l1(),
            RegNorm::L2 => neg.l2_sq(),
        };
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    match norm {
        RegNorm::L1 => acc,
        // l2 norm of the concatenated negative parts
        RegNorm::L2 => acc.map(|a| a.sqrt()),
    }
}

/// gamma * ||max(-theta, 0)|| over every weight tensor of the set.
pub fn reg_full(
    params: &ParamSet,
    bound: &BoundParams,
    norm: RegNorm,
    gamma: f64,
) -> Value {
    assert!(gamma >= 0.0, "gamma must be nonnegative, got {gamma}");
    reg_over_names(params.group(networks::GROUP_ALL_WEIGHTS), bound, norm, gamma)
}

/// Sum of per-group regularizers with a shared gamma; layers outside
/// the groups are unpenalized.
pub fn reg_partial(
    params: &ParamSet,
    bound: &BoundParams,
    groups: &[&str],
    norm: RegNorm,
    gamma: f64,
) -> Value {
    assert!(gamma >= 0.0, "gamma must be nonnegative, got {gamma}");
    let mut acc: Option<Value> = None;
    for g in groups {
        let term = reg_over_names(params.group(g), bound, norm, gamma);
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    acc.unwrap_or_else(|| zero_scalar(bound))
}

fn zero_scalar(bound: &BoundParams) -> Value {
    let (_, any) = bound.iter().next().expect("empty parameter set");
    any.tape().constant(Tensor::scalar(0.0))
}

fn reg_over_names(names: &[String], bound: &BoundParams, norm: RegNorm, gamma: f64) -> Value {
    let values: Vec<&Value> = names.iter().map(|n| bound.value(n)).collect();
    match negative_norm(&values, norm) {
        Some(v) => v.mul_scalar(gamma),
        None => zero_scalar(bound),
    }
}

/// Worst and average positive part of F((a+b)/2) - (F(a)+F(b))/2 over
/// random input pairs, per output coordinate.
#[derive(Debug, Clone, Copy)]
pub struct ConvexityStats {
    pub max_violation: f64,
    pub mean_violation: f64,
    pub pairs: usize,
}

/// Midpoint-convexity probe over the full network input, sampling pairs
/// uniformly from [0, 1]. Deterministic per seed.
pub fn convexity_probe(
    spec: &NetworkSpec,
    params: &ParamSet,
    n_pairs: usize,
    seed: u64,
) -> ConvexityStats {
    let dim = probe_input_len(spec);
    convexity_probe_coords(spec, params, n_pairs, seed, &(0..dim).collect::<Vec<_>>())
}

/// Same probe, but only the listed input coordinates vary; the rest are
/// drawn once per pair and shared by a, b and the midpoint.
pub fn convexity_probe_coords(
    spec: &NetworkSpec,
    params: &ParamSet,
    n_pairs: usize,
    seed: u64,
    vary: &[usize],
) -> ConvexityStats {
    assert!(n_pairs >= 1, "probe needs n_pairs >= 1, got {n_pairs}");
    let mut rng = rng::stream(seed, "convexity_probe");
    let shape = probe_input_shape(spec);
    let dim: usize = shape.iter().product();
    let mut max_v: f64 = 0.0;
    let mut sum_v = 0.0;
    let mut count = 0usize;
    for _ in 0..n_pairs {
        let base: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut a = base.clone();
        let mut b = base;
        for &i in vary {
            a[i] = rng.gen_range(0.0..1.0);
            b[i] = rng.gen_range(0.0..1.0);
        }
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let fa = eval(spec, params, &shape, a);
        let fb = eval(spec, params, &shape, b);
        let fm = eval(spec, params, &shape, mid);
        for ((m, x), y) in fm.iter().zip(&fa).zip(&fb) {
            let v = (m - 0.5 * (x + y)).max(0.0);
            max_v = max_v.max(v);
            sum_v += v;
            count += 1;
        }
    }
    ConvexityStats {
        max_violation: max_v,
        mean_violation: sum_v / count as f64,
        pairs: n_pairs,
    }
}

fn probe_input_shape(spec: &NetworkSpec) -> Vec<usize> {
    match &spec.layout {
        networks::Layout::Ficnn { in_dim, .. } => vec![in_dim + 1],
        // small spatial probe keeps 1000-pair sweeps cheap
        _ => vec![spec.in_ch, 8, 8],
    }
}

fn probe_input_len(spec: &NetworkSpec) -> usize {
    probe_input_shape(spec).iter().product()
}

fn eval(spec: &NetworkSpec, params: &ParamSet, shape: &[usize], data: Vec<f64>) -> Vec<f64> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let input = tape.constant(Tensor::new(shape.to_vec(), data));
    networks::forward(spec, &bound, &input).to_tensor().data().to_vec()
}
