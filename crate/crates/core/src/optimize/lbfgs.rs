//! Limited-memory BFGS history and the two-loop recursion.

use std::collections::VecDeque;

use super::{dot, norm2, CURVATURE_GUARD};

struct Pair {
    s: Vec<f64>,
    o: Vec<f64>,
    rho: f64,
}

/// Last `memory` curvature pairs (s_t, o_t). An empty history yields the
/// steepest-descent direction.
pub struct LbfgsHistory {
    memory: usize,
    pairs: VecDeque<Pair>,
    pub skips: usize,
}

impl LbfgsHistory {
    pub fn new(memory: usize) -> Self {
        assert!(memory >= 1, "lbfgs memory must be >= 1, got {memory}");
        LbfgsHistory { memory, pairs: VecDeque::new(), skips: 0 }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Store a pair unless the curvature guard rejects it.
    pub fn push(&mut self, s: Vec<f64>, o: Vec<f64>) -> bool {
        let so = dot(&s, &o);
        if so <= CURVATURE_GUARD * norm2(&s) * norm2(&o) {
            self.skips += 1;
            return false;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back(Pair { rho: 1.0 / so, s, o });
        true
    }

    /// Two-loop recursion for d = -H p, with the usual sᵀo/oᵀo scaling
    /// of the initial Hessian.
    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        assert!(
            grad.iter().all(|g| g.is_finite()),
            "lbfgs direction requires a finite gradient"
        );
        let mut q: Vec<f64> = grad.to_vec();
        let mut alphas = vec![0.0; self.pairs.len()];
        for (i, pair) in self.pairs.iter().enumerate().rev() {
            let a = pair.rho * dot(&pair.s, &q);
            alphas[i] = a;
            for (qv, ov) in q.iter_mut().zip(&pair.o) {
                *qv -= a * ov;
            }
        }
        if let Some(last) = self.pairs.back() {
            let scale = dot(&last.s, &last.o) / dot(&last.o, &last.o);
            for qv in &mut q {
                *qv *= scale;
            }
        }
        for (i, pair) in self.pairs.iter().enumerate() {
            let b = pair.rho * dot(&pair.o, &q);
            for (qv, sv) in q.iter_mut().zip(&pair.s) {
                *qv += (alphas[i] - b) * sv;
            }
        }
        for qv in &mut q {
            *qv = -*qv;
        }
        q
    }
}
