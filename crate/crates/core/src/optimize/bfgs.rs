//! Dense BFGS Hessian approximation.
//!
//! Maintains B_{t+1} = B_t - (B_t s sᵀ B_t)/(sᵀ B_t s) + (o oᵀ)/(oᵀ s)
//! with a curvature guard: updates with oᵀs <= 1e-12 ||s|| ||o|| are
//! skipped. The matrix is re-symmetrized after every update and falls
//! back to the identity if positive definiteness is ever lost.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::{dot, norm2, CURVATURE_GUARD};

pub struct DenseBfgs {
    b: DMatrix<f64>,
    /// Updates skipped by the curvature guard.
    pub skips: usize,
    /// Identity refreshes after a failed factorization.
    pub refreshes: usize,
}

impl DenseBfgs {
    pub fn new(dim: usize) -> Self {
        DenseBfgs { b: DMatrix::identity(dim, dim), skips: 0, refreshes: 0 }
    }

    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Descent direction d solving B d = -p.
    pub fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        assert!(
            grad.iter().all(|g| g.is_finite()),
            "bfgs direction requires a finite gradient"
        );
        assert!(grad.len() == self.dim(), "gradient dim {} vs B dim {}", grad.len(), self.dim());
        let p = DVector::from_column_slice(grad);
        match Cholesky::new(self.b.clone()) {
            Some(chol) => {
                let d = chol.solve(&(-&p));
                d.as_slice().to_vec()
            }
            None => {
                self.b = DMatrix::identity(self.dim(), self.dim());
                self.refreshes += 1;
                grad.iter().map(|g| -g).collect()
            }
        }
    }

    /// Apply the secant update; returns false when the curvature guard
    /// skipped it.
    pub fn update(&mut self, s: &[f64], o: &[f64]) -> bool {
        assert!(s.len() == self.dim() && o.len() == self.dim(), "bfgs update dim mismatch");
        let so = dot(s, o);
        if so <= CURVATURE_GUARD * norm2(s) * norm2(o) {
            self.skips += 1;
            return false;
        }
        let sv = DVector::from_column_slice(s);
        let ov = DVector::from_column_slice(o);
        let bs = &self.b * &sv;
        let sbs = sv.dot(&bs);
        if sbs <= 0.0 || !sbs.is_finite() {
            self.b = DMatrix::identity(self.dim(), self.dim());
            self.refreshes += 1;
            return false;
        }
        self.b -= (&bs * bs.transpose()) / sbs;
        self.b += (&ov * ov.transpose()) / so;
        // keep B exactly symmetric against rounding drift
        let bt = self.b.transpose();
        self.b = (&self.b + bt) * 0.5;
        true
    }

    /// Worst asymmetry |B - Bᵀ| (diagnostic).
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim() {
            for j in (i + 1)..self.dim() {
                worst = worst.max((self.b[(i, j)] - self.b[(j, i)]).abs());
            }
        }
        worst
    }
}
