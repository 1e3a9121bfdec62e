//! Constant-nullspace diagnostic: how much of a gradient leaves the
//! subspace the objective actually depends on.
//!
//! When the data term only sees y through one linear layer, every
//! gradient (and Hessian) lives in the span of that layer's weight
//! rows. The probe holds an orthonormal basis of that span and reports
//! the relative residual of a vector against it.

use super::{dot, norm2};

/// Orthonormal basis of the subspace a last-layer objective depends on.
pub struct CnscProbe {
    basis: Vec<Vec<f64>>,
    dim: usize,
}

impl CnscProbe {
    /// Build from spanning vectors (e.g. the rows of the last-layer
    /// weight matrix) by modified Gram-Schmidt with a second
    /// re-orthogonalization pass. Near-dependent vectors are dropped.
    pub fn from_span(span: &[Vec<f64>]) -> Self {
        assert!(!span.is_empty(), "subspace probe needs at least one spanning vector");
        let dim = span[0].len();
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for v in span {
            assert!(v.len() == dim, "spanning vectors must share a dimension");
            let mut u = v.clone();
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(&u, b);
                    for (ui, bi) in u.iter_mut().zip(b) {
                        *ui -= c * bi;
                    }
                }
            }
            let n = norm2(&u);
            if n > 1e-12 * norm2(v).max(1.0) {
                for ui in &mut u {
                    *ui /= n;
                }
                basis.push(u);
            }
        }
        CnscProbe { basis, dim }
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Worst pairwise deviation from orthonormality (diagnostic).
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.basis.len() {
            for j in i..self.basis.len() {
                let d = dot(&self.basis[i], &self.basis[j]);
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
        worst
    }

    /// Projection of `p` onto the subspace.
    pub fn project(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for b in &self.basis {
            let c = dot(p, b);
            for (o, bi) in out.iter_mut().zip(b) {
                *o += c * bi;
            }
        }
        out
    }
}

/// ||p - Proj(p)|| / max(||p||, 1e-30).
pub fn subspace_residual(p: &[f64], probe: &CnscProbe) -> f64 {
    assert!(p.len() == probe.dim(), "gradient dim {} vs probe dim {}", p.len(), probe.dim());
    let proj = probe.project(p);
    let resid: f64 = p
        .iter()
        .zip(&proj)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    resid / norm2(p).max(1e-30)
}
