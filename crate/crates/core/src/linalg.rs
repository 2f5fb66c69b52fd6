//! Minimum-norm least squares through a thin SVD with a relative
//! singular-value cutoff.

use nalgebra::{DMatrix, DVector};

/// Singular values below `RELATIVE_CUTOFF * sigma_max` are treated as zero.
pub const RELATIVE_CUTOFF: f64 = 1e-8;

/// Thin SVD `A = U diag(s) V^T`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl Svd {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let svd = a.clone().svd(true, true);
        Self {
            u: svd.u.expect("requested U"),
            s: svd.singular_values,
            v_t: svd.v_t.expect("requested V^T"),
        }
    }

    pub fn sigma_max(&self) -> f64 {
        self.s.iter().copied().fold(0.0, f64::max)
    }

    /// Number of singular values above `threshold`.
    pub fn rank(&self, threshold: f64) -> usize {
        self.s.iter().filter(|&&v| v > threshold).count()
    }

    /// `A^+ b` keeping only singular values above `threshold`.
    pub fn solve(&self, b: &DVector<f64>, threshold: f64) -> DVector<f64> {
        let utb = self.u.transpose() * b;
        let mut scaled = DVector::zeros(self.s.len());
        for i in 0..self.s.len() {
            if self.s[i] > threshold {
                scaled[i] = utb[i] / self.s[i];
            }
        }
        self.v_t.transpose() * scaled
    }

    /// `(A^T A)^+ g` on the retained subspace.
    pub fn gram_pinv_apply(&self, g: &DVector<f64>, threshold: f64) -> DVector<f64> {
        let vtg = &self.v_t * g;
        let mut scaled = DVector::zeros(self.s.len());
        for i in 0..self.s.len() {
            if self.s[i] > threshold {
                scaled[i] = vtg[i] / (self.s[i] * self.s[i]);
            }
        }
        self.v_t.transpose() * scaled
    }
}

/// Result of a minimum-norm least-squares solve.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    pub x: DVector<f64>,
    pub rank: usize,
    pub full_rank: bool,
}

pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> LeastSquares {
    let svd = Svd::new(a);
    let threshold = RELATIVE_CUTOFF * svd.sigma_max();
    let rank = svd.rank(threshold);
    LeastSquares {
        x: svd.solve(b, threshold),
        rank,
        full_rank: rank == a.ncols(),
    }
}
