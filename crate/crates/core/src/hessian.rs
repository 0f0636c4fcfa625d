//! Empirical Hessians from calibration inputs, damped inversion, and the
//! Schur-complement update that removes pruned coordinates from `H^-1`.

use nalgebra::{Cholesky, DMatrix};
use thiserror::Error;

/// Block inverses with a larger 1-norm condition estimate are refused.
pub const BLOCK_COND_LIMIT: f64 = 1e12;
/// Damped Hessians with a larger 1-norm condition estimate are refused.
pub const DAMPED_COND_LIMIT: f64 = 1e14;
pub const DEFAULT_LAMBDA_REL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HessianError {
    #[error("calibration data contains a non-finite value")]
    NonFinite,
    #[error("calibration data must have at least one row and one column")]
    Empty,
    #[error("matrix is not square and symmetric: {0}")]
    NotSymmetric(String),
    #[error("damped Hessian is singular (condition estimate {cond:e})")]
    SingularAfterDamping { cond: f64 },
    #[error("inverse-Hessian block is singular (condition estimate {cond:e})")]
    SingularBlock { cond: f64 },
    #[error("index {0} has already been pruned")]
    AlreadyPruned(usize),
    #[error("index {index} out of range for dimension {dim}")]
    OutOfBounds { index: usize, dim: usize },
}

/// Calibration inputs: `N` samples of `K` features.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    x: DMatrix<f64>,
}

impl CalibrationSet {
    pub fn new(x: DMatrix<f64>) -> Result<Self, HessianError> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(HessianError::Empty);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(HessianError::NonFinite);
        }
        Ok(CalibrationSet { x })
    }

    pub fn from_row_slice(n: usize, k: usize, data: &[f64]) -> Result<Self, HessianError> {
        if data.len() != n * k {
            return Err(HessianError::Empty);
        }
        Self::new(DMatrix::from_row_slice(n, k, data))
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn num_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.x.ncols()
    }

    /// `||X[:, j]||_2` for every feature.
    pub fn column_norms(&self) -> Vec<f64> {
        self.x.column_iter().map(|c| c.norm()).collect()
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `H = X^T X / N`, exactly symmetric.
pub fn empirical_hessian(calib: &CalibrationSet) -> DMatrix<f64> {
    let x = &calib.x;
    let mut h = x.tr_mul(x) / x.nrows() as f64;
    symmetrize(&mut h);
    h
}

/// Inverts a symmetric positive definite matrix, refusing it when the
/// 1-norm condition estimate exceeds `limit`. Returns the inverse and the
/// estimate.
fn spd_inverse(m: &DMatrix<f64>, limit: f64) -> Result<(DMatrix<f64>, f64), f64> {
    let Some(chol) = Cholesky::new(m.clone()) else {
        return Err(f64::INFINITY);
    };
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    let cond = norm1(m) * norm1(&inv);
    if !cond.is_finite() || cond > limit {
        return Err(cond);
    }
    Ok((inv, cond))
}

/// A damped Hessian and its inverse restricted to the coordinates that
/// have not been pruned yet.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianState {
    h: DMatrix<f64>,
    h_inv: DMatrix<f64>,
    damping: f64,
    pruned: Vec<bool>,
}

/// `(H + lambda I)^-1` with `lambda = lambda_rel * mean(diag H)`.
pub fn damp_and_invert(h: &DMatrix<f64>, lambda_rel: f64) -> Result<HessianState, HessianError> {
    let k = h.nrows();
    if k == 0 || h.ncols() != k {
        return Err(HessianError::NotSymmetric(format!("{}x{}", h.nrows(), h.ncols())));
    }
    if h.iter().any(|v| !v.is_finite()) || !lambda_rel.is_finite() || lambda_rel < 0.0 {
        return Err(HessianError::NonFinite);
    }
    let scale = h.amax().max(f64::MIN_POSITIVE);
    if (h - h.transpose()).amax() > 1e-10 * scale {
        return Err(HessianError::NotSymmetric("asymmetric beyond 1e-10 relative".into()));
    }
    let mut h = h.clone();
    symmetrize(&mut h);
    let damping = lambda_rel * h.diagonal().mean();
    let mut damped = h.clone();
    for i in 0..k {
        damped[(i, i)] += damping;
    }
    let (h_inv, _) = spd_inverse(&damped, DAMPED_COND_LIMIT)
        .map_err(|cond| HessianError::SingularAfterDamping { cond })?;
    Ok(HessianState {
        h,
        h_inv,
        damping,
        pruned: vec![false; k],
    })
}

impl HessianState {
    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// The undamped Hessian.
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// `H + lambda I`, the matrix the quadratic loss model uses.
    pub fn damped(&self) -> DMatrix<f64> {
        let mut d = self.h.clone();
        for i in 0..self.dim() {
            d[(i, i)] += self.damping;
        }
        d
    }

    pub fn h_inv(&self) -> &DMatrix<f64> {
        &self.h_inv
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn is_pruned(&self, i: usize) -> bool {
        self.pruned[i]
    }

    pub fn pruned_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.pruned[i]).collect()
    }

    pub fn surviving_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| !self.pruned[i]).collect()
    }

    fn check(&self, elements: &[usize]) -> Result<(), HessianError> {
        for &e in elements {
            if e >= self.dim() {
                return Err(HessianError::OutOfBounds {
                    index: e,
                    dim: self.dim(),
                });
            }
            if self.pruned[e] {
                return Err(HessianError::AlreadyPruned(e));
            }
        }
        Ok(())
    }

    /// `[H^-1]_{II}` for the given coordinates, in the given order.
    pub fn block_inv_submatrix(&self, elements: &[usize]) -> Result<DMatrix<f64>, HessianError> {
        self.check(elements)?;
        Ok(self.h_inv.select_rows(elements).select_columns(elements))
    }

    /// `([H^-1]_{II})^-1`, refused when the block is ill-conditioned.
    pub fn block_precision(&self, elements: &[usize]) -> Result<DMatrix<f64>, HessianError> {
        let b = self.block_inv_submatrix(elements)?;
        if b.nrows() == 1 {
            let d = b[(0, 0)];
            if d <= 0.0 || !d.is_finite() {
                return Err(HessianError::SingularBlock { cond: f64::INFINITY });
            }
            return Ok(DMatrix::from_element(1, 1, 1.0 / d));
        }
        spd_inverse(&b, BLOCK_COND_LIMIT)
            .map(|(inv, _)| inv)
            .map_err(|cond| HessianError::SingularBlock { cond })
    }

    /// Removes `elements` from the inverse: `H^-1 -= H^-1[:, I] B^-1 H^-1[I, :]`.
    /// Pruned rows and columns are set to exactly zero afterwards.
    pub fn schur_prune(&mut self, elements: &[usize]) -> Result<(), HessianError> {
        if elements.is_empty() {
            return Ok(());
        }
        let precision = self.block_precision(elements)?;
        let c = self.h_inv.select_columns(elements);
        let cb = &c * &precision;
        self.h_inv.gemm(-1.0, &cb, &c.transpose(), 1.0);
        for &e in elements {
            self.pruned[e] = true;
        }
        for e in 0..self.dim() {
            if self.pruned[e] {
                self.h_inv.row_mut(e).fill(0.0);
                self.h_inv.column_mut(e).fill(0.0);
            }
        }
        symmetrize(&mut self.h_inv);
        Ok(())
    }

    /// Consuming form of [`HessianState::schur_prune`].
    pub fn pruned(mut self, elements: &[usize]) -> Result<Self, HessianError> {
        self.schur_prune(elements)?;
        Ok(self)
    }
}


#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub fn with_inverse(mut state: HessianState, h_inv: DMatrix<f64>) -> HessianState {
        state.h_inv = h_inv;
        state
    }
}
