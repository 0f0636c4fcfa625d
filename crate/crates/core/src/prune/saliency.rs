use nalgebra::{DMatrix, DVector};

use super::{PruneError, RowBlocks};
use crate::hessian::{CalibrationSet, HessianError, HessianState};
use crate::spec::CompiledSpec;

/// `S_j = 1/2 * sum_e H_ee w_e^2` over the elements of each block.
pub fn saliency_obd(
    spec: &CompiledSpec,
    w: &DMatrix<f64>,
    diag_h: &[f64],
) -> Result<Vec<f64>, PruneError> {
    let rows = RowBlocks::new(spec, w.nrows(), w.ncols())?;
    if diag_h.len() != w.ncols() {
        return Err(PruneError::Shape(format!(
            "diagonal has {} entries for {} columns",
            diag_h.len(),
            w.ncols()
        )));
    }
    Ok(rows
        .parts
        .iter()
        .map(|parts| {
            0.5 * parts
                .iter()
                .flat_map(|(r, cols)| cols.iter().map(move |&c| diag_h[c] * w[(*r, c)].powi(2)))
                .sum::<f64>()
        })
        .collect())
}

/// `S_j = sum_e |w_e| * ||X[:, col(e)]||_2`.
pub fn saliency_wanda(
    spec: &CompiledSpec,
    w: &DMatrix<f64>,
    calib: &CalibrationSet,
) -> Result<Vec<f64>, PruneError> {
    let rows = RowBlocks::new(spec, w.nrows(), w.ncols())?;
    if calib.num_features() != w.ncols() {
        return Err(PruneError::Shape(format!(
            "calibration has {} features for {} columns",
            calib.num_features(),
            w.ncols()
        )));
    }
    let norms = calib.column_norms();
    Ok(rows
        .parts
        .iter()
        .map(|parts| {
            parts
                .iter()
                .flat_map(|(r, cols)| cols.iter().map(|&c| w[(*r, c)].abs() * norms[c]))
                .sum()
        })
        .collect())
}

/// `1/2 w_I^T ([H^-1]_II)^-1 w_I` for one row.
pub fn row_block_saliency(w: &[f64], state: &HessianState, cols: &[usize]) -> Result<f64, HessianError> {
    if cols.len() == 1 {
        let c = cols[0];
        if state.is_pruned(c) {
            return Err(HessianError::AlreadyPruned(c));
        }
        let d = state.h_inv()[(c, c)];
        if d.is_nan() || d <= 0.0 {
            return Err(HessianError::SingularBlock { cond: f64::INFINITY });
        }
        return Ok(0.5 * w[c] * w[c] / d);
    }
    let p = state.block_precision(cols)?;
    let wi = DVector::from_iterator(cols.len(), cols.iter().map(|&c| w[c]));
    Ok(0.5 * wi.dot(&(&p * &wi)))
}

/// Block OBS saliencies of every block at the given state; blocks spanning
/// several rows sum their per-row terms.
pub fn saliency_obs(
    spec: &CompiledSpec,
    w: &DMatrix<f64>,
    state: &HessianState,
) -> Result<Vec<f64>, PruneError> {
    let rows = RowBlocks::new(spec, w.nrows(), w.ncols())?;
    if state.dim() != w.ncols() {
        return Err(PruneError::Shape(format!(
            "Hessian is {0}x{0} for {1} columns",
            state.dim(),
            w.ncols()
        )));
    }
    let row_vecs: Vec<Vec<f64>> = w.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.parts
        .iter()
        .map(|parts| {
            parts.iter().try_fold(0.0, |acc, (r, cols)| {
                Ok(acc + row_block_saliency(&row_vecs[*r], state, cols)?)
            })
        })
        .collect()
}

/// Zeroes `cols` of `w` and compensates the remaining weights:
/// `dw = -H^-1[:, I] ([H^-1]_II)^-1 w_I`. Returns the loss incurred,
/// which equals the block's saliency at this state.
///
/// The state itself is not updated; call [`HessianState::schur_prune`] next.
pub fn obs_update(w: &mut [f64], state: &HessianState, cols: &[usize]) -> Result<f64, HessianError> {
    if cols.is_empty() {
        return Ok(0.0);
    }
    let p = state.block_precision(cols)?;
    let wi = DVector::from_iterator(cols.len(), cols.iter().map(|&c| w[c]));
    let z = &p * &wi;
    let h_inv = state.h_inv();
    for (k, wk) in w.iter_mut().enumerate() {
        if state.is_pruned(k) {
            continue;
        }
        let delta: f64 = cols.iter().zip(z.iter()).map(|(&c, zc)| h_inv[(k, c)] * zc).sum();
        *wk -= delta;
    }
    for &c in cols {
        w[c] = 0.0;
    }
    Ok(0.5 * wi.dot(&z))
}
