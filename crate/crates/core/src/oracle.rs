//! Brute-force references for checking saliencies, Schur updates and
//! greedy pruning. Only dense solves are used here, never the incremental
//! inverse updates being checked.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::layout::ElementSet;
use crate::spec::{CompiledSpec, MaskGrid, SpecError};

pub const MAX_ENUMERATION: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("reduced Hessian is singular")]
    Singular,
    #[error("enumeration of {0} masks exceeds the limit")]
    TooLarge(u128),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

/// Minimizes `1/2 dw^T H dw` subject to `(w + dw)[Z] = 0`. Returns the
/// minimum and the compensated row.
pub fn exact_compensated_loss(
    w: &[f64],
    h: &DMatrix<f64>,
    zero_set: &ElementSet,
) -> Result<(f64, Vec<f64>), OracleError> {
    let k = w.len();
    if h.shape() != (k, k) || zero_set.iter().any(|e| e >= k) {
        return Err(OracleError::Shape(format!("row of {k}, Hessian {:?}", h.shape())));
    }
    let zero: Vec<usize> = zero_set.iter().collect();
    let free: Vec<usize> = (0..k).filter(|e| !zero_set.contains(*e)).collect();
    let mut dw = DVector::zeros(k);
    for &z in &zero {
        dw[z] = -w[z];
    }
    if !free.is_empty() && !zero.is_empty() {
        // H_FF dw_F = -H_FZ dw_Z
        let hff = h.select_rows(&free).select_columns(&free);
        let hfz = h.select_rows(&free).select_columns(&zero);
        let dz = DVector::from_iterator(zero.len(), zero.iter().map(|&z| dw[z]));
        let rhs = -(hfz * dz);
        let sol = hff.lu().solve(&rhs).ok_or(OracleError::Singular)?;
        for (i, &f) in free.iter().enumerate() {
            dw[f] = sol[i];
        }
    }
    let loss = 0.5 * dw.dot(&(h * &dw));
    let row = (0..k)
        .map(|e| if zero_set.contains(e) { 0.0 } else { w[e] + dw[e] })
        .collect();
    Ok((loss, row))
}

/// Loss of a mask summed over rows, each row compensated independently.
pub fn mask_loss(
    spec: &CompiledSpec,
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
    mask: &MaskGrid,
) -> Result<f64, OracleError> {
    let (m, k) = w.shape();
    if spec.storage_size() != m * k {
        return Err(OracleError::Shape(format!(
            "spec addresses {} elements, weights are {m}x{k}",
            spec.storage_size()
        )));
    }
    let mut per_row: Vec<Vec<usize>> = vec![Vec::new(); m];
    for e in spec.element_mask(mask).iter() {
        per_row[e / k].push(e % k);
    }
    per_row.iter().enumerate().try_fold(0.0, |acc, (r, cols)| {
        if cols.is_empty() {
            return Ok(acc);
        }
        let row: Vec<f64> = w.row(r).iter().copied().collect();
        let (loss, _) = exact_compensated_loss(&row, h, &ElementSet::from_indices(cols.iter().copied()))?;
        Ok(acc + loss)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub best_mask: MaskGrid,
    pub best_loss: f64,
    /// Every enumerated mask (retained block ordinals) with its loss.
    pub all_losses: Vec<(Vec<usize>, f64)>,
}

fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..r).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..r).rev().find(|&i| cur[i] != i + n - r) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..r {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

fn binomial(n: usize, r: usize) -> u128 {
    (0..r).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Exhaustive search over every per-scope keep-set for the mask with the
/// smallest compensated loss. Ties keep the first mask enumerated.
pub fn brute_force_best_mask(
    spec: &CompiledSpec,
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Result<OracleResult, OracleError> {
    let per_scope = binomial(spec.blocks_per_scope(), spec.keep());
    let total = (0..spec.num_scopes()).try_fold(1u128, |acc, _| {
        let t = acc.saturating_mul(per_scope);
        (t <= MAX_ENUMERATION).then_some(t).ok_or(t)
    });
    let total = total.map_err(OracleError::TooLarge)?;
    let choices = combinations(spec.blocks_per_scope(), spec.keep());
    let scopes: Vec<&[usize]> = (0..spec.num_scopes())
        .map(|s| spec.scope_blocks(s))
        .collect::<Result<_, _>>()?;

    let mut all = Vec::with_capacity(total as usize);
    let mut best: Option<(MaskGrid, f64)> = None;
    let mut digits = vec![0usize; scopes.len()];
    loop {
        let mut retained = vec![false; spec.num_blocks()];
        for (s, &d) in digits.iter().enumerate() {
            for &i in &choices[d] {
                retained[scopes[s][i]] = true;
            }
        }
        let mask = MaskGrid { retained };
        let loss = mask_loss(spec, w, h, &mask)?;
        all.push((mask.retained_blocks(), loss));
        if best.as_ref().is_none_or(|(_, b)| loss < *b) {
            best = Some((mask, loss));
        }
        let Some(pos) = digits.iter().position(|&d| d + 1 < choices.len()) else {
            break;
        };
        digits[pos] += 1;
        for d in &mut digits[..pos] {
            *d = 0;
        }
    }
    let (best_mask, best_loss) = best.expect("at least one mask");
    Ok(OracleResult {
        best_mask,
        best_loss,
        all_losses: all,
    })
}
