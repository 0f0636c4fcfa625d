//! Block pruners: S-OBD, S-OBS with Schur-maintained inverse Hessians,
//! Wanda, and a column-sequential SparseGPT-style baseline.

mod obs;
mod saliency;
mod sparsegpt;

pub use obs::prune_scope_obs;
pub use saliency::{obs_update, row_block_saliency, saliency_obd, saliency_obs, saliency_wanda};
pub use sparsegpt::sparsegpt_like;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hessian::{damp_and_invert, empirical_hessian, CalibrationSet, HessianError, DEFAULT_LAMBDA_REL};
use crate::spec::{CompiledSpec, MaskGrid, SpecError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PruneError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Hessian(#[from] HessianError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("reference output is zero")]
    ZeroReference,
    #[error("unsupported: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "s-obd")]
    SObd,
    #[serde(rename = "s-obs")]
    SObs,
    #[serde(rename = "wanda")]
    Wanda,
    #[serde(rename = "sparsegpt")]
    SparseGptLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderMode {
    /// Score once, prune the lowest blocks in increasing initial saliency.
    Static,
    /// Re-score every surviving block of the scope after each update and
    /// prune the current minimum.
    #[default]
    Greedy,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::SObd => "s-obd",
            Method::SObs => "s-obs",
            Method::Wanda => "wanda",
            Method::SparseGptLike => "sparsegpt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Method::SObd, Method::SObs, Method::Wanda, Method::SparseGptLike]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method '{s}'"))
    }
}

impl OrderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OrderMode::Static => "static",
            OrderMode::Greedy => "greedy",
        }
    }
}

impl FromStr for OrderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(OrderMode::Static),
            "greedy" => Ok(OrderMode::Greedy),
            _ => Err(format!("unknown order mode '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    pub method: Method,
    pub order_mode: OrderMode,
    pub lambda_rel: f64,
    /// Overrides the spec's keep count.
    pub keep: Option<usize>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            method: Method::SObs,
            order_mode: OrderMode::Greedy,
            lambda_rel: DEFAULT_LAMBDA_REL,
            keep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeReport {
    pub scope: usize,
    pub retained: Vec<usize>,
    pub pruned_saliency_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: Method,
    /// Only meaningful for S-OBS.
    pub order_mode: Option<OrderMode>,
    pub per_scope: Vec<ScopeReport>,
    /// Scores at selection time, by block ordinal.
    pub per_block_saliency: Vec<f64>,
    /// Sum of pruned saliencies at the time each block was pruned.
    pub predicted_loss_increase: f64,
    pub relative_output_error: Option<f64>,
    pub wall_time_s: f64,
    pub fallback_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub weights: DMatrix<f64>,
    pub mask: MaskGrid,
    pub report: PruneReport,
}

/// Maps each block to its per-row column sets, and partitions rows into
/// groups that share no scope with one another.
#[derive(Debug, Clone)]
pub(crate) struct RowBlocks {
    /// `parts[j]` lists `(row, columns)` with rows and columns ascending.
    pub parts: Vec<Vec<(usize, Vec<usize>)>>,
    pub groups: Vec<RowGroup>,
}

#[derive(Debug, Clone)]
pub(crate) struct RowGroup {
    pub rows: Vec<usize>,
    pub scopes: Vec<usize>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

impl RowBlocks {
    pub fn new(spec: &CompiledSpec, m: usize, k: usize) -> Result<Self, PruneError> {
        if spec.storage_size() != m * k {
            return Err(PruneError::Shape(format!(
                "spec addresses {} elements but the weight matrix is {m}x{k}",
                spec.storage_size()
            )));
        }
        let parts: Vec<Vec<(usize, Vec<usize>)>> = (0..spec.num_blocks())
            .map(|j| {
                let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
                for e in spec.block_elements(j).expect("ordinal in range").iter() {
                    let (r, c) = (e / k, e % k);
                    match out.last_mut() {
                        Some((row, cols)) if *row == r => cols.push(c),
                        _ => out.push((r, vec![c])),
                    }
                }
                out
            })
            .collect();

        let mut parent: Vec<usize> = (0..m).collect();
        let mut touched = vec![false; m];
        for s in 0..spec.num_scopes() {
            let mut first = None;
            for &j in spec.scope_blocks(s)? {
                for (r, _) in &parts[j] {
                    touched[*r] = true;
                    match first {
                        None => first = Some(*r),
                        Some(f) => {
                            let (a, b) = (find(&mut parent, f), find(&mut parent, *r));
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                }
            }
        }
        let mut by_root: Vec<Option<usize>> = vec![None; m];
        let mut groups: Vec<RowGroup> = Vec::new();
        for r in 0..m {
            if !touched[r] {
                continue;
            }
            let root = find(&mut parent, r);
            let g = *by_root[root].get_or_insert_with(|| {
                groups.push(RowGroup {
                    rows: Vec::new(),
                    scopes: Vec::new(),
                });
                groups.len() - 1
            });
            groups[g].rows.push(r);
        }
        for s in 0..spec.num_scopes() {
            let j = spec.scope_blocks(s)?[0];
            let root = find(&mut parent, parts[j][0].0);
            groups[by_root[root].expect("touched row")].scopes.push(s);
        }
        Ok(RowBlocks { parts, groups })
    }
}

/// `||X (W_hat - W)^T||_F / ||X W^T||_F`.
pub fn relative_output_error(
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    w_hat: &DMatrix<f64>,
) -> Result<f64, PruneError> {
    if w.shape() != w_hat.shape() || x.ncols() != w.ncols() {
        return Err(PruneError::Shape(format!(
            "X is {:?}, W is {:?}, W_hat is {:?}",
            x.shape(),
            w.shape(),
            w_hat.shape()
        )));
    }
    let reference = (x * w.transpose()).norm();
    if reference == 0.0 {
        return Err(PruneError::ZeroReference);
    }
    Ok((x * (w_hat - w).transpose()).norm() / reference)
}

/// Zeroes every element of every pruned block.
pub fn apply_mask(spec: &CompiledSpec, w: &DMatrix<f64>, mask: &MaskGrid) -> DMatrix<f64> {
    let k = w.ncols();
    let mut out = w.clone();
    for e in spec.element_mask(mask).iter() {
        out[(e / k, e % k)] = 0.0;
    }
    out
}

pub(crate) fn scope_reports(spec: &CompiledSpec, mask: &MaskGrid, pruned_sum: &[f64]) -> Vec<ScopeReport> {
    (0..spec.num_scopes())
        .map(|s| ScopeReport {
            scope: s,
            retained: spec
                .scope_blocks(s)
                .expect("scope in range")
                .iter()
                .copied()
                .filter(|&j| mask.is_retained(j))
                .collect(),
            pruned_saliency_sum: pruned_sum[s],
        })
        .collect()
}

/// Prunes by thresholding fixed scores, without compensation.
fn prune_by_scores(
    spec: &CompiledSpec,
    w: &DMatrix<f64>,
    scores: Vec<f64>,
    method: Method,
) -> Result<PruneOutcome, PruneError> {
    let mask = spec.hard_threshold(&scores)?;
    let mut pruned_sum = vec![0.0; spec.num_scopes()];
    for j in mask.pruned_blocks() {
        pruned_sum[spec.block_to_scope(j)?] += scores[j];
    }
    Ok(PruneOutcome {
        weights: apply_mask(spec, w, &mask),
        report: PruneReport {
            method,
            order_mode: None,
            per_scope: scope_reports(spec, &mask, &pruned_sum),
            predicted_loss_increase: pruned_sum.iter().sum(),
            per_block_saliency: scores,
            relative_output_error: None,
            wall_time_s: 0.0,
            fallback_rows: Vec::new(),
        },
        mask,
    })
}

/// Prunes `w` (M x K) against the calibration inputs (N x K).
pub fn prune(
    spec: &CompiledSpec,
    w: &DMatrix<f64>,
    calib: &CalibrationSet,
    config: &PruneConfig,
) -> Result<PruneOutcome, PruneError> {
    let start = Instant::now();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(PruneError::Hessian(HessianError::NonFinite));
    }
    if calib.num_features() != w.ncols() {
        return Err(PruneError::Shape(format!(
            "weights have {} columns but calibration has {} features",
            w.ncols(),
            calib.num_features()
        )));
    }
    let spec = match config.keep {
        Some(keep) => spec.with_keep(keep)?,
        None => spec.clone(),
    };
    let h = empirical_hessian(calib);
    let mut outcome = match config.method {
        Method::SObd => {
            let diag: Vec<f64> = h.diagonal().iter().copied().collect();
            prune_by_scores(&spec, w, saliency_obd(&spec, w, &diag)?, Method::SObd)?
        }
        Method::Wanda => prune_by_scores(&spec, w, saliency_wanda(&spec, w, calib)?, Method::Wanda)?,
        Method::SObs => {
            let state = damp_and_invert(&h, config.lambda_rel)?;
            prune_scope_obs(&spec, w, &state, config.order_mode)?
        }
        Method::SparseGptLike => {
            let state = damp_and_invert(&h, config.lambda_rel)?;
            sparsegpt_like(&spec, w, &state)?
        }
    };
    outcome.report.relative_output_error =
        match relative_output_error(calib.samples(), w, &outcome.weights) {
            Ok(e) => Some(e),
            Err(PruneError::ZeroReference) => None,
            Err(e) => return Err(e),
        };
    outcome.report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{make_pattern, PatternDims, PatternName};
    use approx::assert_relative_eq;

    fn compiled(name: PatternName, dims: PatternDims) -> CompiledSpec {
        make_pattern(name, &dims).unwrap().single().unwrap().compile().unwrap()
    }

    #[test]
    fn row_groups() {
        let c = compiled(PatternName::TwoFour, PatternDims::mk(3, 8));
        let rb = RowBlocks::new(&c, 3, 8).unwrap();
        assert_eq!(rb.groups.len(), 3);
        assert_eq!(rb.groups[1].rows, vec![1]);
        assert_eq!(rb.groups[1].scopes, vec![1, 4]);

        let c16 = compiled(PatternName::Col16Block, PatternDims::mk(16, 16));
        let rb = RowBlocks::new(&c16, 16, 16).unwrap();
        assert_eq!(rb.groups.len(), 8);
        assert_eq!(rb.groups[3].rows, vec![3, 11]);

        let p = compiled(PatternName::Partial24, PatternDims::d(8));
        let rb = RowBlocks::new(&p, 8, 8).unwrap();
        assert_eq!(rb.groups.len(), 6);
        assert_eq!(rb.groups[0].rows, vec![2]);
        assert!(RowBlocks::new(&p, 4, 8).is_err());
    }

    #[test]
    fn output_error_examples() {
        let x = DMatrix::<f64>::identity(3, 3);
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 2.0, 0.0, 1.0, 0.0]);
        assert_eq!(relative_output_error(&x, &w, &w).unwrap(), 0.0);
        assert_relative_eq!(
            relative_output_error(&x, &w, &DMatrix::zeros(2, 3)).unwrap(),
            1.0
        );
        let mut hat = w.clone();
        hat.column_mut(1).fill(0.0);
        assert_relative_eq!(
            relative_output_error(&x, &w, &hat).unwrap(),
            5f64.sqrt() / w.norm(),
            epsilon = 1e-15
        );
        assert_eq!(
            relative_output_error(&x, &DMatrix::zeros(2, 3), &w),
            Err(PruneError::ZeroReference)
        );
    }

    #[test]
    fn parse_names() {
        assert_eq!("s-obs".parse::<Method>().unwrap(), Method::SObs);
        assert_eq!("greedy".parse::<OrderMode>().unwrap(), OrderMode::Greedy);
        assert!("obs".parse::<Method>().is_err());
        assert_eq!(serde_json::to_string(&Method::SparseGptLike).unwrap(), "\"sparsegpt\"");
    }
}
