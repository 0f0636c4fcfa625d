use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;

use super::{scope_reports, Method, PruneError, PruneOutcome, PruneReport, RowBlocks};
use crate::hessian::{HessianError, HessianState};
use crate::spec::{CompiledSpec, MaskGrid};

/// Column-sequential OBS in the SparseGPT style.
///
/// All rows share one elimination order (left to right) and one inverse
/// Hessian trajectory, taken from the upper Cholesky factor `U` of `H^-1`.
/// When column `i` is the first column of a scope, that scope keeps the
/// blocks with the largest `sum w^2 / U_ee^2` of the current weights.
/// Every pruned column's error is then spread over the columns to its right.
///
/// Every scope must lie within a single row.
pub fn sparsegpt_like(
    spec: &CompiledSpec,
    w: &DMatrix<f64>,
    initial: &HessianState,
) -> Result<PruneOutcome, PruneError> {
    let (m, k) = w.shape();
    let rb = RowBlocks::new(spec, m, k)?;
    if initial.dim() != k {
        return Err(PruneError::Shape(format!("Hessian is {0}x{0} for {k} columns", initial.dim())));
    }
    if !initial.pruned_indices().is_empty() {
        return Err(PruneError::Unsupported("initial Hessian state already has pruned coordinates".into()));
    }

    // (row, trigger column, scope) for every scope.
    let mut triggers: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m];
    for s in 0..spec.num_scopes() {
        let blocks = spec.scope_blocks(s)?;
        let row = rb.parts[blocks[0]][0].0;
        let mut first = usize::MAX;
        for &j in blocks {
            for (r, cols) in &rb.parts[j] {
                if *r != row {
                    return Err(PruneError::Unsupported(format!(
                        "sparsegpt needs scopes within one row; scope {s} spans rows {row} and {r}"
                    )));
                }
                first = first.min(cols[0]);
            }
        }
        triggers[row].push((first, s));
    }
    for t in &mut triggers {
        t.sort_unstable();
    }

    let u = Cholesky::new(initial.h_inv().clone())
        .ok_or(HessianError::SingularAfterDamping { cond: f64::INFINITY })?
        .l()
        .transpose();
    let keep = spec.keep();

    struct RowResult {
        values: Vec<f64>,
        pruned: Vec<usize>,
        block_scores: Vec<(usize, f64)>,
        scope_sums: Vec<(usize, f64)>,
    }

    let results: Vec<RowResult> = (0..m)
        .into_par_iter()
        .map(|r| {
            let mut row: Vec<f64> = w.row(r).iter().copied().collect();
            let mut out = RowResult {
                values: Vec::new(),
                pruned: Vec::new(),
                block_scores: Vec::new(),
                scope_sums: Vec::new(),
            };
            if triggers[r].is_empty() {
                out.values = row;
                return out;
            }
            let mut zero = vec![false; k];
            let mut next = 0;
            let mut sums: Vec<(usize, f64)> = Vec::new();
            for i in 0..k {
                while next < triggers[r].len() && triggers[r][next].0 == i {
                    let s = triggers[r][next].1;
                    next += 1;
                    let mut scored: Vec<(usize, f64)> = spec
                        .scope_blocks(s)
                        .expect("scope in range")
                        .iter()
                        .map(|&j| {
                            let cols = &rb.parts[j][0].1;
                            let score: f64 = cols.iter().map(|&c| 0.5 * (row[c] / u[(c, c)]).powi(2)).sum();
                            (j, score)
                        })
                        .collect();
                    out.block_scores.extend(scored.iter().copied());
                    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    for &(j, _) in &scored[keep..] {
                        for &c in &rb.parts[j][0].1 {
                            zero[c] = true;
                        }
                        out.pruned.push(j);
                    }
                    sums.push((s, 0.0));
                }
                if !zero[i] {
                    continue;
                }
                let d = u[(i, i)];
                let err = row[i] / d;
                let s = spec
                    .block_to_scope(spec.element_to_block(r * k + i).expect("pruned element in view"))
                    .expect("block in range");
                if let Some(entry) = sums.iter_mut().find(|(x, _)| *x == s) {
                    entry.1 += 0.5 * err * err;
                }
                for j in i + 1..k {
                    row[j] -= err * u[(i, j)];
                }
                row[i] = 0.0;
            }
            out.values = row;
            out.scope_sums = sums;
            out
        })
        .collect();

    let mut weights = w.clone();
    let mut retained = vec![true; spec.num_blocks()];
    let mut per_block = vec![0.0; spec.num_blocks()];
    let mut scope_sums = vec![0.0; spec.num_scopes()];
    for (r, res) in results.into_iter().enumerate() {
        for (c, v) in res.values.into_iter().enumerate() {
            weights[(r, c)] = v;
        }
        for j in res.pruned {
            retained[j] = false;
        }
        for (j, s) in res.block_scores {
            per_block[j] = s;
        }
        for (s, v) in res.scope_sums {
            scope_sums[s] = v;
        }
    }
    let mask = MaskGrid { retained };
    Ok(PruneOutcome {
        weights,
        report: PruneReport {
            method: Method::SparseGptLike,
            order_mode: None,
            per_scope: scope_reports(spec, &mask, &scope_sums),
            predicted_loss_increase: scope_sums.iter().sum(),
            per_block_saliency: per_block,
            relative_output_error: None,
            wall_time_s: 0.0,
            fallback_rows: Vec::new(),
        },
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hessian::damp_and_invert;
    use crate::spec::{make_pattern, PatternDims, PatternName};

    fn compiled(name: PatternName, dims: PatternDims) -> CompiledSpec {
        make_pattern(name, &dims).unwrap().single().unwrap().compile().unwrap()
    }

    #[test]
    fn identity_hessian_matches_magnitude() {
        let spec = compiled(PatternName::TwoFour, PatternDims::mk(2, 8));
        let w = DMatrix::from_row_slice(
            2,
            8,
            &[0.5, -2.0, 0.1, 3.0, 1.0, 0.2, -0.3, 0.9, 4.0, 3.0, 2.0, 1.0, -1.0, 1.5, 0.1, 0.0],
        );
        let state = damp_and_invert(&DMatrix::identity(8, 8), 0.0).unwrap();
        let out = sparsegpt_like(&spec, &w, &state).unwrap();
        let scores: Vec<f64> = (0..spec.num_blocks())
            .map(|j| {
                let e = spec.block_elements(j).unwrap().as_slice()[0];
                w[(e / 8, e % 8)].abs()
            })
            .collect();
        assert_eq!(out.mask, spec.hard_threshold(&scores).unwrap());
        assert_eq!(out.weights, super::super::apply_mask(&spec, &w, &out.mask));
    }

    #[test]
    fn keep_all_is_identity() {
        let spec = compiled(PatternName::TwoFour, PatternDims::mk(2, 8)).with_keep(4).unwrap();
        let w = DMatrix::from_fn(2, 8, |r, c| (r * 8 + c) as f64 - 3.5);
        let h = DMatrix::from_fn(8, 8, |i, j| if i == j { 2.0 } else { 0.3 });
        let state = damp_and_invert(&h, 0.01).unwrap();
        assert_eq!(sparsegpt_like(&spec, &w, &state).unwrap().weights, w);
    }

    #[test]
    fn rejects_cross_row_scopes() {
        let spec = compiled(PatternName::Col16Block, PatternDims::mk(16, 16));
        let state = damp_and_invert(&DMatrix::identity(16, 16), 0.0).unwrap();
        assert!(matches!(
            sparsegpt_like(&spec, &DMatrix::zeros(16, 16), &state),
            Err(PruneError::Unsupported(_))
        ));
    }
}
