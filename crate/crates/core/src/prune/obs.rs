use std::cmp::Ordering;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::saliency::{obs_update, row_block_saliency};
use super::{scope_reports, Method, OrderMode, PruneError, PruneOutcome, PruneReport, RowBlocks, RowGroup};
use crate::hessian::{HessianError, HessianState};
use crate::spec::{CompiledSpec, MaskGrid};

/// Working copy of one row group: its weights and one inverse Hessian per row.
struct GroupState<'a> {
    parts: &'a [Vec<(usize, Vec<usize>)>],
    rows: &'a [usize],
    weights: Vec<Vec<f64>>,
    states: Vec<HessianState>,
}

#[derive(Default)]
struct GroupResult {
    weights: Vec<(usize, Vec<f64>)>,
    pruned: Vec<usize>,
    block_saliency: Vec<(usize, f64)>,
    scope_sums: Vec<(usize, f64)>,
    fallback: bool,
}

impl GroupState<'_> {
    fn local(&self, row: usize) -> usize {
        self.rows.binary_search(&row).expect("row belongs to group")
    }

    fn score(&self, j: usize) -> Result<f64, HessianError> {
        self.parts[j].iter().try_fold(0.0, |acc, (r, cols)| {
            let l = self.local(*r);
            Ok(acc + row_block_saliency(&self.weights[l], &self.states[l], cols)?)
        })
    }

    fn prune_block(&mut self, j: usize) -> Result<f64, HessianError> {
        let mut loss = 0.0;
        for (r, cols) in &self.parts[j] {
            let l = self.local(*r);
            loss += obs_update(&mut self.weights[l], &self.states[l], cols)?;
            self.states[l].schur_prune(cols)?;
        }
        Ok(loss)
    }
}

/// Descending score, lower ordinal first on ties: the order in which
/// blocks are kept.
fn keep_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn run_group(
    spec: &CompiledSpec,
    rb: &RowBlocks,
    group: &RowGroup,
    w: &DMatrix<f64>,
    initial: &HessianState,
    order: OrderMode,
) -> Result<GroupResult, HessianError> {
    let mut st = GroupState {
        parts: &rb.parts,
        rows: &group.rows,
        weights: group
            .rows
            .iter()
            .map(|&r| w.row(r).iter().copied().collect())
            .collect(),
        states: vec![initial.clone(); group.rows.len()],
    };
    let keep = spec.keep();
    let mut out = GroupResult::default();
    for &s in &group.scopes {
        let blocks = spec.scope_blocks(s).expect("scope in range");
        let mut scored = blocks
            .iter()
            .map(|&j| Ok((j, st.score(j)?)))
            .collect::<Result<Vec<_>, HessianError>>()?;
        out.block_saliency.extend(scored.iter().copied());
        let mut sum = 0.0;
        match order {
            OrderMode::Static => {
                scored.sort_by(keep_order);
                for &(j, _) in scored[keep..].iter().rev() {
                    sum += st.prune_block(j)?;
                    out.pruned.push(j);
                }
            }
            OrderMode::Greedy => {
                let mut alive: Vec<usize> = blocks.to_vec();
                for step in 0..blocks.len() - keep {
                    if step > 0 {
                        scored = alive
                            .iter()
                            .map(|&j| Ok((j, st.score(j)?)))
                            .collect::<Result<Vec<_>, HessianError>>()?;
                    }
                    let &(j, _) = scored.iter().max_by(|a, b| keep_order(a, b)).expect("non-empty");
                    sum += st.prune_block(j)?;
                    out.pruned.push(j);
                    alive.retain(|&x| x != j);
                }
            }
        }
        out.scope_sums.push((s, sum));
    }
    out.weights = group.rows.iter().copied().zip(st.weights).collect();
    Ok(out)
}

/// Magnitude pruning without compensation, for groups whose inverse
/// Hessian blocks could not be inverted.
fn magnitude_group(spec: &CompiledSpec, rb: &RowBlocks, group: &RowGroup, w: &DMatrix<f64>) -> GroupResult {
    let mut out = GroupResult {
        fallback: true,
        ..Default::default()
    };
    let mut weights: Vec<Vec<f64>> = group
        .rows
        .iter()
        .map(|&r| w.row(r).iter().copied().collect())
        .collect();
    for &s in &group.scopes {
        let mut scored: Vec<(usize, f64)> = spec
            .scope_blocks(s)
            .expect("scope in range")
            .iter()
            .map(|&j| {
                let e: f64 = rb.parts[j]
                    .iter()
                    .flat_map(|(r, cols)| cols.iter().map(move |&c| w[(*r, c)].powi(2)))
                    .sum();
                (j, 0.5 * e)
            })
            .collect();
        out.block_saliency.extend(scored.iter().copied());
        scored.sort_by(keep_order);
        let mut sum = 0.0;
        for &(j, score) in &scored[spec.keep()..] {
            for (r, cols) in &rb.parts[j] {
                let l = group.rows.binary_search(r).expect("row in group");
                for &c in cols {
                    weights[l][c] = 0.0;
                }
            }
            sum += score;
            out.pruned.push(j);
        }
        out.scope_sums.push((s, sum));
    }
    out.weights = group.rows.iter().copied().zip(weights).collect();
    out
}

/// Structured OBS over every scope: score, prune the lowest blocks one at a
/// time, compensate the surviving weights and update the row's inverse
/// Hessian after each block.
///
/// Each output row keeps its own copy of `initial`. Rows that share a scope
/// or a block are processed together; independent groups run in parallel.
/// A group hitting a singular block falls back to magnitude pruning and is
/// listed in `fallback_rows`.
pub fn prune_scope_obs(
    spec: &CompiledSpec,
    w: &DMatrix<f64>,
    initial: &HessianState,
    order: OrderMode,
) -> Result<PruneOutcome, PruneError> {
    let rb = RowBlocks::new(spec, w.nrows(), w.ncols())?;
    if initial.dim() != w.ncols() {
        return Err(PruneError::Shape(format!(
            "Hessian is {0}x{0} for {1} columns",
            initial.dim(),
            w.ncols()
        )));
    }
    if !initial.pruned_indices().is_empty() {
        return Err(PruneError::Unsupported("initial Hessian state already has pruned coordinates".into()));
    }
    let results = rb
        .groups
        .par_iter()
        .map(|g| match run_group(spec, &rb, g, w, initial, order) {
            Ok(r) => Ok(r),
            Err(HessianError::SingularBlock { .. }) => Ok(magnitude_group(spec, &rb, g, w)),
            Err(e) => Err(PruneError::from(e)),
        })
        .collect::<Result<Vec<_>, PruneError>>()?;

    let mut weights = w.clone();
    let mut retained = vec![true; spec.num_blocks()];
    let mut per_block = vec![0.0; spec.num_blocks()];
    let mut scope_sums = vec![0.0; spec.num_scopes()];
    let mut fallback_rows = Vec::new();
    for (g, r) in rb.groups.iter().zip(results) {
        for (row, values) in r.weights {
            for (c, v) in values.into_iter().enumerate() {
                weights[(row, c)] = v;
            }
        }
        for j in r.pruned {
            retained[j] = false;
        }
        for (j, s) in r.block_saliency {
            per_block[j] = s;
        }
        for (s, sum) in r.scope_sums {
            scope_sums[s] = sum;
        }
        if r.fallback {
            fallback_rows.extend(g.rows.iter().copied());
        }
    }
    fallback_rows.sort_unstable();
    let mask = MaskGrid { retained };
    Ok(PruneOutcome {
        weights,
        report: PruneReport {
            method: Method::SObs,
            order_mode: Some(order),
            per_scope: scope_reports(spec, &mask, &scope_sums),
            predicted_loss_increase: scope_sums.iter().sum(),
            per_block_saliency: per_block,
            relative_output_error: None,
            wall_time_s: 0.0,
            fallback_rows,
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
    fn identity_hessian_two_four() {
        let spec = compiled(PatternName::TwoFour, PatternDims::mk(1, 4));
        let w = DMatrix::from_row_slice(1, 4, &[0.5, -2.0, 0.1, 3.0]);
        let state = damp_and_invert(&DMatrix::identity(4, 4), 0.0).unwrap();
        for order in [OrderMode::Static, OrderMode::Greedy] {
            let out = prune_scope_obs(&spec, &w, &state, order).unwrap();
            assert_eq!(out.weights.as_slice(), &[0.0, -2.0, 0.0, 3.0]);
            assert_eq!(out.mask.retained_blocks(), vec![1, 3]);
            assert!((out.report.predicted_loss_increase - 0.13).abs() < 1e-15);
        }
    }

    #[test]
    fn keep_all_is_identity() {
        let spec = compiled(PatternName::TwoFour, PatternDims::mk(2, 8)).with_keep(4).unwrap();
        let w = DMatrix::from_fn(2, 8, |r, c| (r * 8 + c) as f64 - 3.5);
        let h = DMatrix::from_fn(8, 8, |i, j| if i == j { 2.0 } else { 0.3 });
        let state = damp_and_invert(&h, 0.01).unwrap();
        let out = prune_scope_obs(&spec, &w, &state, OrderMode::Greedy).unwrap();
        assert_eq!(out.weights, w);
        assert!(out.mask.pruned_blocks().is_empty());
    }

    #[test]
    fn singular_rows_fall_back_to_magnitude() {
        let spec = compiled(PatternName::FourEight, PatternDims::mk(1, 8));
        let w = DMatrix::from_row_slice(1, 8, &[1.0, 1.0, 0.1, 0.1, 2.0, 2.0, 0.2, 0.3]);
        let mut state = damp_and_invert(&DMatrix::identity(8, 8), 0.0).unwrap();
        // Corrupt the inverse so every 2x2 block is singular.
        let mut broken = state.h_inv().clone();
        for i in (0..8).step_by(2) {
            broken[(i, i + 1)] = 1.0;
            broken[(i + 1, i)] = 1.0;
        }
        state = crate::hessian::tests_support::with_inverse(state, broken);
        let out = prune_scope_obs(&spec, &w, &state, OrderMode::Greedy).unwrap();
        assert_eq!(out.report.fallback_rows, vec![0]);
        assert_eq!(out.mask.retained_blocks(), vec![0, 2]);
        assert_eq!(out.weights.as_slice(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }
}
