//! Coupling: aligning block or scope grids of several tensors so that they
//! are pruned jointly.

use serde::{Deserialize, Serialize};

use super::{CompiledSpec, CouplingEntry, MaskGrid, SparsitySpec, SpecDocument, SpecError};
use crate::layout::{CoordIter, ElementSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingLevel {
    /// Blocks at the same permuted grid coordinate form one coupled block;
    /// their saliencies are summed.
    Block,
    /// Scopes at the same permuted coordinate are merged; member blocks
    /// compete individually against the pooled keep budget.
    Scope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMember {
    pub tensor: String,
    pub spec: SparsitySpec,
    /// `permuted[i] = grid[permutation[i]]`.
    pub permutation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSpec {
    pub members: Vec<CouplingMember>,
    pub level: CouplingLevel,
}

impl CouplingSpec {
    pub fn compile(&self) -> Result<CompiledCoupling, SpecError> {
        CompiledCoupling::new(self)
    }

    pub fn to_document(&self) -> SpecDocument {
        let base = &self.members[0].spec;
        let mut doc = SpecDocument::from_spec(base);
        doc.coupling = Some(
            self.members
                .iter()
                .map(|m| CouplingEntry {
                    tensor: m.tensor.clone(),
                    permutation: m.permutation.clone(),
                    spec: (m.spec != *base).then(|| Box::new(SpecDocument::from_spec(&m.spec))),
                })
                .collect(),
        );
        doc.coupling_level = Some(self.level);
        doc
    }
}

#[derive(Debug, Clone)]
struct Member {
    tensor: String,
    spec: CompiledSpec,
    permutation: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CompiledCoupling {
    level: CouplingLevel,
    members: Vec<Member>,
    /// Common permuted block grid, when all members agree on it.
    grid: Option<Vec<usize>>,
    /// Scope extents over the common grid (block level only).
    scope: Vec<usize>,
    scope_grid: Vec<usize>,
    keep: usize,
}

fn permute(v: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| v[p]).collect()
}

fn unpermute(v: &[usize], perm: &[usize]) -> Vec<usize> {
    let mut out = vec![0; v.len()];
    for (i, &p) in perm.iter().enumerate() {
        out[p] = v[i];
    }
    out
}

fn pack(extents: &[usize], coord: &[usize]) -> usize {
    coord.iter().zip(extents).rev().fold(0, |acc, (&c, &g)| acc * g + c)
}

fn agree(
    what: &str,
    members: &[Member],
    f: impl Fn(&Member) -> Vec<usize>,
) -> Result<Vec<usize>, SpecError> {
    let first = f(&members[0]);
    for m in &members[1..] {
        let other = f(m);
        if other != first {
            return Err(SpecError::GridShapeMismatch(format!(
                "{what} of '{}' is {:?} but '{}' has {:?}",
                members[0].tensor, first, m.tensor, other
            )));
        }
    }
    Ok(first)
}

impl CompiledCoupling {
    pub fn new(spec: &CouplingSpec) -> Result<Self, SpecError> {
        if spec.members.is_empty() {
            return Err(SpecError::GridShapeMismatch("coupling has no members".into()));
        }
        let members = spec
            .members
            .iter()
            .map(|m| {
                let compiled = m.spec.compile()?;
                let arity = compiled.grid_shape().len();
                let mut sorted = m.permutation.clone();
                sorted.sort_unstable();
                if sorted != (0..arity).collect::<Vec<_>>() {
                    return Err(SpecError::BadPermutation {
                        perm: m.permutation.clone(),
                        arity,
                    });
                }
                Ok(Member {
                    tensor: m.tensor.clone(),
                    spec: compiled,
                    permutation: m.permutation.clone(),
                })
            })
            .collect::<Result<Vec<_>, SpecError>>()?;

        let block_grid = agree("permuted block grid", &members, |m| {
            permute(m.spec.grid_shape(), &m.permutation)
        });
        let scope_grid = agree("permuted scope grid", &members, |m| {
            permute(m.spec.scope_grid_shape(), &m.permutation)
        })?;
        let (grid, scope, keep) = match spec.level {
            CouplingLevel::Block => {
                let grid = block_grid?;
                let scope = agree("permuted scope shape", &members, |m| {
                    permute(&m.spec.spec().scope.0, &m.permutation)
                })?;
                let keep = agree("keep", &members, |m| vec![m.spec.keep()])?[0];
                (Some(grid), scope, keep)
            }
            CouplingLevel::Scope => {
                let keep = members.iter().map(|m| m.spec.keep()).sum();
                (block_grid.ok(), Vec::new(), keep)
            }
        };
        Ok(CompiledCoupling {
            level: spec.level,
            members,
            grid,
            scope,
            scope_grid,
            keep,
        })
    }

    pub fn level(&self) -> CouplingLevel {
        self.level
    }

    pub fn keep(&self) -> usize {
        self.keep
    }

    pub fn member_specs(&self) -> impl Iterator<Item = (&str, &CompiledSpec)> {
        self.members.iter().map(|m| (m.tensor.as_str(), &m.spec))
    }

    /// The common permuted block grid.
    pub fn grid_shape(&self) -> Result<&[usize], SpecError> {
        self.grid.as_deref().ok_or_else(|| {
            SpecError::GridShapeMismatch("members disagree on the permuted block grid".into())
        })
    }

    fn member_block(&self, m: &Member, coord: &[usize]) -> Result<usize, SpecError> {
        m.spec.block_ordinal(&unpermute(coord, &m.permutation))
    }

    /// Per-tensor element sets of the coupled block at a permuted grid coordinate.
    pub fn coupled_block_elements(
        &self,
        coord: &[usize],
    ) -> Result<Vec<(String, ElementSet)>, SpecError> {
        let grid = self.grid_shape()?;
        if coord.len() != grid.len() || coord.iter().zip(grid).any(|(c, g)| c >= g) {
            return Err(SpecError::OutOfBounds {
                what: "coupled grid coordinate",
                index: pack(grid, coord),
                count: grid.iter().product(),
            });
        }
        self.members
            .iter()
            .map(|m| Ok((m.tensor.clone(), m.spec.block_elements(self.member_block(m, coord)?)?)))
            .collect()
    }

    /// Sums member block scores onto the common grid (ordinals pack
    /// dimension 0 fastest).
    pub fn aggregate_saliency(&self, per_member: &[Vec<f64>]) -> Result<Vec<f64>, SpecError> {
        let grid = self.grid_shape()?.to_vec();
        if per_member.len() != self.members.len() {
            return Err(SpecError::GridShapeMismatch(format!(
                "expected scores for {} members, got {}",
                self.members.len(),
                per_member.len()
            )));
        }
        let mut total = vec![0.0; grid.iter().product()];
        for (m, scores) in self.members.iter().zip(per_member) {
            if scores.len() != m.spec.num_blocks() {
                return Err(SpecError::ScoreCount {
                    expected: m.spec.num_blocks(),
                    got: scores.len(),
                });
            }
            for coord in CoordIter::new(&grid) {
                total[pack(&grid, &coord)] += scores[self.member_block(m, &coord)?];
            }
        }
        Ok(total)
    }

    /// Joint keep/prune decisions, returned as one mask per member.
    pub fn threshold(&self, per_member: &[Vec<f64>]) -> Result<Vec<MaskGrid>, SpecError> {
        match self.level {
            CouplingLevel::Block => self.threshold_blocks(per_member),
            CouplingLevel::Scope => self.threshold_scopes(per_member),
        }
    }

    fn threshold_blocks(&self, per_member: &[Vec<f64>]) -> Result<Vec<MaskGrid>, SpecError> {
        let grid = self.grid_shape()?.to_vec();
        let total = self.aggregate_saliency(per_member)?;
        if let Some(block) = total.iter().position(|s| !s.is_finite()) {
            return Err(SpecError::NonFiniteScore { block });
        }
        let mut masks: Vec<MaskGrid> = self
            .members
            .iter()
            .map(|m| MaskGrid {
                retained: vec![false; m.spec.num_blocks()],
            })
            .collect();
        for scope_coord in CoordIter::new(&self.scope_grid) {
            let mut members: Vec<(usize, Vec<usize>)> = CoordIter::new(&self.scope)
                .map(|o| {
                    let c: Vec<usize> = (0..grid.len())
                        .map(|k| scope_coord[k] * self.scope[k] + o[k])
                        .collect();
                    (pack(&grid, &c), c)
                })
                .collect();
            members.sort_by(|a, b| total[b.0].total_cmp(&total[a.0]).then(a.0.cmp(&b.0)));
            for (_, coord) in members.into_iter().take(self.keep) {
                for (m, mask) in self.members.iter().zip(masks.iter_mut()) {
                    mask.retained[self.member_block(m, &coord)?] = true;
                }
            }
        }
        Ok(masks)
    }

    fn threshold_scopes(&self, per_member: &[Vec<f64>]) -> Result<Vec<MaskGrid>, SpecError> {
        if per_member.len() != self.members.len() {
            return Err(SpecError::GridShapeMismatch(format!(
                "expected scores for {} members, got {}",
                self.members.len(),
                per_member.len()
            )));
        }
        for (m, s) in self.members.iter().zip(per_member) {
            if s.len() != m.spec.num_blocks() {
                return Err(SpecError::ScoreCount {
                    expected: m.spec.num_blocks(),
                    got: s.len(),
                });
            }
            if let Some(block) = s.iter().position(|x| !x.is_finite()) {
                return Err(SpecError::NonFiniteScore { block });
            }
        }
        let mut masks: Vec<MaskGrid> = self
            .members
            .iter()
            .map(|m| MaskGrid {
                retained: vec![false; m.spec.num_blocks()],
            })
            .collect();
        for scope_coord in CoordIter::new(&self.scope_grid) {
            let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
            for (i, m) in self.members.iter().enumerate() {
                let own = unpermute(&scope_coord, &m.permutation);
                let l = pack(m.spec.scope_grid_shape(), &own);
                for &j in m.spec.scope_blocks(l)? {
                    candidates.push((i, j, per_member[i][j]));
                }
            }
            candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
            for (i, j, _) in candidates.into_iter().take(self.keep) {
                masks[i].retained[j] = true;
            }
        }
        Ok(masks)
    }
}
