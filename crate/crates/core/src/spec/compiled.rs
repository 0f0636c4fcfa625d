use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SparsitySpec, SpecError};
use crate::layout::{decode_row_major, encode_row_major, CoordIter, ElementSet};

const UNMAPPED: usize = usize::MAX;

/// A validated spec with its block grid, scope grid and index tables resolved.
///
/// Block and scope ordinals pack grid coordinates with dimension 0 varying
/// fastest (`j = sum_k j_k * prod_{l<k} g_l`). View coordinates, block
/// offsets and domain coordinates are enumerated with the last dimension
/// fastest. Use [`CompiledSpec::block_ordinal_to_row_major`] to convert.
#[derive(Debug, Clone)]
pub struct CompiledSpec {
    spec: SparsitySpec,
    grid: Vec<usize>,
    grid_strides: Vec<usize>,
    scope_grid: Vec<usize>,
    embedding: Option<Vec<usize>>,
    /// Storage index -> view enumeration ordinal.
    inverse: Vec<usize>,
    block_scope: Vec<usize>,
    scope_members: Vec<Vec<usize>>,
}

/// Per-block retention decisions, indexed by block ordinal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGrid {
    pub retained: Vec<bool>,
}

impl MaskGrid {
    pub fn all_retained(num_blocks: usize) -> Self {
        MaskGrid {
            retained: vec![true; num_blocks],
        }
    }

    pub fn is_retained(&self, block: usize) -> bool {
        self.retained[block]
    }

    pub fn retained_blocks(&self) -> Vec<usize> {
        (0..self.retained.len()).filter(|&j| self.retained[j]).collect()
    }

    pub fn pruned_blocks(&self) -> Vec<usize> {
        (0..self.retained.len()).filter(|&j| !self.retained[j]).collect()
    }
}

fn pack_col_major(extents: &[usize], coord: &[usize]) -> usize {
    coord
        .iter()
        .zip(extents)
        .rev()
        .fold(0, |acc, (&c, &g)| acc * g + c)
}

fn unpack_col_major(extents: &[usize], mut ordinal: usize) -> Vec<usize> {
    extents
        .iter()
        .map(|&g| {
            let c = ordinal % g;
            ordinal /= g;
            c
        })
        .collect()
}

impl CompiledSpec {
    pub fn new(spec: SparsitySpec) -> Result<Self, SpecError> {
        let violations = spec.validate();
        if !violations.is_empty() {
            return Err(SpecError::Invalid(violations));
        }
        let view = &spec.view.layout;
        let grid: Vec<usize> = view
            .shape()
            .iter()
            .zip(&spec.block.0)
            .map(|(s, b)| s / b)
            .collect();
        let grid_strides = view
            .stride()
            .iter()
            .zip(&spec.block.0)
            .map(|(d, b)| d * b)
            .collect();
        let scope_grid: Vec<usize> = grid.iter().zip(&spec.scope.0).map(|(g, s)| g / s).collect();

        let embedding = match (&spec.domain, &spec.phys) {
            (Some(d), Some(p)) => Some(d.embedding(p)?),
            (Some(d), None) => {
                // Only strided domains get here; validate() rejects boxes without phys.
                let phys = crate::layout::Layout::new(vec![spec.storage_size()], vec![1])?;
                Some(d.embedding(&phys)?)
            }
            _ => None,
        };

        let mut inverse = vec![UNMAPPED; spec.storage_size()];
        for (ordinal, local) in view.indices().enumerate() {
            let storage = embedding.as_ref().map_or(local, |e| e[local]);
            inverse[storage] = ordinal;
        }

        let num_blocks: usize = grid.iter().product();
        let num_scopes: usize = scope_grid.iter().product();
        let mut block_scope = Vec::with_capacity(num_blocks);
        let mut scope_members = vec![Vec::new(); num_scopes];
        for j in 0..num_blocks {
            let coord = unpack_col_major(&grid, j);
            let scope_coord: Vec<usize> = coord.iter().zip(&spec.scope.0).map(|(c, s)| c / s).collect();
            let l = pack_col_major(&scope_grid, &scope_coord);
            block_scope.push(l);
            scope_members[l].push(j);
        }

        Ok(CompiledSpec {
            spec,
            grid,
            grid_strides,
            scope_grid,
            embedding,
            inverse,
            block_scope,
            scope_members,
        })
    }

    pub fn spec(&self) -> &SparsitySpec {
        &self.spec
    }

    /// Same structure with a different per-scope keep count.
    pub fn with_keep(&self, keep: usize) -> Result<Self, SpecError> {
        let blocks = self.blocks_per_scope();
        if keep > blocks {
            return Err(SpecError::KeepTooLarge { keep, blocks });
        }
        let mut out = self.clone();
        out.spec.keep = keep;
        Ok(out)
    }

    pub fn keep(&self) -> usize {
        self.spec.keep
    }

    /// Blocks along each view dimension.
    pub fn grid_shape(&self) -> &[usize] {
        &self.grid
    }

    /// Linear distance between neighbouring blocks along each dimension.
    pub fn grid_strides(&self) -> &[usize] {
        &self.grid_strides
    }

    /// Scopes along each block-grid dimension.
    pub fn scope_grid_shape(&self) -> &[usize] {
        &self.scope_grid
    }

    pub fn num_blocks(&self) -> usize {
        self.block_scope.len()
    }

    pub fn num_scopes(&self) -> usize {
        self.scope_members.len()
    }

    pub fn block_size(&self) -> usize {
        self.spec.block.size()
    }

    pub fn blocks_per_scope(&self) -> usize {
        self.spec.scope.blocks_per_scope()
    }

    pub fn storage_size(&self) -> usize {
        self.inverse.len()
    }

    pub fn block_coord(&self, block: usize) -> Result<Vec<usize>, SpecError> {
        self.check_block(block)?;
        Ok(unpack_col_major(&self.grid, block))
    }

    pub fn block_ordinal(&self, coord: &[usize]) -> Result<usize, SpecError> {
        if coord.len() != self.grid.len() || coord.iter().zip(&self.grid).any(|(c, g)| c >= g) {
            return Err(SpecError::OutOfBounds {
                what: "block coordinate",
                index: coord.iter().copied().max().unwrap_or(0),
                count: self.num_blocks(),
            });
        }
        Ok(pack_col_major(&self.grid, coord))
    }

    /// Converts a block ordinal to the ordinal of the same grid coordinate
    /// enumerated with the last dimension fastest.
    pub fn block_ordinal_to_row_major(&self, block: usize) -> Result<usize, SpecError> {
        Ok(encode_row_major(&self.grid, &self.block_coord(block)?))
    }

    pub fn block_ordinal_from_row_major(&self, ordinal: usize) -> Result<usize, SpecError> {
        if ordinal >= self.num_blocks() {
            return Err(SpecError::OutOfBounds {
                what: "block",
                index: ordinal,
                count: self.num_blocks(),
            });
        }
        Ok(pack_col_major(&self.grid, &decode_row_major(&self.grid, ordinal)))
    }

    fn check_block(&self, block: usize) -> Result<(), SpecError> {
        if block >= self.num_blocks() {
            return Err(SpecError::OutOfBounds {
                what: "block",
                index: block,
                count: self.num_blocks(),
            });
        }
        Ok(())
    }

    fn check_scope(&self, scope: usize) -> Result<(), SpecError> {
        if scope >= self.num_scopes() {
            return Err(SpecError::OutOfBounds {
                what: "scope",
                index: scope,
                count: self.num_scopes(),
            });
        }
        Ok(())
    }

    fn to_storage(&self, local: usize) -> usize {
        self.embedding.as_ref().map_or(local, |e| e[local])
    }

    /// Storage indices of a block, in block-offset enumeration order.
    pub fn block_elements_ordered(&self, block: usize) -> Result<Vec<usize>, SpecError> {
        let coord = self.block_coord(block)?;
        let view = &self.spec.view.layout;
        let block_shape = &self.spec.block.0;
        let mut v = vec![0; coord.len()];
        Ok(CoordIter::new(block_shape)
            .map(|o| {
                for k in 0..coord.len() {
                    v[k] = coord[k] * block_shape[k] + o[k];
                }
                self.to_storage(view.index_unchecked(&v))
            })
            .collect())
    }

    pub fn block_elements(&self, block: usize) -> Result<ElementSet, SpecError> {
        Ok(ElementSet::from_indices(self.block_elements_ordered(block)?))
    }

    pub fn block_elements_at(&self, coord: &[usize]) -> Result<ElementSet, SpecError> {
        self.block_elements(self.block_ordinal(coord)?)
    }

    /// Element sets of every block, indexed by block ordinal.
    pub fn all_block_elements(&self) -> Vec<ElementSet> {
        (0..self.num_blocks())
            .map(|j| self.block_elements(j).expect("ordinal in range"))
            .collect()
    }

    /// View coordinate of a storage index.
    pub fn view_coord(&self, element: usize) -> Result<Vec<usize>, SpecError> {
        match self.inverse.get(element) {
            Some(&o) if o != UNMAPPED => Ok(decode_row_major(self.spec.view.layout.shape(), o)),
            _ => Err(SpecError::NotInView(element)),
        }
    }

    /// The block containing a storage index.
    pub fn element_to_block(&self, element: usize) -> Result<usize, SpecError> {
        let v = self.view_coord(element)?;
        let j: Vec<usize> = v.iter().zip(&self.spec.block.0).map(|(v, b)| v / b).collect();
        Ok(pack_col_major(&self.grid, &j))
    }

    pub fn block_to_scope(&self, block: usize) -> Result<usize, SpecError> {
        self.check_block(block)?;
        Ok(self.block_scope[block])
    }

    /// Block ordinals of a scope, ascending.
    pub fn scope_blocks(&self, scope: usize) -> Result<&[usize], SpecError> {
        self.check_scope(scope)?;
        Ok(&self.scope_members[scope])
    }

    pub fn scope_elements(&self, scope: usize) -> Result<ElementSet, SpecError> {
        Ok(ElementSet::from_indices(
            self.scope_blocks(scope)?
                .iter()
                .flat_map(|&j| self.block_elements_ordered(j).expect("member in range")),
        ))
    }

    /// All storage indices the spec governs.
    pub fn domain_elements(&self) -> ElementSet {
        ElementSet::from_indices(
            (0..self.spec.view.phys_size).map(|local| self.to_storage(local)),
        )
    }

    /// Block sparsity ratios a scope can realize: `k / |scope|` for every `k`.
    pub fn achievable_sparsities(&self) -> Vec<Ratio<usize>> {
        let n = self.blocks_per_scope();
        let mut out: Vec<Ratio<usize>> = (0..=n).map(|k| Ratio::new(k, n)).collect();
        out.dedup();
        out
    }

    /// Keeps the `keep` highest-scoring blocks of every scope. Equal scores
    /// favour the lower block ordinal.
    pub fn hard_threshold(&self, scores: &[f64]) -> Result<MaskGrid, SpecError> {
        if scores.len() != self.num_blocks() {
            return Err(SpecError::ScoreCount {
                expected: self.num_blocks(),
                got: scores.len(),
            });
        }
        if let Some(block) = scores.iter().position(|s| !s.is_finite()) {
            return Err(SpecError::NonFiniteScore { block });
        }
        let keep = self.keep();
        let kept: Vec<Vec<usize>> = self
            .scope_members
            .par_iter()
            .map(|members| {
                let mut ranked = members.clone();
                ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                ranked.truncate(keep);
                ranked
            })
            .collect();
        let mut retained = vec![false; self.num_blocks()];
        for j in kept.into_iter().flatten() {
            retained[j] = true;
        }
        Ok(MaskGrid { retained })
    }

    /// Whether every scope retains exactly `keep` blocks.
    pub fn mask_respects_keep(&self, mask: &MaskGrid) -> bool {
        mask.retained.len() == self.num_blocks()
            && self
                .scope_members
                .iter()
                .all(|m| m.iter().filter(|&&j| mask.retained[j]).count() == self.keep())
    }

    /// Storage indices zeroed by the mask.
    pub fn element_mask(&self, mask: &MaskGrid) -> ElementSet {
        ElementSet::from_indices(
            mask.pruned_blocks()
                .into_iter()
                .flat_map(|j| self.block_elements_ordered(j).expect("block in range")),
        )
    }

    /// Dense keep/zero flags over storage; elements outside the domain are kept.
    pub fn element_retention(&self, mask: &MaskGrid) -> Vec<bool> {
        let mut keep = vec![true; self.storage_size()];
        for e in self.element_mask(mask).iter() {
            keep[e] = false;
        }
        keep
    }
}
