//! Sparsity specifications: a View over the tensor (or a domain of it), a
//! Block shape over the view, a Scope shape over the block grid, and the
//! number of blocks each scope keeps.

mod compiled;
mod coupling;
mod patterns;

pub use compiled::{CompiledSpec, MaskGrid};
pub use coupling::{CompiledCoupling, CouplingLevel, CouplingMember, CouplingSpec};
pub use patterns::{make_pattern, Pattern, PatternDims, PatternName, PATTERN_NAMES};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{Domain, Layout, LayoutError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("invalid spec: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("{what} {index} out of range (have {count})")]
    OutOfBounds {
        what: &'static str,
        index: usize,
        count: usize,
    },
    #[error("element {0} is not addressed by the view")]
    NotInView(usize),
    #[error("expected {expected} scores, got {got}")]
    ScoreCount { expected: usize, got: usize },
    #[error("score for block {block} is not finite")]
    NonFiniteScore { block: usize },
    #[error("keep {keep} exceeds the {blocks} blocks per scope")]
    KeepTooLarge { keep: usize, blocks: usize },
    #[error("coupled grids disagree: {0}")]
    GridShapeMismatch(String),
    #[error("invalid permutation {perm:?} for grid of arity {arity}")]
    BadPermutation { perm: Vec<usize>, arity: usize },
    #[error("unknown pattern '{0}'")]
    UnknownPattern(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.message.as_str())
        .collect::<Vec<_>>()
        .join("; ")
}

/// A failed spec constraint; `dim` names the offending dimension when there is one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub constraint: &'static str,
    pub dim: Option<usize>,
    pub message: String,
}

impl Violation {
    fn new(constraint: &'static str, dim: Option<usize>, message: String) -> Self {
        Violation {
            constraint,
            dim,
            message,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewSpec {
    pub layout: Layout,
    /// Number of elements the view must cover: the domain size, or the
    /// whole tensor when there is no domain.
    pub phys_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockShape(pub Vec<usize>);

impl BlockShape {
    pub fn size(&self) -> usize {
        self.0.iter().product()
    }
}

/// Scope extents in units of blocks, one per block-grid dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScopeShape(pub Vec<usize>);

impl ScopeShape {
    pub fn blocks_per_scope(&self) -> usize {
        self.0.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SpecDocument", into = "SpecDocument")]
pub struct SparsitySpec {
    pub view: ViewSpec,
    pub block: BlockShape,
    pub scope: ScopeShape,
    pub keep: usize,
    pub domain: Option<Domain>,
    /// Physical layout of the target tensor. Required for offset/extent domains.
    pub phys: Option<Layout>,
}

impl SparsitySpec {
    /// A spec whose view covers a whole tensor with the given physical layout.
    pub fn over(
        phys: Layout,
        view: Layout,
        block: Vec<usize>,
        scope: Vec<usize>,
        keep: usize,
    ) -> Self {
        SparsitySpec {
            view: ViewSpec {
                layout: view,
                phys_size: phys.size(),
            },
            block: BlockShape(block),
            scope: ScopeShape(scope),
            keep,
            domain: None,
            phys: Some(phys),
        }
    }

    /// Restricts the spec to a domain of `phys`; the view then addresses the
    /// domain as a dense row-major virtual tensor.
    pub fn with_domain(mut self, domain: Domain, phys: Layout) -> Self {
        self.view.phys_size = domain.size();
        self.domain = Some(domain);
        self.phys = Some(phys);
        self
    }

    /// Total physical storage the element indices refer to.
    pub fn storage_size(&self) -> usize {
        match (&self.phys, &self.domain) {
            (Some(p), _) => p.cosize().max(p.size()),
            (None, Some(Domain::Strided(g))) => g.base_offset + g.layout.cosize(),
            _ => self.view.phys_size,
        }
    }

    /// Every constraint the spec violates; empty when valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let view = &self.view.layout;
        let n = view.rank();

        let arity_ok = self.block.0.len() == n && self.scope.0.len() == n;
        if self.block.0.len() != n {
            out.push(Violation::new(
                "block_arity",
                None,
                format!("block arity {} ≠ view arity {}", self.block.0.len(), n),
            ));
        }
        if self.scope.0.len() != n {
            out.push(Violation::new(
                "scope_arity",
                None,
                format!("scope arity {} ≠ view arity {}", self.scope.0.len(), n),
            ));
        }

        let mut grid_ok = arity_ok;
        let mut grid = Vec::new();
        if self.block.0.len() == n {
            for (dim, (&b, &s)) in self.block.0.iter().zip(view.shape()).enumerate() {
                if b == 0 {
                    grid_ok = false;
                    out.push(Violation::new(
                        "block_divides_view",
                        Some(dim),
                        format!("dimension {dim}: block extent is zero"),
                    ));
                } else if s % b != 0 {
                    grid_ok = false;
                    out.push(Violation::new(
                        "block_divides_view",
                        Some(dim),
                        format!("dimension {dim}: {b} does not divide {s} (block extent vs view extent)"),
                    ));
                } else {
                    grid.push(s / b);
                }
            }
        }
        if grid_ok {
            for (dim, (&sc, &g)) in self.scope.0.iter().zip(&grid).enumerate() {
                if sc == 0 {
                    grid_ok = false;
                    out.push(Violation::new(
                        "scope_divides_grid",
                        Some(dim),
                        format!("dimension {dim}: scope extent is zero"),
                    ));
                } else if g % sc != 0 {
                    grid_ok = false;
                    out.push(Violation::new(
                        "scope_divides_grid",
                        Some(dim),
                        format!("dimension {dim}: {sc} does not divide {g} (scope extent vs block-grid extent)"),
                    ));
                }
            }
        }
        if grid_ok && self.keep > self.scope.blocks_per_scope() {
            out.push(Violation::new(
                "keep",
                None,
                format!(
                    "keep {} exceeds {} blocks per scope",
                    self.keep,
                    self.scope.blocks_per_scope()
                ),
            ));
        }

        let size = view.size();
        if size != self.view.phys_size {
            out.push(Violation::new(
                "view_size",
                None,
                format!("view size {} ≠ {}", size, self.view.phys_size),
            ));
        } else if !view.is_injective() {
            out.push(Violation::new(
                "view_injective",
                None,
                format!("view {view} maps distinct coordinates to the same index"),
            ));
        } else if view.cosize() != self.view.phys_size {
            out.push(Violation::new(
                "view_image",
                None,
                format!(
                    "view {view} reaches index {} outside [0, {})",
                    view.cosize() - 1,
                    self.view.phys_size
                ),
            ));
        }

        match (&self.domain, &self.phys) {
            (Some(Domain::Box(_)), None) => out.push(Violation::new(
                "domain",
                None,
                "offset/extent domain requires a physical layout".into(),
            )),
            (Some(d), Some(p)) => {
                if let Err(e) = d.embedding(p) {
                    out.push(Violation::new("domain", None, format!("domain: {e}")));
                }
            }
            (None, Some(p)) if p.size() != self.view.phys_size => out.push(Violation::new(
                "view_size",
                None,
                format!("view covers {} elements but tensor has {}", self.view.phys_size, p.size()),
            )),
            _ => {}
        }
        out
    }

    pub fn compile(&self) -> Result<CompiledSpec, SpecError> {
        CompiledSpec::new(self.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }
}

/// JSON document shared by the CLI and the library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDocument {
    pub view: Layout,
    pub block: Vec<usize>,
    pub scope: Vec<usize>,
    pub keep: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phys: Option<Layout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<Vec<CouplingEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_level: Option<CouplingLevel>,
}

/// One coupled tensor; without `spec` it reuses the enclosing document's spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingEntry {
    pub tensor: String,
    pub permutation: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<Box<SpecDocument>>,
}

impl SpecDocument {
    pub fn to_spec(&self) -> SparsitySpec {
        let phys_size = match (&self.domain, &self.phys) {
            (Some(d), _) => d.size(),
            (None, Some(p)) => p.size(),
            (None, None) => self.view.size(),
        };
        SparsitySpec {
            view: ViewSpec {
                layout: self.view.clone(),
                phys_size,
            },
            block: BlockShape(self.block.clone()),
            scope: ScopeShape(self.scope.clone()),
            keep: self.keep,
            domain: self.domain.clone(),
            phys: self.phys.clone(),
        }
    }

    pub fn from_spec(spec: &SparsitySpec) -> Self {
        SpecDocument {
            view: spec.view.layout.clone(),
            block: spec.block.0.clone(),
            scope: spec.scope.0.clone(),
            keep: spec.keep,
            domain: spec.domain.clone(),
            phys: spec.phys.clone(),
            coupling: None,
            coupling_level: None,
        }
    }

    /// Either a single spec or, when `coupling` is present, a coupling.
    pub fn into_pattern(self) -> Pattern {
        match &self.coupling {
            None => Pattern::Single(self.to_spec()),
            Some(entries) => {
                let base = self.to_spec();
                let members = entries
                    .iter()
                    .map(|e| CouplingMember {
                        tensor: e.tensor.clone(),
                        spec: e.spec.as_ref().map_or_else(|| base.clone(), |d| d.to_spec()),
                        permutation: e.permutation.clone(),
                    })
                    .collect();
                Pattern::Coupled(CouplingSpec {
                    members,
                    level: self.coupling_level.unwrap_or(CouplingLevel::Block),
                })
            }
        }
    }
}

impl TryFrom<SpecDocument> for SparsitySpec {
    type Error = String;

    fn try_from(doc: SpecDocument) -> Result<Self, Self::Error> {
        if doc.coupling.is_some() {
            return Err("document describes a coupling, not a single spec".into());
        }
        Ok(doc.to_spec())
    }
}

impl From<SparsitySpec> for SpecDocument {
    fn from(spec: SparsitySpec) -> Self {
        SpecDocument::from_spec(&spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(shape: &[usize], stride: &[usize]) -> Layout {
        Layout::new(shape.to_vec(), stride.to_vec()).unwrap()
    }

    #[test]
    fn two_four_validates_clean() {
        let phys = Layout::row_major(vec![4, 8]).unwrap();
        let spec = SparsitySpec::over(phys.clone(), phys, vec![1, 1], vec![1, 4], 2);
        assert!(spec.validate().is_empty());
    }

    #[test]
    fn non_dividing_block_is_reported() {
        let phys = Layout::row_major(vec![4, 8]).unwrap();
        let spec = SparsitySpec::over(phys.clone(), phys, vec![1, 3], vec![1, 1], 1);
        let v = spec.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].dim, Some(1));
        assert!(v[0].message.contains("3 does not divide 8"), "{}", v[0]);
    }

    #[test]
    fn view_size_mismatch_is_reported() {
        let spec = SparsitySpec {
            view: ViewSpec {
                layout: l(&[4, 9], &[8, 1]),
                phys_size: 32,
            },
            block: BlockShape(vec![1, 1]),
            scope: ScopeShape(vec![1, 1]),
            keep: 1,
            domain: None,
            phys: None,
        };
        let v = spec.validate();
        assert!(v.iter().any(|x| x.message == "view size 36 ≠ 32"), "{v:?}");
    }

    #[test]
    fn broadcast_and_gapped_views_are_rejected() {
        let zero = SparsitySpec {
            view: ViewSpec {
                layout: l(&[4, 2], &[0, 1]),
                phys_size: 8,
            },
            block: BlockShape(vec![1, 1]),
            scope: ScopeShape(vec![1, 1]),
            keep: 1,
            domain: None,
            phys: None,
        };
        assert!(zero.validate().iter().any(|v| v.constraint == "view_injective"));
        let gapped = SparsitySpec {
            view: ViewSpec {
                layout: l(&[4, 2], &[4, 1]),
                phys_size: 8,
            },
            ..zero
        };
        assert!(gapped.validate().iter().any(|v| v.constraint == "view_image"));
    }

    #[test]
    fn scope_and_keep_violations() {
        let phys = Layout::row_major(vec![4, 8]).unwrap();
        let bad_scope = SparsitySpec::over(phys.clone(), phys.clone(), vec![1, 2], vec![1, 3], 1);
        assert!(bad_scope
            .validate()
            .iter()
            .any(|v| v.constraint == "scope_divides_grid" && v.dim == Some(1)));
        let bad_keep = SparsitySpec::over(phys.clone(), phys, vec![1, 1], vec![1, 4], 5);
        assert!(bad_keep.validate().iter().any(|v| v.constraint == "keep"));
    }

    #[test]
    fn document_round_trip() {
        let json = r#"{"view":{"shape":[4,8],"stride":[8,1]},"block":[1,1],"scope":[1,4],"keep":2}"#;
        let spec: SparsitySpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.view.phys_size, 32);
        assert_eq!(spec.to_json(), json);
        assert!(serde_json::from_str::<SparsitySpec>(r#"{"view":{"shape":[4,8],"stride":[8,1]},"block":[1,1],"scope":[1,4],"keep":2.5}"#).is_err());
    }
}
