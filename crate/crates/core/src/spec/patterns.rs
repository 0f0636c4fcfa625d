//! Catalog of canonical and experimental sparsity patterns.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{CouplingLevel, CouplingMember, CouplingSpec, SparsitySpec, SpecDocument, SpecError};
use crate::layout::{Domain, DomainSpec, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternName {
    Unstructured,
    Nm,
    BlockBxB,
    Channel,
    Head,
    TwoFour,
    FourEight,
    CoupledTwoFour,
    /// Coupled 2:4 pairing columns 4 apart within 8-column segments.
    CoupledTwoFourV8,
    /// 16-column blocks; rows `p` and `p + 8` compete for each column block.
    Col16Block,
    /// 16-column blocks spanning rows `p` and `p + 8`, so both rows carry one mask.
    Col16BlockShared,
    Partial24,
}

pub const PATTERN_NAMES: &[&str] = &[
    "unstructured",
    "nm",
    "block_bxb",
    "channel",
    "head",
    "two_four",
    "four_eight",
    "coupled_two_four",
    "coupled_two_four_v8",
    "col16_block",
    "col16_block_shared",
    "partial_24",
];

impl PatternName {
    pub fn as_str(self) -> &'static str {
        use PatternName::*;
        match self {
            Unstructured => "unstructured",
            Nm => "nm",
            BlockBxB => "block_bxb",
            Channel => "channel",
            Head => "head",
            TwoFour => "two_four",
            FourEight => "four_eight",
            CoupledTwoFour => "coupled_two_four",
            CoupledTwoFourV8 => "coupled_two_four_v8",
            Col16Block => "col16_block",
            Col16BlockShared => "col16_block_shared",
            Partial24 => "partial_24",
        }
    }

    pub fn all() -> [PatternName; 12] {
        use PatternName::*;
        [
            Unstructured,
            Nm,
            BlockBxB,
            Channel,
            Head,
            TwoFour,
            FourEight,
            CoupledTwoFour,
            CoupledTwoFourV8,
            Col16Block,
            Col16BlockShared,
            Partial24,
        ]
    }
}

impl fmt::Display for PatternName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatternName {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PatternName::all()
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| SpecError::UnknownPattern(s.to_string()))
    }
}

/// Named integer dimensions, e.g. `M`, `K`, `b`, `h`, `d`, `C`.
///
/// `nm` reads `N` (kept per group), `M` (group size), `K` (columns) and `R`
/// (rows, default 1). `keep` overrides a pattern's default keep count.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PatternDims(BTreeMap<String, usize>);

impl PatternDims {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: usize) -> Self {
        self.0.insert(key.to_string(), value);
        self
    }

    pub fn mk(m: usize, k: usize) -> Self {
        Self::new().with("M", m).with("K", k)
    }

    pub fn d(d: usize) -> Self {
        Self::new().with("d", d)
    }

    pub fn channel(c_out: usize, c_in: usize, h: usize, w: usize) -> Self {
        Self::new()
            .with("C", c_out)
            .with("Cin", c_in)
            .with("H", h)
            .with("W", w)
    }

    pub fn get(&self, key: &str) -> Option<usize> {
        self.0.get(key).copied()
    }

    pub fn insert(&mut self, key: &str, value: usize) {
        self.0.insert(key.to_string(), value);
    }

    fn req(&self, key: &str, pattern: PatternName) -> Result<usize, SpecError> {
        match self.get(key) {
            Some(0) => Err(SpecError::Dimension(format!("{key} must be positive"))),
            Some(v) => Ok(v),
            None => Err(SpecError::Dimension(format!("{pattern} requires {key}"))),
        }
    }

    fn keep_or(&self, default: usize) -> usize {
        self.get("keep").unwrap_or(default)
    }
}

/// Either one spec or a coupling of several tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum Pattern {
    Single(SparsitySpec),
    Coupled(CouplingSpec),
}

impl Pattern {
    pub fn single(self) -> Option<SparsitySpec> {
        match self {
            Pattern::Single(s) => Some(s),
            Pattern::Coupled(_) => None,
        }
    }

    pub fn coupled(self) -> Option<CouplingSpec> {
        match self {
            Pattern::Coupled(c) => Some(c),
            Pattern::Single(_) => None,
        }
    }

    pub fn to_document(&self) -> SpecDocument {
        match self {
            Pattern::Single(s) => SpecDocument::from_spec(s),
            Pattern::Coupled(c) => c.to_document(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("document serializes")
    }
}

fn divides(pattern: PatternName, what: &str, d: usize, n: usize) -> Result<(), SpecError> {
    if !n.is_multiple_of(d) {
        return Err(SpecError::Dimension(format!(
            "{pattern}: {what}={n} is not a multiple of {d}"
        )));
    }
    Ok(())
}

fn rm(shape: &[usize]) -> Layout {
    Layout::row_major(shape.to_vec()).expect("positive extents")
}

fn lay(shape: &[usize], stride: &[usize]) -> Layout {
    Layout::new(shape.to_vec(), stride.to_vec()).expect("matching arity")
}

/// Builds a catalog pattern for the given dimensions.
pub fn make_pattern(name: PatternName, dims: &PatternDims) -> Result<Pattern, SpecError> {
    use PatternName::*;
    let spec = match name {
        Unstructured => {
            let (m, k) = (dims.req("M", name)?, dims.req("K", name)?);
            let phys = rm(&[m, k]);
            SparsitySpec::over(phys.clone(), phys, vec![1, 1], vec![m, k], dims.keep_or(m * k / 2))
        }
        Nm => {
            let (n, group, k) = (dims.req("N", name)?, dims.req("M", name)?, dims.req("K", name)?);
            let rows = dims.get("R").unwrap_or(1);
            if n > group {
                return Err(SpecError::Dimension(format!("nm: N={n} exceeds M={group}")));
            }
            divides(name, "K", group, k)?;
            let phys = rm(&[rows, k]);
            SparsitySpec::over(phys.clone(), phys, vec![1, 1], vec![1, group], n)
        }
        BlockBxB => {
            let (m, k, b) = (dims.req("M", name)?, dims.req("K", name)?, dims.req("b", name)?);
            divides(name, "M", b, m)?;
            divides(name, "K", b, k)?;
            let phys = rm(&[m, k]);
            let per_row = k / b;
            SparsitySpec::over(phys.clone(), phys, vec![b, b], vec![1, per_row], dims.keep_or((per_row / 2).max(1)))
        }
        Channel => {
            let c = dims.req("C", name)?;
            let inner = dims.req("Cin", name)? * dims.get("H").unwrap_or(1) * dims.get("W").unwrap_or(1);
            let phys = rm(&[c, inner]);
            SparsitySpec::over(phys.clone(), phys, vec![1, inner], vec![c, 1], dims.keep_or((c / 2).max(1)))
        }
        Head => return head(dims),
        TwoFour => {
            let (m, k) = (dims.req("M", name)?, dims.req("K", name)?);
            divides(name, "K", 4, k)?;
            let phys = rm(&[m, k]);
            SparsitySpec::over(phys.clone(), phys, vec![1, 1], vec![1, 4], dims.keep_or(2))
        }
        FourEight => {
            let (m, k) = (dims.req("M", name)?, dims.req("K", name)?);
            divides(name, "K", 8, k)?;
            let phys = rm(&[m, k]);
            SparsitySpec::over(phys.clone(), phys, vec![1, 2], vec![1, 4], dims.keep_or(2))
        }
        CoupledTwoFour => {
            let (m, k) = (dims.req("M", name)?, dims.req("K", name)?);
            divides(name, "K", 16, k)?;
            SparsitySpec::over(
                rm(&[m, k]),
                lay(&[m, k / 16, 8, 2], &[k, 16, 1, 8]),
                vec![1, 1, 1, 2],
                vec![1, 1, 4, 1],
                dims.keep_or(2),
            )
        }
        CoupledTwoFourV8 => {
            let (m, k) = (dims.req("M", name)?, dims.req("K", name)?);
            divides(name, "K", 8, k)?;
            SparsitySpec::over(
                rm(&[m, k]),
                lay(&[m, k / 8, 4, 2], &[k, 8, 1, 4]),
                vec![1, 1, 1, 2],
                vec![1, 1, 4, 1],
                dims.keep_or(2),
            )
        }
        Col16Block | Col16BlockShared => {
            let k = dims.req("K", name)?;
            let m = dims.get("M").unwrap_or(16);
            divides(name, "M", 16, m)?;
            divides(name, "K", if name == Col16Block { 16 } else { 32 }, k)?;
            let chunks = m / 16;
            let (view, mut block, mut scope, keep) = if name == Col16Block {
                (lay(&[8, 2, k], &[k, 8 * k, 1]), vec![1, 1, 16], vec![1, 2, 1], 1)
            } else {
                (lay(&[8, 2, k], &[k, 8 * k, 1]), vec![1, 2, 16], vec![1, 1, k / 16], k / 32)
            };
            let view = if chunks == 1 {
                view
            } else {
                block.insert(0, 1);
                scope.insert(0, 1);
                lay(&[chunks, 8, 2, k], &[16 * k, k, 8 * k, 1])
            };
            SparsitySpec::over(rm(&[m, k]), view, block, scope, dims.keep_or(keep))
        }
        Partial24 => {
            let d = dims.req("d", name)?;
            divides(name, "d", 4, d)?;
            let phys = rm(&[d, d]);
            let domain = Domain::Box(DomainSpec {
                offset: vec![d / 4, 0],
                extent: vec![3 * d / 4, d],
            });
            let spec = SparsitySpec::over(
                rm(&[3 * d / 4, d]),
                lay(&[3 * d / 4, d / 4, 4], &[d, 4, 1]),
                vec![1, 1, 1],
                vec![1, 1, 4],
                dims.keep_or(2),
            );
            spec.with_domain(domain, phys)
        }
    };
    Ok(Pattern::Single(spec))
}

/// Q, K, V and O projections coupled along the head dimension.
fn head(dims: &PatternDims) -> Result<Pattern, SpecError> {
    let (h, d) = (dims.req("h", PatternName::Head)?, dims.req("d", PatternName::Head)?);
    divides(PatternName::Head, "d", h, d)?;
    let hd = d / h;
    let keep = dims.keep_or((h / 2).max(1));
    let phys = rm(&[d, d]);
    let qkv = SparsitySpec::over(
        phys.clone(),
        lay(&[h, hd, d], &[hd * d, d, 1]),
        vec![1, hd, d],
        vec![h, 1, 1],
        keep,
    );
    let out = SparsitySpec::over(
        phys,
        lay(&[d, h, hd], &[d, hd, 1]),
        vec![d, 1, hd],
        vec![1, h, 1],
        keep,
    );
    let member = |tensor: &str, spec: &SparsitySpec, permutation: Vec<usize>| CouplingMember {
        tensor: tensor.to_string(),
        spec: spec.clone(),
        permutation,
    };
    Ok(Pattern::Coupled(CouplingSpec {
        members: vec![
            member("q", &qkv, vec![1, 2, 0]),
            member("k", &qkv, vec![1, 2, 0]),
            member("v", &qkv, vec![1, 2, 0]),
            member("o", &out, vec![0, 2, 1]),
        ],
        level: CouplingLevel::Block,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: PatternName, dims: PatternDims) -> SparsitySpec {
        make_pattern(name, &dims).unwrap().single().unwrap()
    }

    #[test]
    fn two_four_counts() {
        let c = single(PatternName::TwoFour, PatternDims::mk(4, 8)).compile().unwrap();
        assert_eq!(c.num_blocks(), 32);
        assert_eq!(c.num_scopes(), 8);
        assert_eq!(c.keep(), 2);
        assert_eq!(c.spec().scope.0, vec![1, 4]);
    }

    #[test]
    fn unstructured_is_one_global_scope() {
        let c = single(PatternName::Unstructured, PatternDims::mk(4, 6)).compile().unwrap();
        assert_eq!(c.spec().block.0, vec![1, 1]);
        assert_eq!(c.num_scopes(), 1);
        assert_eq!(c.blocks_per_scope(), 24);
    }

    #[test]
    fn partial_24_domain() {
        let s = single(PatternName::Partial24, PatternDims::d(8));
        match s.domain.as_ref().unwrap() {
            Domain::Box(b) => {
                assert_eq!(b.offset, vec![2, 0]);
                assert_eq!(b.extent, vec![6, 8]);
            }
            other => panic!("unexpected domain {other:?}"),
        }
        assert!(s.validate().is_empty());
    }

    #[test]
    fn experimental_views() {
        let c24 = single(PatternName::CoupledTwoFour, PatternDims::mk(2, 32));
        assert_eq!(c24.view.layout.stride(), &[32, 16, 1, 8]);
        let c16 = single(PatternName::Col16Block, PatternDims::new().with("K", 32));
        assert_eq!(c16.view.layout.stride(), &[32, 256, 1]);
        assert_eq!(c16.keep, 1);
        let c32 = single(PatternName::Col16Block, PatternDims::mk(32, 16));
        assert!(c32.validate().is_empty());
        let nm = single(PatternName::Nm, PatternDims::new().with("N", 1).with("M", 2).with("K", 8));
        assert_eq!(nm.keep, 1);
        assert_eq!(nm.scope.0, vec![1, 2]);
    }

    #[test]
    fn every_pattern_validates_at_desk_dims() {
        let dims = PatternDims::mk(16, 32)
            .with("N", 2)
            .with("b", 4)
            .with("h", 4)
            .with("d", 16)
            .with("C", 4)
            .with("Cin", 3)
            .with("H", 2)
            .with("W", 2);
        for name in PatternName::all() {
            match make_pattern(name, &dims).unwrap() {
                Pattern::Single(s) => assert!(s.validate().is_empty(), "{name}: {:?}", s.validate()),
                Pattern::Coupled(c) => {
                    c.compile().unwrap();
                }
            }
        }
    }

    #[test]
    fn catalog_errors() {
        assert!(matches!(
            "nope".parse::<PatternName>(),
            Err(SpecError::UnknownPattern(_))
        ));
        assert!(matches!(
            make_pattern(PatternName::TwoFour, &PatternDims::mk(4, 6)),
            Err(SpecError::Dimension(_))
        ));
        assert!(matches!(
            make_pattern(PatternName::TwoFour, &PatternDims::new().with("M", 4)),
            Err(SpecError::Dimension(_))
        ));
        for name in PATTERN_NAMES {
            assert_eq!(name.parse::<PatternName>().unwrap().as_str(), *name);
        }
    }
}
