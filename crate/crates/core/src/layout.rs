//! Shape/stride layouts, their index maps, composition, and sub-tensor domains.
//!
//! A [`Layout`] `s:d` maps a coordinate `i` (with `0 <= i_k < s_k`) to the
//! linear index `sum_k i_k * d_k`. Enumeration ordinals decode coordinates in
//! mixed radix with the **last** dimension varying fastest.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A coordinate tuple, one index per layout dimension.
pub type Coord = Vec<usize>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("layout must have at least one dimension")]
    Empty,
    #[error("shape has {shape} dimensions but stride has {stride}")]
    ArityMismatch { shape: usize, stride: usize },
    #[error("extent of dimension {dim} is zero")]
    ZeroExtent { dim: usize },
    #[error("coordinate {coord:?} out of bounds for shape {shape:?}")]
    CoordOutOfBounds { coord: Coord, shape: Vec<usize> },
    #[error("ordinal {ordinal} out of bounds for layout of size {size}")]
    OrdinalOutOfBounds { ordinal: usize, size: usize },
    #[error("cannot compose: outer size {outer} != inner size {inner}")]
    SizeMismatch { outer: usize, inner: usize },
    #[error("cannot compose: outer layout reaches index {index} beyond inner size {size}")]
    OuterNotCompact { index: usize, size: usize },
    #[error("domain offset {offset} + extent {extent} exceeds extent {limit} in dimension {dim}")]
    DomainOutOfBounds {
        dim: usize,
        offset: usize,
        extent: usize,
        limit: usize,
    },
    #[error("domain index {index} outside physical storage of cosize {cosize}")]
    IndexOutOfBounds { index: usize, cosize: usize },
    #[error("domain arity {domain} does not match physical arity {phys}")]
    DomainArity { domain: usize, phys: usize },
    #[error("domain addresses index {index} more than once")]
    OverlappingDomain { index: usize },
}

/// A shape/stride pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct Layout {
    shape: Vec<usize>,
    stride: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    shape: Vec<usize>,
    stride: Vec<usize>,
}

impl TryFrom<RawLayout> for Layout {
    type Error = LayoutError;

    fn try_from(raw: RawLayout) -> Result<Self, Self::Error> {
        Layout::new(raw.shape, raw.stride)
    }
}

impl From<Layout> for RawLayout {
    fn from(l: Layout) -> Self {
        RawLayout {
            shape: l.shape,
            stride: l.stride,
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        if self.shape.len() == 1 {
            write!(f, "({},):({},)", self.shape[0], self.stride[0])
        } else {
            write!(f, "({}):({})", join(&self.shape), join(&self.stride))
        }
    }
}

impl Layout {
    pub fn new(shape: Vec<usize>, stride: Vec<usize>) -> Result<Self, LayoutError> {
        if shape.is_empty() {
            return Err(LayoutError::Empty);
        }
        if shape.len() != stride.len() {
            return Err(LayoutError::ArityMismatch {
                shape: shape.len(),
                stride: stride.len(),
            });
        }
        if let Some(dim) = shape.iter().position(|&s| s == 0) {
            return Err(LayoutError::ZeroExtent { dim });
        }
        Ok(Layout { shape, stride })
    }

    /// Dense layout with the last dimension contiguous.
    pub fn row_major(shape: Vec<usize>) -> Result<Self, LayoutError> {
        let stride = row_major_strides(&shape);
        Layout::new(shape, stride)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn stride(&self) -> &[usize] {
        &self.stride
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of coordinates, the product of the extents.
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }

    /// One past the largest reachable linear index: `1 + sum_k (s_k - 1) d_k`.
    pub fn cosize(&self) -> usize {
        1 + self
            .shape
            .iter()
            .zip(&self.stride)
            .map(|(&s, &d)| (s - 1) * d)
            .sum::<usize>()
    }

    pub fn index(&self, coord: &[usize]) -> Result<usize, LayoutError> {
        if coord.len() != self.rank() || coord.iter().zip(&self.shape).any(|(&i, &s)| i >= s) {
            return Err(LayoutError::CoordOutOfBounds {
                coord: coord.to_vec(),
                shape: self.shape.clone(),
            });
        }
        Ok(self.index_unchecked(coord))
    }

    #[inline]
    pub(crate) fn index_unchecked(&self, coord: &[usize]) -> usize {
        coord.iter().zip(&self.stride).map(|(&i, &d)| i * d).sum()
    }

    /// Decodes an enumeration ordinal into a coordinate (last dimension fastest).
    pub fn coord(&self, ordinal: usize) -> Result<Coord, LayoutError> {
        let size = self.size();
        if ordinal >= size {
            return Err(LayoutError::OrdinalOutOfBounds { ordinal, size });
        }
        Ok(decode_row_major(&self.shape, ordinal))
    }

    /// Encodes a coordinate as its enumeration ordinal (last dimension fastest).
    pub fn ordinal(&self, coord: &[usize]) -> Result<usize, LayoutError> {
        self.index(coord)?;
        Ok(encode_row_major(&self.shape, coord))
    }

    /// Linear indices in enumeration order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        CoordIter::new(&self.shape).map(move |c| self.index_unchecked(&c))
    }

    /// Whether distinct coordinates always map to distinct indices.
    ///
    /// Exhaustive for sizes up to 2^24; above that a sorted-stride sufficient
    /// condition is used, which may report `false` for exotic interleavings.
    pub fn is_injective(&self) -> bool {
        if self
            .shape
            .iter()
            .zip(&self.stride)
            .any(|(&s, &d)| s > 1 && d == 0)
        {
            return false;
        }
        let size = self.size();
        if size <= 1 << 24 {
            let mut seen = vec![false; self.cosize()];
            for idx in self.indices() {
                if std::mem::replace(&mut seen[idx], true) {
                    return false;
                }
            }
            return true;
        }
        let mut modes: Vec<(usize, usize)> = self
            .shape
            .iter()
            .zip(&self.stride)
            .filter(|(&s, _)| s > 1)
            .map(|(&s, &d)| (d, s))
            .collect();
        modes.sort_unstable();
        let mut reach = 1;
        for (d, s) in modes {
            if d < reach {
                return false;
            }
            reach = d * s;
        }
        true
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut stride = vec![0; shape.len()];
    let mut acc = 1;
    for k in (0..shape.len()).rev() {
        stride[k] = acc;
        acc *= shape[k];
    }
    stride
}

pub(crate) fn decode_row_major(shape: &[usize], mut ordinal: usize) -> Coord {
    let mut coord = vec![0; shape.len()];
    for k in (0..shape.len()).rev() {
        coord[k] = ordinal % shape[k];
        ordinal /= shape[k];
    }
    coord
}

pub(crate) fn encode_row_major(shape: &[usize], coord: &[usize]) -> usize {
    coord
        .iter()
        .zip(shape)
        .fold(0, |acc, (&i, &s)| acc * s + i)
}

/// Iterates every coordinate of a shape, last dimension fastest.
#[derive(Debug, Clone)]
pub struct CoordIter {
    shape: Vec<usize>,
    next: Option<Coord>,
}

impl CoordIter {
    pub fn new(shape: &[usize]) -> Self {
        let next = if shape.iter().all(|&s| s > 0) {
            Some(vec![0; shape.len()])
        } else {
            None
        };
        CoordIter {
            shape: shape.to_vec(),
            next,
        }
    }
}

impl Iterator for CoordIter {
    type Item = Coord;

    fn next(&mut self) -> Option<Coord> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut k = succ.len();
        loop {
            if k == 0 {
                break;
            }
            k -= 1;
            succ[k] += 1;
            if succ[k] < self.shape[k] {
                self.next = Some(succ);
                break;
            }
            succ[k] = 0;
        }
        Some(current)
    }
}

/// Result of composing two layouts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Composed {
    /// The composed map is itself a strided layout over the outer shape.
    Strided(Layout),
    /// No strided form exists; indices listed in enumeration order of `shape`.
    Table { shape: Vec<usize>, indices: Vec<usize> },
}

impl Composed {
    pub fn shape(&self) -> &[usize] {
        match self {
            Composed::Strided(l) => l.shape(),
            Composed::Table { shape, .. } => shape,
        }
    }

    pub fn index(&self, coord: &[usize]) -> Result<usize, LayoutError> {
        match self {
            Composed::Strided(l) => l.index(coord),
            Composed::Table { shape, indices } => {
                if coord.len() != shape.len() || coord.iter().zip(shape).any(|(&i, &s)| i >= s) {
                    return Err(LayoutError::CoordOutOfBounds {
                        coord: coord.to_vec(),
                        shape: shape.clone(),
                    });
                }
                Ok(indices[encode_row_major(shape, coord)])
            }
        }
    }

    /// Indices in enumeration order of the outer shape.
    pub fn indices(&self) -> Vec<usize> {
        match self {
            Composed::Strided(l) => l.indices().collect(),
            Composed::Table { indices, .. } => indices.clone(),
        }
    }
}

/// Composes `inner ∘ outer`: the outer layout's linear index is read as an
/// enumeration ordinal of `inner`, which is then mapped to storage.
pub fn compose(outer: &Layout, inner: &Layout) -> Result<Composed, LayoutError> {
    let (outer_size, inner_size) = (outer.size(), inner.size());
    if outer_size != inner_size {
        return Err(LayoutError::SizeMismatch {
            outer: outer_size,
            inner: inner_size,
        });
    }
    if outer.cosize() > inner_size {
        return Err(LayoutError::OuterNotCompact {
            index: outer.cosize() - 1,
            size: inner_size,
        });
    }
    let apply = |c: &[usize]| {
        let ord = outer.index_unchecked(c);
        inner.index_unchecked(&decode_row_major(inner.shape(), ord))
    };
    let indices: Vec<usize> = CoordIter::new(outer.shape()).map(|c| apply(&c)).collect();

    // Candidate strides from unit coordinates; accept only if linear everywhere.
    let rank = outer.rank();
    let stride: Vec<usize> = (0..rank)
        .map(|k| {
            if outer.shape()[k] == 1 {
                0
            } else {
                let mut unit = vec![0; rank];
                unit[k] = 1;
                apply(&unit)
            }
        })
        .collect();
    let candidate = Layout::new(outer.shape().to_vec(), stride)?;
    if candidate.indices().zip(&indices).all(|(a, &b)| a == b) {
        Ok(Composed::Strided(candidate))
    } else {
        Ok(Composed::Table {
            shape: outer.shape().to_vec(),
            indices,
        })
    }
}

/// Sorted, duplicate-free set of physical linear indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ElementSet(Vec<usize>);

impl ElementSet {
    pub fn new() -> Self {
        ElementSet(Vec::new())
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut v: Vec<usize> = iter.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        ElementSet(v)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn union(&self, other: &ElementSet) -> ElementSet {
        let (a, b) = (&self.0, &other.0);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        ElementSet(out)
    }

    /// `[0, tensor_size)` minus this set.
    pub fn complement(&self, tensor_size: usize) -> ElementSet {
        let mut out = Vec::with_capacity(tensor_size.saturating_sub(self.len()));
        let mut it = self.0.iter().peekable();
        for idx in 0..tensor_size {
            if it.peek() == Some(&&idx) {
                it.next();
            } else {
                out.push(idx);
            }
        }
        ElementSet(out)
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

impl FromIterator<usize> for ElementSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        ElementSet::from_indices(iter)
    }
}

/// Axis-aligned box `offset .. offset + extent` in physical coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub offset: Vec<usize>,
    pub extent: Vec<usize>,
}

/// A strided sub-tensor: `base_offset + layout(i)` for every domain coordinate `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralizedDomain {
    pub layout: Layout,
    pub base_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Domain {
    Box(DomainSpec),
    Strided(GeneralizedDomain),
}

impl DomainSpec {
    pub fn size(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn check(&self, phys: &Layout) -> Result<(), LayoutError> {
        if self.offset.len() != phys.rank() || self.extent.len() != phys.rank() {
            return Err(LayoutError::DomainArity {
                domain: self.offset.len().max(self.extent.len()),
                phys: phys.rank(),
            });
        }
        for dim in 0..phys.rank() {
            let (offset, extent, limit) = (self.offset[dim], self.extent[dim], phys.shape()[dim]);
            if extent == 0 || offset + extent > limit {
                return Err(LayoutError::DomainOutOfBounds {
                    dim,
                    offset,
                    extent,
                    limit,
                });
            }
        }
        Ok(())
    }

    /// The equivalent strided domain `extent : phys.stride` based at `phys(offset)`.
    pub fn to_generalized(&self, phys: &Layout) -> Result<GeneralizedDomain, LayoutError> {
        self.check(phys)?;
        Ok(GeneralizedDomain {
            layout: Layout::new(self.extent.clone(), phys.stride().to_vec())?,
            base_offset: phys.index_unchecked(&self.offset),
        })
    }
}

impl Domain {
    pub fn size(&self) -> usize {
        match self {
            Domain::Box(d) => d.size(),
            Domain::Strided(g) => g.layout.size(),
        }
    }

    /// Physical index of every domain element, in domain enumeration order.
    pub fn embedding(&self, phys: &Layout) -> Result<Vec<usize>, LayoutError> {
        let generalized = match self {
            Domain::Box(d) => d.to_generalized(phys)?,
            Domain::Strided(g) => g.clone(),
        };
        let cosize = phys.cosize();
        let mut seen = HashSet::with_capacity(generalized.layout.size());
        generalized
            .layout
            .indices()
            .map(|i| {
                let index = generalized.base_offset + i;
                if index >= cosize {
                    Err(LayoutError::IndexOutOfBounds { index, cosize })
                } else if !seen.insert(index) {
                    Err(LayoutError::OverlappingDomain { index })
                } else {
                    Ok(index)
                }
            })
            .collect()
    }

    /// The set of physical indices the domain covers.
    pub fn elements(&self, phys: &Layout) -> Result<ElementSet, LayoutError> {
        Ok(ElementSet::from_indices(self.embedding(phys)?))
    }
}
