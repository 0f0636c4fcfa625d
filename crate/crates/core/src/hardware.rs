//! Tensor-core fragment ownership for the m16n8k16 fp16 MMA, structural
//! 2:4 compatibility checks, and metadata compression quotes.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::layout::Layout;
use crate::spec::{CompiledSpec, SparsitySpec};

pub const WARP_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HardwareError {
    #[error("({row}, {col}) outside the {rows}x{cols} {kind:?} fragment")]
    OutOfBounds {
        kind: FragmentKind,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("thread {0} outside the warp")]
    BadThread(usize),
    #[error("unsupported value width {0} bits (expected 4, 8, 16 or 32)")]
    UnsupportedBits(u32),
    #[error("unknown compression pattern '{0}'")]
    UnknownPattern(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum FragmentKind {
    /// 16x16 row-major, rows are m, columns are k.
    A,
    /// 16x8 column-major, rows are k, columns are n.
    B,
    /// 16x8 accumulator, rows are m, columns are n.
    C,
}

impl FragmentKind {
    pub fn shape(self) -> (usize, usize) {
        match self {
            FragmentKind::A => (16, 16),
            FragmentKind::B | FragmentKind::C => (16, 8),
        }
    }

    pub fn elements_per_thread(self) -> usize {
        let (r, c) = self.shape();
        r * c / WARP_SIZE
    }
}

/// Owner lane of one fragment element.
pub fn mma_fragment_owner(kind: FragmentKind, row: usize, col: usize) -> Result<usize, HardwareError> {
    let (rows, cols) = kind.shape();
    if row >= rows || col >= cols {
        return Err(HardwareError::OutOfBounds {
            kind,
            row,
            col,
            rows,
            cols,
        });
    }
    let (g, tau) = match kind {
        FragmentKind::A => (row % 8, (col % 8) / 2),
        FragmentKind::B => (col, (row % 8) / 2),
        FragmentKind::C => (row % 8, col / 2),
    };
    Ok(4 * g + tau)
}

/// Rows and columns held by one lane; it owns their Cartesian product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FragmentAssignment {
    pub matrix_kind: FragmentKind,
    pub thread: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl FragmentAssignment {
    pub fn elements(&self) -> Vec<(usize, usize)> {
        self.rows
            .iter()
            .flat_map(|&r| self.cols.iter().map(move |&c| (r, c)))
            .collect()
    }
}

pub fn fragment_assignment(kind: FragmentKind, thread: usize) -> Result<FragmentAssignment, HardwareError> {
    if thread >= WARP_SIZE {
        return Err(HardwareError::BadThread(thread));
    }
    let (g, tau) = (thread / 4, thread % 4);
    let pairs = vec![2 * tau, 2 * tau + 1, 2 * tau + 8, 2 * tau + 9];
    let (rows, cols) = match kind {
        FragmentKind::A => (vec![g, g + 8], pairs),
        FragmentKind::B => (pairs, vec![g]),
        FragmentKind::C => (vec![g, g + 8], vec![2 * tau, 2 * tau + 1]),
    };
    Ok(FragmentAssignment {
        matrix_kind: kind,
        thread,
        rows,
        cols,
    })
}

/// The A-fragment column pair holding k-column `col`: `(k_half, tau)`.
pub fn a_column_pair(col: usize) -> (usize, usize) {
    ((col % 16) / 8, (col % 8) / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompressionPattern {
    Standard24,
    Coupled24,
}

impl CompressionPattern {
    pub fn as_str(self) -> &'static str {
        match self {
            CompressionPattern::Standard24 => "standard_24",
            CompressionPattern::Coupled24 => "coupled_24",
        }
    }
}

impl fmt::Display for CompressionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompressionPattern {
    type Err = HardwareError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard_24" => Ok(CompressionPattern::Standard24),
            "coupled_24" => Ok(CompressionPattern::Coupled24),
            other => Err(HardwareError::UnknownPattern(other.to_string())),
        }
    }
}

impl Serialize for CompressionPattern {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

fn ratio_json<S: Serializer>(r: &Ratio<u64>, s: S) -> Result<S::Ok, S::Error> {
    #[derive(Serialize)]
    struct Frac {
        num: u64,
        den: u64,
    }
    Frac {
        num: *r.numer(),
        den: *r.denom(),
    }
    .serialize(s)
}

/// Bits needed for one scope before and after compression.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionQuote {
    pub pattern: CompressionPattern,
    pub value_bits: u32,
    /// Mask bits stored per scope.
    pub mask_bits: u64,
    pub scope_values: u64,
    pub kept_values: u64,
    pub uncompressed_bits: u64,
    pub compressed_bits: u64,
    #[serde(serialize_with = "ratio_json")]
    pub ratio: Ratio<u64>,
    /// Mask bits per bit of stored values (equivalently, per stored weight
    /// at 1 bit); 0.5 for standard 2:4 at 4 bits.
    pub overhead: f64,
}

pub fn compression_quote(pattern: CompressionPattern, value_bits: u32) -> Result<CompressionQuote, HardwareError> {
    if ![4, 8, 16, 32].contains(&value_bits) {
        return Err(HardwareError::UnsupportedBits(value_bits));
    }
    let vb = u64::from(value_bits);
    // A scope keeps 2 of 4 units; a unit is one column or a coupled pair.
    let unit = match pattern {
        CompressionPattern::Standard24 => 1,
        CompressionPattern::Coupled24 => 2,
    };
    let mask_bits = 4;
    let scope_values = 4 * unit;
    let kept_values = 2 * unit;
    let uncompressed_bits = scope_values * vb;
    let compressed_bits = kept_values * vb + mask_bits;
    Ok(CompressionQuote {
        pattern,
        value_bits,
        mask_bits,
        scope_values,
        kept_values,
        uncompressed_bits,
        compressed_bits,
        ratio: Ratio::new(compressed_bits, uncompressed_bits),
        overhead: mask_bits as f64 / (kept_values * vb) as f64,
    })
}

/// Outcome of comparing a spec against the hardware 2:4 layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorCoreCheck {
    pub compatible: bool,
    pub diagnostics: Vec<String>,
}

/// The spec the sparse tensor cores accelerate:
/// `(M, K/4, 4):(K, 4, 1)`, scalar blocks, scopes of 4, keep 2.
pub fn hardware_24_spec(m: usize, k: usize) -> SparsitySpec {
    SparsitySpec::over(
        Layout::row_major(vec![m, k]).expect("positive extents"),
        Layout::new(vec![m, k / 4, 4], vec![k, 4, 1]).expect("matching arity"),
        vec![1, 1, 1],
        vec![1, 1, 4],
        2,
    )
}

fn scope_sets(c: &CompiledSpec) -> BTreeSet<Vec<usize>> {
    (0..c.num_scopes())
        .map(|s| c.scope_elements(s).expect("scope in range").into_vec())
        .collect()
}

/// Whether `spec` selects exactly the element groups the hardware 2:4
/// format needs. Equivalent views of the same structure compare equal.
pub fn check_tensorcore_24(spec: &SparsitySpec, m: usize, k: usize) -> TensorCoreCheck {
    let fail = |d: Vec<String>| TensorCoreCheck {
        compatible: false,
        diagnostics: d,
    };
    if m == 0 || k == 0 || !k.is_multiple_of(4) {
        return fail(vec![format!("K={k} is not a positive multiple of 4")]);
    }
    let c = match spec.compile() {
        Ok(c) => c,
        Err(e) => return fail(vec![format!("spec does not compile: {e}")]),
    };
    if c.storage_size() != m * k {
        return fail(vec![format!(
            "spec addresses {} elements, expected {}",
            c.storage_size(),
            m * k
        )]);
    }
    let hw = hardware_24_spec(m, k).compile().expect("hardware spec is valid");
    let mut diagnostics = BTreeSet::new();
    if c.block_size() != 1 {
        diagnostics.insert(format!("blocks hold {} elements, expected 1", c.block_size()));
    }
    let elements_per_scope = c.blocks_per_scope() * c.block_size();
    let kept_per_scope = c.keep() * c.block_size();
    if kept_per_scope * 2 != elements_per_scope {
        diagnostics.insert(format!("keeps {kept_per_scope} of {elements_per_scope} elements per scope"));
    }
    let ours = scope_sets(&c);
    if ours != scope_sets(&hw) {
        for scope in &ours {
            let rows: BTreeSet<usize> = scope.iter().map(|e| e / k).collect();
            let cols: BTreeSet<usize> = scope.iter().map(|e| e % k).collect();
            if rows.len() > 1 {
                diagnostics.insert(format!("scope spans {} rows", rows.len()));
            }
            let lo = *cols.first().expect("non-empty scope");
            let hi = *cols.last().expect("non-empty scope");
            if hi - lo + 1 != cols.len() {
                diagnostics.insert("non-contiguous pairs".to_string());
            } else if cols.len() != 4 {
                diagnostics.insert(format!("scope spans {} columns", cols.len()));
            } else if !lo.is_multiple_of(4) {
                diagnostics.insert(format!("scope starting at column {lo} is not 4-aligned"));
            }
        }
        if diagnostics.is_empty() {
            diagnostics.insert("scopes differ from the hardware 2:4 groups".to_string());
        }
    }
    TensorCoreCheck {
        compatible: diagnostics.is_empty(),
        diagnostics: diagnostics.into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{make_pattern, PatternDims, PatternName};

    #[test]
    fn owners() {
        assert_eq!(mma_fragment_owner(FragmentKind::A, 0, 0).unwrap(), 0);
        let t5 = fragment_assignment(FragmentKind::A, 5).unwrap();
        assert_eq!(t5.rows, vec![1, 9]);
        assert_eq!(t5.cols, vec![2, 3, 10, 11]);
        for (r, c) in t5.elements() {
            assert_eq!(mma_fragment_owner(FragmentKind::A, r, c).unwrap(), 5);
        }
        assert!(mma_fragment_owner(FragmentKind::B, 0, 8).is_err());
        assert!(fragment_assignment(FragmentKind::C, 32).is_err());
    }

    #[test]
    fn quotes() {
        let s = compression_quote(CompressionPattern::Standard24, 16).unwrap();
        assert_eq!(s.ratio, Ratio::new(9, 16));
        assert_eq!((s.compressed_bits, s.uncompressed_bits), (36, 64));
        let c = compression_quote(CompressionPattern::Coupled24, 16).unwrap();
        assert_eq!(c.ratio, Ratio::new(17, 32));
        assert_eq!((c.compressed_bits, c.uncompressed_bits), (68, 128));
        assert!(s.ratio > c.ratio);
        assert_eq!(compression_quote(CompressionPattern::Standard24, 4).unwrap().overhead, 0.5);
        assert_eq!(compression_quote(CompressionPattern::Coupled24, 4).unwrap().overhead, 0.25);
        assert_eq!(
            compression_quote(CompressionPattern::Coupled24, 3),
            Err(HardwareError::UnsupportedBits(3))
        );
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["ratio"], serde_json::json!({"num": 9, "den": 16}));
    }

    #[test]
    fn tensorcore_checks() {
        let spec = |name| make_pattern(name, &PatternDims::mk(4, 32)).unwrap().single().unwrap();
        assert!(check_tensorcore_24(&spec(PatternName::TwoFour), 4, 32).compatible);
        assert!(check_tensorcore_24(&hardware_24_spec(4, 32), 4, 32).compatible);
        let fe = check_tensorcore_24(&spec(PatternName::FourEight), 4, 32);
        assert!(!fe.compatible);
        assert!(fe.diagnostics.contains(&"scope spans 8 columns".to_string()), "{fe:?}");
        let cp = check_tensorcore_24(&spec(PatternName::CoupledTwoFour), 4, 32);
        assert!(!cp.compatible);
        assert!(cp.diagnostics.contains(&"non-contiguous pairs".to_string()), "{cp:?}");
    }
}
