use std::collections::BTreeSet;

use s3kit::hardware::{
    a_column_pair, check_tensorcore_24, fragment_assignment, mma_fragment_owner, FragmentKind, WARP_SIZE,
};
use s3kit::layout::Layout;
use s3kit::spec::{make_pattern, PatternDims, PatternName, SparsitySpec};

#[test]
fn fragments_are_partitioned() {
    for kind in [FragmentKind::A, FragmentKind::B, FragmentKind::C] {
        let (rows, cols) = kind.shape();
        let mut counts = [0usize; WARP_SIZE];
        for r in 0..rows {
            for c in 0..cols {
                counts[mma_fragment_owner(kind, r, c).unwrap()] += 1;
            }
        }
        let expected = match kind {
            FragmentKind::A => 8,
            _ => 4,
        };
        assert!(counts.iter().all(|&n| n == expected), "{kind:?}: {counts:?}");
        for t in 0..WARP_SIZE {
            let a = fragment_assignment(kind, t).unwrap();
            assert_eq!(a.elements().len(), expected);
            for (r, c) in a.elements() {
                assert_eq!(mma_fragment_owner(kind, r, c).unwrap(), t);
            }
        }
    }
}

#[test]
fn two_four_scopes_cover_two_thread_pairs() {
    for start in (0..16).step_by(4) {
        let pairs: BTreeSet<(usize, usize)> = (start..start + 4).map(a_column_pair).collect();
        assert_eq!(pairs.len(), 2);
        // Each pair is owned whole by one lane in every row.
        for (half, tau) in pairs {
            let cols = [8 * half + 2 * tau, 8 * half + 2 * tau + 1];
            for r in 0..16 {
                assert_eq!(
                    mma_fragment_owner(FragmentKind::A, r, cols[0]).unwrap(),
                    mma_fragment_owner(FragmentKind::A, r, cols[1]).unwrap()
                );
            }
        }
    }
}

#[test]
fn structural_equivalence() {
    // 2:4 written over a transposed-order view of the same groups.
    let (m, k) = (8, 16);
    let phys = Layout::row_major(vec![m, k]).unwrap();
    let alt = SparsitySpec::over(
        phys,
        Layout::new(vec![k / 4, m, 4], vec![4, k, 1]).unwrap(),
        vec![1, 1, 1],
        vec![1, 1, 4],
        2,
    );
    assert!(check_tensorcore_24(&alt, m, k).compatible);
    let nm = make_pattern(
        PatternName::Nm,
        &PatternDims::new().with("N", 2).with("M", 4).with("K", k).with("R", m),
    )
    .unwrap()
    .single()
    .unwrap();
    assert!(check_tensorcore_24(&nm, m, k).compatible);
    let one_of_four = SparsitySpec { keep: 1, ..nm };
    assert!(!check_tensorcore_24(&one_of_four, m, k).compatible);
    let unstructured = make_pattern(PatternName::Unstructured, &PatternDims::mk(m, k)).unwrap().single().unwrap();
    let res = check_tensorcore_24(&unstructured, m, k);
    assert!(res.diagnostics.iter().any(|d| d.contains("rows")), "{res:?}");
}
