mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use s3kit::hessian::{damp_and_invert, HessianState};

fn survivor_inverse(state: &HessianState) -> DMatrix<f64> {
    let alive = state.surviving_indices();
    let d = state.damped();
    d.select_rows(&alive).select_columns(&alive).try_inverse().unwrap()
}

fn survivor_block(state: &HessianState) -> DMatrix<f64> {
    let alive = state.surviving_indices();
    state.h_inv().select_rows(&alive).select_columns(&alive)
}

/// Random disjoint element sets covering part of `0..k`.
fn random_partition(rng: &mut impl Rng, k: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..k).collect();
    idx.shuffle(rng);
    idx.truncate(rng.gen_range(1..k));
    let mut out = Vec::new();
    while !idx.is_empty() {
        let take = rng.gen_range(1..=idx.len().min(4));
        let mut part: Vec<usize> = idx.drain(..take).collect();
        part.sort_unstable();
        out.push(part);
    }
    out
}

#[test]
fn schur_updates_match_direct_inversion() {
    let mut rng = common::rng(1);
    for trial in 0..60 {
        let k = rng.gen_range(2..=32);
        let h = common::random_spd(&mut rng, k);
        let mut state = damp_and_invert(&h, 0.01).unwrap();
        for part in random_partition(&mut rng, k) {
            state.schur_prune(&part).unwrap();
            let err = common::rel_mat_err(&survivor_block(&state), &survivor_inverse(&state));
            assert!(err <= 1e-8, "trial {trial}: {err:e}");
            for &e in &state.pruned_indices() {
                assert!(state.h_inv().row(e).iter().all(|&v| v == 0.0));
                assert!(state.h_inv().column(e).iter().all(|&v| v == 0.0));
            }
            let asym = (state.h_inv() - state.h_inv().transpose()).amax();
            assert!(asym <= 1e-10 * state.h_inv().amax().max(1e-300));
        }
    }
}

#[test]
fn pruning_order_does_not_matter() {
    let mut rng = common::rng(2);
    for _ in 0..40 {
        let k = rng.gen_range(4..=24);
        let h = common::random_spd(&mut rng, k);
        let parts = random_partition(&mut rng, k);
        let base = damp_and_invert(&h, 0.01).unwrap();
        let mut forward = base.clone();
        for p in &parts {
            forward.schur_prune(p).unwrap();
        }
        let mut backward = base;
        for p in parts.iter().rev() {
            backward.schur_prune(p).unwrap();
        }
        assert!(common::rel_mat_err(forward.h_inv(), backward.h_inv()) <= 1e-8);
    }
}

#[test]
fn pruning_everything_leaves_zero() {
    let mut rng = common::rng(3);
    let h = common::random_spd(&mut rng, 6);
    let state = damp_and_invert(&h, 0.0).unwrap().pruned(&[0, 1, 2, 3, 4, 5]).unwrap();
    assert_eq!(state.h_inv(), &DMatrix::<f64>::zeros(6, 6));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn damped_inverse_is_an_inverse(seed in any::<u64>(), k in 1usize..12, lambda in 0.0f64..0.5) {
        let mut rng = common::rng(seed);
        let h = common::random_spd(&mut rng, k);
        let state = damp_and_invert(&h, lambda).unwrap();
        let prod = state.damped() * state.h_inv();
        prop_assert!(common::rel_mat_err(&prod, &DMatrix::identity(k, k)) < 1e-8);
        let expect = lambda * h.diagonal().mean();
        prop_assert!((state.damping() - expect).abs() <= 1e-15 * expect.max(1.0));
    }

    #[test]
    fn single_prune_matches_direct(seed in any::<u64>(), k in 2usize..16, pick in any::<prop::sample::Index>()) {
        let mut rng = common::rng(seed);
        let h = common::random_spd(&mut rng, k);
        let mut state = damp_and_invert(&h, 0.01).unwrap();
        state.schur_prune(&[pick.index(k)]).unwrap();
        prop_assert!(common::rel_mat_err(&survivor_block(&state), &survivor_inverse(&state)) <= 1e-8);
    }
}
