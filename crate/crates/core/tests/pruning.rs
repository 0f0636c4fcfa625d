mod common;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use s3kit::hessian::{damp_and_invert, empirical_hessian, CalibrationSet};
use s3kit::layout::ElementSet;
use s3kit::oracle::{brute_force_best_mask, exact_compensated_loss, mask_loss};
use s3kit::prune::{
    obs_update, prune, prune_scope_obs, relative_output_error, row_block_saliency, saliency_obd, saliency_obs,
    saliency_wanda, sparsegpt_like, Method, OrderMode, PruneConfig,
};
use s3kit::spec::{make_pattern, CompiledSpec, PatternDims, PatternName};

fn compiled(name: PatternName, m: usize, k: usize) -> CompiledSpec {
    make_pattern(name, &PatternDims::mk(m, k)).unwrap().single().unwrap().compile().unwrap()
}

#[test]
fn saliency_equals_exact_single_block_loss() {
    let mut rng = common::rng(21);
    for trial in 0..200 {
        let k = rng.gen_range(2..=32);
        let h = common::random_spd(&mut rng, k);
        let state = damp_and_invert(&h, 0.01).unwrap();
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cols: Vec<usize> = (0..k).collect();
        cols.shuffle(&mut rng);
        cols.truncate(rng.gen_range(1..=k.min(4)));
        cols.sort_unstable();
        let s = row_block_saliency(&w, &state, &cols).unwrap();
        let (loss, row) = exact_compensated_loss(&w, &state.damped(), &ElementSet::from_indices(cols.clone())).unwrap();
        assert!(common::rel_err(s, loss) <= 1e-9, "trial {trial}: {s} vs {loss}");
        let mut updated = w.clone();
        let incurred = obs_update(&mut updated, &state, &cols).unwrap();
        assert!(common::rel_err(incurred, s) <= 1e-12);
        for &c in &cols {
            assert_eq!(updated[c], 0.0);
        }
        for (a, b) in updated.iter().zip(&row) {
            assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn greedy_beats_static_on_correlated_two_four() {
    let spec = compiled(PatternName::TwoFour, 1, 4);
    let mut rng = common::rng(22);
    let mut not_worse = 0;
    for _ in 0..1000 {
        let h = common::random_spd(&mut rng, 4);
        let state = damp_and_invert(&h, 0.01).unwrap();
        let w = common::uniform(&mut rng, 1, 4);
        let g = prune_scope_obs(&spec, &w, &state, OrderMode::Greedy).unwrap();
        let s = prune_scope_obs(&spec, &w, &state, OrderMode::Static).unwrap();
        let oracle = brute_force_best_mask(&spec, &w, &state.damped()).unwrap();
        let (gl, sl) = (g.report.predicted_loss_increase, s.report.predicted_loss_increase);
        assert!(gl >= oracle.best_loss * (1.0 - 1e-9) - 1e-15);
        assert!(sl >= oracle.best_loss * (1.0 - 1e-9) - 1e-15);
        if gl <= sl * (1.0 + 1e-12) + 1e-15 {
            not_worse += 1;
        }
    }
    assert!(not_worse >= 950, "greedy <= static in {not_worse}/1000");
}

#[test]
fn greedy_is_optimal_for_block_diagonal_hessians() {
    let mut rng = common::rng(23);
    for (name, b) in [(PatternName::TwoFour, 1), (PatternName::FourEight, 2)] {
        for _ in 0..25 {
            let k = if name == PatternName::TwoFour { 8 } else { 16 };
            let spec = compiled(name, 1, k);
            let h = common::block_diagonal_spd(&mut rng, k, b);
            let state = damp_and_invert(&h, 0.01).unwrap();
            let w = common::uniform(&mut rng, 1, k);
            let g = prune_scope_obs(&spec, &w, &state, OrderMode::Greedy).unwrap();
            let oracle = brute_force_best_mask(&spec, &w, &state.damped()).unwrap();
            assert!(common::rel_err(g.report.predicted_loss_increase, oracle.best_loss) <= 1e-9);
            assert_eq!(g.mask, oracle.best_mask);
        }
    }
}

#[test]
fn sequential_updates_reach_the_joint_optimum() {
    let mut rng = common::rng(24);
    for trial in 0..60 {
        let (name, k) = [(PatternName::TwoFour, 16), (PatternName::FourEight, 16), (PatternName::Unstructured, 8)]
            [trial % 3];
        let m = 1 + trial % 3;
        let spec = compiled(name, m, k);
        let x = common::correlated_inputs(&mut rng, 32, k);
        let h = empirical_hessian(&CalibrationSet::new(x).unwrap());
        let state = damp_and_invert(&h, 0.01).unwrap();
        let w = common::uniform(&mut rng, m, k);
        for order in [OrderMode::Static, OrderMode::Greedy] {
            let out = prune_scope_obs(&spec, &w, &state, order).unwrap();
            let exact = mask_loss(&spec, &w, &state.damped(), &out.mask).unwrap();
            assert!(
                common::rel_err(out.report.predicted_loss_increase, exact) <= 1e-8,
                "trial {trial}: {} vs {exact}",
                out.report.predicted_loss_increase
            );
            let pruned = spec.element_mask(&out.mask);
            for r in 0..m {
                let zero: Vec<usize> = pruned.iter().filter(|e| e / k == r).map(|e| e % k).collect();
                let row: Vec<f64> = w.row(r).iter().copied().collect();
                let (_, best) = exact_compensated_loss(&row, &state.damped(), &ElementSet::from_indices(zero)).unwrap();
                for c in 0..k {
                    assert!((out.weights[(r, c)] - best[c]).abs() <= 1e-8 * (1.0 + best[c].abs()));
                }
            }
            for e in pruned.iter() {
                assert_eq!(out.weights[(e / k, e % k)], 0.0);
            }
            assert!(spec.mask_respects_keep(&out.mask));
        }
    }
}

#[test]
fn rows_are_independent() {
    let mut rng = common::rng(25);
    let (m, k) = (6, 16);
    let spec = compiled(PatternName::FourEight, m, k);
    let h = common::random_spd(&mut rng, k);
    let state = damp_and_invert(&h, 0.01).unwrap();
    let w = common::uniform(&mut rng, m, k);
    let base = prune_scope_obs(&spec, &w, &state, OrderMode::Greedy).unwrap();
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut rng);
    let shuffled = DMatrix::from_fn(m, k, |r, c| w[(perm[r], c)]);
    let out = prune_scope_obs(&spec, &shuffled, &state, OrderMode::Greedy).unwrap();
    for r in 0..m {
        for c in 0..k {
            assert_eq!(out.weights[(r, c)].to_bits(), base.weights[(perm[r], c)].to_bits());
        }
    }
}

#[test]
fn diagonal_hessian_obd_equals_obs() {
    let mut rng = common::rng(26);
    let (m, k) = (3, 16);
    let spec = compiled(PatternName::TwoFour, m, k);
    let diag: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..3.0)).collect();
    let h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag.clone()));
    let state = damp_and_invert(&h, 0.0).unwrap();
    let w = common::uniform(&mut rng, m, k);
    let obd = saliency_obd(&spec, &w, &diag).unwrap();
    let obs = saliency_obs(&spec, &w, &state).unwrap();
    for (a, b) in obd.iter().zip(&obs) {
        assert!(common::rel_err(*a, *b) <= 1e-12);
    }
    assert_eq!(spec.hard_threshold(&obd).unwrap(), spec.hard_threshold(&obs).unwrap());
    let out = prune_scope_obs(&spec, &w, &state, OrderMode::Greedy).unwrap();
    assert_eq!(out.mask, spec.hard_threshold(&obd).unwrap());
}

#[test]
fn wanda_and_obd_choose_the_same_scalar_masks() {
    let mut rng = common::rng(27);
    for uniform_norms in [true, false] {
        let (m, k, n) = (4, 16, 32);
        let spec = compiled(PatternName::TwoFour, m, k);
        let mut x = common::uniform(&mut rng, n, k);
        if uniform_norms {
            for mut col in x.column_iter_mut() {
                let norm = col.norm();
                col /= norm;
            }
        }
        let calib = CalibrationSet::new(x).unwrap();
        let w = common::uniform(&mut rng, m, k);
        let diag: Vec<f64> = empirical_hessian(&calib).diagonal().iter().copied().collect();
        let obd = spec.hard_threshold(&saliency_obd(&spec, &w, &diag).unwrap()).unwrap();
        let wanda = spec.hard_threshold(&saliency_wanda(&spec, &w, &calib).unwrap()).unwrap();
        assert_eq!(obd, wanda);

        let a = prune(&spec, &w, &calib, &PruneConfig { method: Method::SObd, ..Default::default() }).unwrap();
        let b = prune(&spec, &w, &calib, &PruneConfig { method: Method::Wanda, ..Default::default() }).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.weights, b.weights);
    }
}

#[test]
fn obs_beats_sparsegpt_on_average() {
    let spec = compiled(PatternName::TwoFour, 8, 16);
    let (mut obs_total, mut gpt_total, mut wins) = (0.0, 0.0, 0);
    for seed in 0..100 {
        let mut rng = common::rng(1000 + seed);
        let x = common::correlated_inputs(&mut rng, 64, 16);
        let calib = CalibrationSet::new(x.clone()).unwrap();
        let w = common::uniform(&mut rng, 8, 16);
        let state = damp_and_invert(&empirical_hessian(&calib), 0.01).unwrap();
        let obs = prune_scope_obs(&spec, &w, &state, OrderMode::Greedy).unwrap();
        let gpt = sparsegpt_like(&spec, &w, &state).unwrap();
        let eo = relative_output_error(&x, &w, &obs.weights).unwrap();
        let eg = relative_output_error(&x, &w, &gpt.weights).unwrap();
        obs_total += eo;
        gpt_total += eg;
        if eo <= eg {
            wins += 1;
        }
    }
    assert!(obs_total < gpt_total, "{obs_total} vs {gpt_total}");
    assert!(wins >= 80, "{wins}/100");
}

#[test]
fn prune_reports_are_consistent() {
    let mut rng = common::rng(28);
    let spec = compiled(PatternName::TwoFour, 4, 8);
    let calib = CalibrationSet::new(common::correlated_inputs(&mut rng, 16, 8)).unwrap();
    let w = common::uniform(&mut rng, 4, 8);
    for method in [Method::SObd, Method::SObs, Method::Wanda, Method::SparseGptLike] {
        let out = prune(&spec, &w, &calib, &PruneConfig { method, ..Default::default() }).unwrap();
        let r = &out.report;
        assert_eq!(r.method, method);
        assert_eq!(r.per_scope.len(), spec.num_scopes());
        assert!(r.per_scope.iter().all(|s| s.retained.len() == 2));
        assert!(r.relative_output_error.unwrap() >= 0.0);
        assert!(spec.mask_respects_keep(&out.mask));
        let json = serde_json::to_value(r).unwrap();
        for key in ["method", "order_mode", "per_scope", "relative_output_error", "wall_time_s", "fallback_rows"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
    let all = prune(&spec, &w, &calib, &PruneConfig { keep: Some(4), ..Default::default() }).unwrap();
    assert_eq!(all.weights, w);
    assert_eq!(all.report.relative_output_error, Some(0.0));
    assert!(prune(&spec, &w, &calib, &PruneConfig { keep: Some(5), ..Default::default() }).is_err());
}
