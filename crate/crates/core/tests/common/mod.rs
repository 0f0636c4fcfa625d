#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Calibration inputs with correlated features.
pub fn correlated_inputs(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    let z = uniform(rng, n, k);
    let mix = DMatrix::identity(k, k) + uniform(rng, k, k) * 0.6;
    z * mix
}

/// Random symmetric positive definite matrix with off-diagonal structure.
pub fn random_spd(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let x = correlated_inputs(rng, k + 4, k);
    let mut h = x.tr_mul(&x) / (k + 4) as f64;
    for i in 0..k {
        h[(i, i)] += 1e-3;
    }
    (h.clone() + h.transpose()) * 0.5
}

/// Block-diagonal SPD matrix with blocks of `b` consecutive coordinates.
pub fn block_diagonal_spd(rng: &mut ChaCha8Rng, k: usize, b: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(k, k);
    for start in (0..k).step_by(b) {
        let blk = random_spd(rng, b);
        h.view_mut((start, start), (b, b)).copy_from(&blk);
    }
    h
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Max absolute entry difference relative to the larger max entry.
pub fn rel_mat_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax()).max(1e-300)
}
