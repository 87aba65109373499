//! Small instances shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use windcast_core::model::{FullHyperparameters, Hyperparameters, ModelKind};
use windcast_core::spde::Mesh;

/// 4 × 4 grid over [0, 30]².
pub fn grid_mesh() -> Mesh {
    Mesh::regular_grid(4, 4, 10.0).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Locations inside the grid mesh and logit-scale observations around −1.
pub fn small_data(n_farms: usize, len: usize, seed: u64) -> (Array2<f64>, Vec<[f64; 2]>) {
    let mut r = rng(seed);
    let locs = (0..n_farms)
        .map(|_| [r.random_range(2.0..28.0), r.random_range(2.0..28.0)])
        .collect();
    let y = Array2::from_shape_fn((n_farms, len), |_| -1.0 + normal(&mut r));
    (y, locs)
}

/// Random valid hyperparameters spanning weak to strong dependence.
pub fn random_theta(kind: ModelKind, r: &mut ChaCha8Rng) -> Hyperparameters {
    FullHyperparameters {
        sigma_e2: r.random_range(0.05..1.0),
        sigma_nu2: r.random_range(0.05..1.0),
        rho1: r.random_range(-0.9..0.95),
        rho2: r.random_range(-0.9..0.95),
        sigma_w2: r.random_range(0.1..2.0),
        range: r.random_range(5.0..40.0),
    }
    .for_kind(kind)
}

/// |a − b| ≤ tol · max(1, |b|).
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
