mod common;

use common::{close, grid_mesh, normal, random_theta, rng, small_data};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use proptest::prelude::*;
use windcast_core::harness::initial_guess;
use windcast_core::inference::{
    condition, dense_oracle, fit_map, log_evidence, log_marginal_posterior, predictive_moments,
    predictive_samples, predictive_transformed,
};
use windcast_core::model::{
    assemble, log_hyperprior, AssemblyOptions, FullHyperparameters, Hyperparameters, ModelKind,
    Target,
};
use windcast_core::optim::NelderMeadOptions;
use windcast_core::par::Parallelism;

fn opts(horizon: usize) -> AssemblyOptions {
    AssemblyOptions {
        horizon,
        ..Default::default()
    }
}

fn observed(n: usize) -> Vec<Target> {
    (0..n).map(Target::Observed).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sparse_matches_dense(seed in 0u64..1_000_000, k in 0usize..3, n in 1usize..4, len in 2usize..16) {
        let kind = ModelKind::ALL[k];
        let mesh = grid_mesh();
        let (y, locs) = small_data(n, len, seed);
        let model = assemble(kind, &y, &locs, Some(&mesh), &[], &opts(0)).unwrap();
        prop_assume!(model.dim() <= 200);
        let theta = random_theta(kind, &mut rng(seed ^ 0xabc));
        let post = condition(&model, &theta).unwrap();
        let dense = dense_oracle(&model, &theta).unwrap();
        let vars = post.marginal_variances();
        for i in 0..model.dim() {
            prop_assert!(close(post.mean[i], dense.mean[i], 1e-8), "mean {i}: {} vs {}", post.mean[i], dense.mean[i]);
            prop_assert!(close(vars[i], dense.covariance[(i, i)], 1e-8), "var {i}");
        }
        let ev = log_evidence(&model, &theta).unwrap();
        prop_assert!(close(ev, dense.log_evidence, 1e-8), "{ev} vs {}", dense.log_evidence);
        let lmp = log_marginal_posterior(&model, &theta).unwrap();
        let prior = log_hyperprior(&theta, kind, model.priors()).unwrap();
        prop_assert!(close(lmp - prior, dense.log_evidence, 1e-8));
    }

    #[test]
    fn horizon_extension_leaves_evidence_unchanged(seed in 0u64..1_000_000, k in 0usize..3, h in 1usize..15) {
        let kind = ModelKind::ALL[k];
        let mesh = grid_mesh();
        let (y, locs) = small_data(3, 14, seed);
        let theta = random_theta(kind, &mut rng(seed + 1));
        let fit = assemble(kind, &y, &locs, Some(&mesh), &[], &opts(0)).unwrap();
        let mut targets = observed(3);
        if kind.has_field() {
            targets.push(Target::New([15.0, 15.0]));
        }
        let ext = assemble(kind, &y, &locs, Some(&mesh), &targets, &opts(h)).unwrap();
        prop_assert!(ext.dim() >= fit.dim());
        let (a, b) = (log_evidence(&fit, &theta).unwrap(), log_evidence(&ext, &theta).unwrap());
        prop_assert!(close(a, b, 1e-9), "{a} vs {b}");
    }
}

/// Dense posterior of a shared intercept plus independent AR(1) chains,
/// built from the textbook tridiagonal AR(1) precision.
fn shared_intercept_ar_means(
    y: &Array2<f64>,
    horizon: usize,
    sigma_e2: f64,
    sigma_nu2: f64,
    rho: f64,
) -> Vec<f64> {
    let (n, len) = y.dim();
    let steps = len + horizon;
    let dim = 1 + n * steps;
    let mut q = DMatrix::<f64>::zeros(dim, dim);
    q[(0, 0)] = 1.0 / 100.0;
    for j in 0..n {
        let o = 1 + j * steps;
        for t in 0..steps {
            let edge = t == 0 || t == steps - 1;
            q[(o + t, o + t)] = if edge { 1.0 } else { 1.0 + rho * rho } / sigma_nu2;
            if t + 1 < steps {
                q[(o + t, o + t + 1)] = -rho / sigma_nu2;
                q[(o + t + 1, o + t)] = -rho / sigma_nu2;
            }
        }
    }
    let mut b = DVector::<f64>::zeros(dim);
    for j in 0..n {
        for t in 0..len {
            let c = 1 + j * steps + t;
            q[(0, 0)] += 1.0 / sigma_e2;
            q[(c, c)] += 1.0 / sigma_e2;
            q[(0, c)] += 1.0 / sigma_e2;
            q[(c, 0)] += 1.0 / sigma_e2;
            b[0] += y[[j, t]] / sigma_e2;
            b[c] += y[[j, t]] / sigma_e2;
        }
    }
    let m = q.cholesky().unwrap().solve(&b);
    let mut out = Vec::new();
    for j in 0..n {
        for h in 0..horizon {
            out.push(m[0] + m[1 + j * steps + len + h]);
        }
    }
    out
}

#[test]
fn combined_without_field_is_shared_intercept_ar() {
    let mesh = grid_mesh();
    let (y, locs) = small_data(5, 20, 11);
    let full = FullHyperparameters {
        sigma_e2: 0.2,
        sigma_nu2: 0.3,
        rho1: 0.8,
        rho2: 0.5,
        sigma_w2: 1e-10,
        range: 15.0,
    };
    let model = assemble(
        ModelKind::Combined,
        &y,
        &locs,
        Some(&mesh),
        &observed(5),
        &opts(4),
    )
    .unwrap();
    let (means, _) = predictive_moments(&model, &full.for_kind(ModelKind::Combined)).unwrap();
    let oracle = shared_intercept_ar_means(&y, 4, 0.2, 0.3, 0.8);
    for (a, b) in means.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn combined_without_chains_is_spatio_temporal() {
    let mesh = grid_mesh();
    let (y, locs) = small_data(5, 20, 12);
    let full = FullHyperparameters {
        sigma_e2: 0.2,
        sigma_nu2: 1e-10,
        rho1: 0.5,
        rho2: 0.6,
        sigma_w2: 1.0,
        range: 15.0,
    };
    let targets = observed(5);
    let stt = assemble(
        ModelKind::Combined,
        &y,
        &locs,
        Some(&mesh),
        &targets,
        &opts(4),
    )
    .unwrap();
    let st = assemble(
        ModelKind::SpatioTemporal,
        &y,
        &locs,
        Some(&mesh),
        &targets,
        &opts(4),
    )
    .unwrap();
    let (a, _) = predictive_moments(&stt, &full.for_kind(ModelKind::Combined)).unwrap();
    let (b, _) = predictive_moments(&st, &full.for_kind(ModelKind::SpatioTemporal)).unwrap();
    for (a, b) in a.iter().zip(&b) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn white_noise_chains_have_flat_predictive_variance() {
    // y_t = b + w_t + e_t with iid w and e: b has precision 1/100 + L/s²
    let (y, locs) = small_data(2, 30, 3);
    let (se, snu) = (0.3, 0.5);
    let theta = FullHyperparameters {
        sigma_e2: se,
        sigma_nu2: snu,
        rho1: 0.0,
        rho2: 0.0,
        sigma_w2: 1.0,
        range: 1.0,
    }
    .for_kind(ModelKind::Temporal);
    let model = assemble(ModelKind::Temporal, &y, &locs, None, &observed(2), &opts(6)).unwrap();
    let (_, vars) = predictive_moments(&model, &theta).unwrap();
    let s2 = se + snu;
    let expected = s2 + 1.0 / (1.0 / 100.0 + 30.0 / s2);
    for v in vars {
        assert!((v - expected).abs() < 1e-10, "{v} vs {expected}");
    }
}

#[test]
fn ar_predictive_variance_grows_to_stationary() {
    let (y, locs) = small_data(1, 40, 4);
    let (se, snu, rho) = (0.1, 0.2, 0.6);
    let theta = FullHyperparameters {
        sigma_e2: se,
        sigma_nu2: snu,
        rho1: rho,
        rho2: 0.0,
        sigma_w2: 1.0,
        range: 1.0,
    }
    .for_kind(ModelKind::Temporal);
    let model = assemble(
        ModelKind::Temporal,
        &y,
        &locs,
        None,
        &observed(1),
        &opts(60),
    )
    .unwrap();
    let (_, vars) = predictive_moments(&model, &theta).unwrap();
    assert!(vars.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    let stationary = snu / (1.0 - rho * rho) + se;
    let last = *vars.last().unwrap();
    // 60 steps out the chain has forgotten the data; only the intercept's
    // posterior variance remains on top of the stationary variance
    let intercept =
        condition(&model, &theta).unwrap().marginal_variances()[model.layout().intercept(0)];
    assert!(
        (last - stationary - intercept).abs() < 1e-9,
        "{last} vs {stationary} + {intercept}"
    );
    let one_step = snu + se;
    assert!(vars[0] >= one_step && vars[0] < last);
}

#[test]
fn co_located_farms_move_together() {
    let mesh = grid_mesh();
    let (y, mut locs) = small_data(4, 24, 5);
    locs[1] = locs[0];
    let theta = FullHyperparameters {
        sigma_e2: 1e-4,
        sigma_nu2: 0.1,
        rho1: 0.5,
        rho2: 0.7,
        sigma_w2: 1.0,
        range: 20.0,
    }
    .for_kind(ModelKind::SpatioTemporal);
    let model = assemble(
        ModelKind::SpatioTemporal,
        &y,
        &locs,
        Some(&mesh),
        &observed(4),
        &opts(12),
    )
    .unwrap();
    let cube = predictive_transformed(&model, &theta, 2000, 9, Parallelism::Sequential).unwrap();
    // past the last observed knot, where field uncertainty dominates the noise
    for h in 6..12 {
        let a: Vec<f64> = (0..2000).map(|s| cube[[s, 0, h]]).collect();
        let b: Vec<f64> = (0..2000).map(|s| cube[[s, 1, h]]).collect();
        let r = correlation(&a, &b);
        assert!(r > 0.99, "h = {h}: correlation {r}");
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn sample_moments_match_dense_posterior() {
    let (y, locs) = small_data(1, 3, 6);
    let theta = FullHyperparameters {
        sigma_e2: 0.2,
        sigma_nu2: 0.4,
        rho1: 0.7,
        rho2: 0.0,
        sigma_w2: 1.0,
        range: 1.0,
    }
    .for_kind(ModelKind::Temporal);
    let model = assemble(ModelKind::Temporal, &y, &locs, None, &observed(1), &opts(5)).unwrap();
    let dense = dense_oracle(&model, &theta).unwrap();
    let b = model.target_projector();
    let bd = DMatrix::from_row_slice(b.nrows(), b.ncols(), &b.to_dense());
    let mean = &bd * &dense.mean;
    let cov = &bd * &dense.covariance * bd.transpose() + DMatrix::identity(5, 5) * theta.sigma_e2;
    let n = 100_000;
    let draws = predictive_transformed(&model, &theta, n, 77, Parallelism::Parallel).unwrap();
    let nf = n as f64;
    let m: Vec<f64> = (0..5)
        .map(|h| (0..n).map(|s| draws[[s, 0, h]]).sum::<f64>() / nf)
        .collect();
    for i in 0..5 {
        let se = (cov[(i, i)] / nf).sqrt();
        assert!(
            (m[i] - mean[i]).abs() < 4.0 * se,
            "mean {i}: {} vs {}",
            m[i],
            mean[i]
        );
        for j in 0..5 {
            let c = (0..n)
                .map(|s| (draws[[s, 0, i]] - m[i]) * (draws[[s, 0, j]] - m[j]))
                .sum::<f64>()
                / (nf - 1.0);
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / nf).sqrt();
            assert!(
                (c - cov[(i, j)]).abs() < 4.0 * se,
                "cov {i},{j}: {c} vs {}",
                cov[(i, j)]
            );
        }
    }
}

#[test]
fn sampling_is_deterministic_across_modes() {
    let mesh = grid_mesh();
    let (y, locs) = small_data(3, 20, 7);
    let theta = random_theta(ModelKind::Combined, &mut rng(8));
    let model = assemble(
        ModelKind::Combined,
        &y,
        &locs,
        Some(&mesh),
        &observed(3),
        &opts(4),
    )
    .unwrap();
    let a = predictive_samples(&model, &theta, 120, 42, Parallelism::Parallel).unwrap();
    let b = predictive_samples(&model, &theta, 120, 42, Parallelism::Sequential).unwrap();
    let c = predictive_samples(&model, &theta, 120, 43, Parallelism::Sequential).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.samples, c.samples);
    assert!(a.samples.iter().all(|&x| (0.0..=1.0).contains(&x)));
    assert_eq!(a.lead_times, vec![1, 2, 3, 4]);
}

#[test]
fn duplicated_row_evidence_is_pinned() {
    let mesh = grid_mesh();
    let (y, locs) = small_data(3, 10, 9);
    let theta = FullHyperparameters {
        sigma_e2: 0.3,
        sigma_nu2: 0.2,
        rho1: 0.6,
        rho2: 0.5,
        sigma_w2: 0.8,
        range: 12.0,
    }
    .for_kind(ModelKind::SpatioTemporal);
    let mut y2 = Array2::zeros((4, 10));
    y2.slice_mut(ndarray::s![..3, ..]).assign(&y);
    y2.row_mut(3).assign(&y.row(0));
    let mut locs2 = locs.clone();
    locs2.push(locs[0]);
    let base = assemble(
        ModelKind::SpatioTemporal,
        &y,
        &locs,
        Some(&mesh),
        &[],
        &opts(0),
    )
    .unwrap();
    let dup = assemble(
        ModelKind::SpatioTemporal,
        &y2,
        &locs2,
        Some(&mesh),
        &[],
        &opts(0),
    )
    .unwrap();
    let a = log_evidence(&base, &theta).unwrap();
    let b = log_evidence(&dup, &theta).unwrap();
    let again = log_evidence(&dup, &theta).unwrap();
    assert_eq!(b.to_bits(), again.to_bits());
    assert!(close(
        b,
        dense_oracle(&dup, &theta).unwrap().log_evidence,
        1e-8
    ));
    assert!(
        (a - PINNED_BASE).abs() < 1e-9 * PINNED_BASE.abs(),
        "{a:?} {b:?}"
    );
    assert!(
        (b - PINNED_DUPLICATE).abs() < 1e-9 * PINNED_DUPLICATE.abs(),
        "{a:?} {b:?}"
    );
}

const PINNED_BASE: f64 = -71.437_290_605_790_96;
const PINNED_DUPLICATE: f64 = -99.915_361_271_113_77;

#[test]
fn fit_improves_and_repeats() {
    let mesh = grid_mesh();
    let (y, locs) = small_data(3, 24, 10);
    for kind in ModelKind::ALL {
        let model = assemble(kind, &y, &locs, Some(&mesh), &[], &opts(0)).unwrap();
        let init = initial_guess(kind, &y, 15.0, 12);
        let a = fit_map(&model, &init, &NelderMeadOptions::default()).unwrap();
        let b = fit_map(&model, &init, &NelderMeadOptions::default()).unwrap();
        assert!(a.log_posterior_at_mode >= a.log_posterior_at_init);
        assert_eq!(a, b);
        let direct = log_marginal_posterior(&model, &a.theta_hat).unwrap();
        assert!((direct - a.log_posterior_at_mode).abs() < 1e-9 * direct.abs().max(1.0));
    }
}

/// Per-farm intercepts N(0, 1), stationary AR(1) chains and noise.
fn simulate_t(n: usize, len: usize, truth: &Hyperparameters, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    let (rho, snu, se) = (
        truth.rho1.unwrap(),
        truth.sigma_nu2.unwrap(),
        truth.sigma_e2,
    );
    let mut y = Array2::zeros((n, len));
    for j in 0..n {
        let b = normal(&mut r);
        let mut w = (snu / (1.0 - rho * rho)).sqrt() * normal(&mut r);
        for t in 0..len {
            if t > 0 {
                w = rho * w + snu.sqrt() * normal(&mut r);
            }
            y[[j, t]] = b + w + se.sqrt() * normal(&mut r);
        }
    }
    y
}

#[test]
fn temporal_model_recovers_rho() {
    let truth = FullHyperparameters {
        sigma_e2: 0.02,
        sigma_nu2: 0.1,
        rho1: 0.9,
        rho2: 0.0,
        sigma_w2: 1.0,
        range: 1.0,
    }
    .for_kind(ModelKind::Temporal);
    let locs = vec![[0.0, 0.0]; 20];
    let mut est: Vec<f64> = (0..20)
        .map(|rep| {
            let y = simulate_t(20, 192, &truth, 1000 + rep);
            let model = assemble(ModelKind::Temporal, &y, &locs, None, &[], &opts(0)).unwrap();
            let init = initial_guess(ModelKind::Temporal, &y, 60.0, 12);
            fit_map(&model, &init, &NelderMeadOptions::default())
                .unwrap()
                .theta_hat
                .rho1
                .unwrap()
        })
        .collect();
    est.sort_by(f64::total_cmp);
    let median = 0.5 * (est[9] + est[10]);
    assert!(
        (median - 0.9).abs() <= 0.1,
        "median rho1 {median}, estimates {est:?}"
    );
}
