//! Exact conditioning, hyperparameter fitting and predictive sampling.

use nalgebra::{DMatrix, DVector};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use windcast_sparse::{CholeskyFactor, CscMatrix};

use crate::error::{Error, Result};
use crate::model::{log_hyperprior, Hyperparameters, LatentGaussianModel, ModelKind};
use crate::optim::{minimize, NelderMeadOptions};
use crate::par::{self, derive_seed, Parallelism};
use crate::transform::inv_logit;

/// Largest latent dimension the dense oracle accepts.
pub const DENSE_ORACLE_MAX_DIM: usize = 200;
/// Samples drawn per backward-substitution block.
const SAMPLE_BLOCK: usize = 50;

/// Posterior and log evidence for an explicit prior precision `q_prior`,
/// projector `a`, data `y` and noise variance.
pub fn condition_linear(
    q_prior: &CscMatrix,
    a: &CscMatrix,
    y: &[f64],
    sigma_e2: f64,
) -> Result<(SparseGaussianPosterior, f64)> {
    if a.ncols() != q_prior.ncols() || a.nrows() != y.len() {
        return Err(Error::Dimension {
            expected: q_prior.ncols(),
            found: a.ncols(),
        });
    }
    let ordering = windcast_sparse::Ordering::ReverseCuthillMckee;
    let prior = CholeskyFactor::new(q_prior, &ordering)?;
    let precision = q_prior.add(1.0, &a.transpose().matmul(a)?, 1.0 / sigma_e2)?;
    let factor = CholeskyFactor::new(&precision, &ordering)?;
    let b: Vec<f64> = a
        .mul_transpose_vec(y)
        .iter()
        .map(|v| v / sigma_e2)
        .collect();
    let mean = factor.solve(&b);
    let yty: f64 = y.iter().map(|v| v * v).sum();
    let mb: f64 = mean.iter().zip(&b).map(|(m, b)| m * b).sum();
    let log_evidence = 0.5 * prior.log_det()
        - 0.5 * factor.log_det()
        - 0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI * sigma_e2).ln()
        - 0.5 * (yty / sigma_e2 - mb);
    Ok((
        SparseGaussianPosterior {
            mean,
            precision,
            factor,
        },
        log_evidence,
    ))
}

/// Gaussian posterior of the latent vector given θ.
#[derive(Debug)]
pub struct SparseGaussianPosterior {
    pub mean: Vec<f64>,
    pub precision: CscMatrix,
    factor: CholeskyFactor,
}

impl SparseGaussianPosterior {
    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Var(aᵀx) = aᵀ Q⁻¹ a.
    pub fn linear_variance(&self, a: &[f64]) -> f64 {
        self.factor.solve_l(a).iter().map(|v| v * v).sum()
    }

    /// Diagonal of Q⁻¹ by one solve per unknown; for small models.
    pub fn marginal_variances(&self) -> Vec<f64> {
        let n = self.dim();
        let mut e = vec![0.0; n];
        (0..n)
            .map(|i| {
                e[i] = 1.0;
                let v = self.linear_variance(&e);
                e[i] = 0.0;
                v
            })
            .collect()
    }
}

fn conditioning_error(theta: &Hyperparameters, source: windcast_sparse::SparseError) -> Error {
    Error::Conditioning {
        theta: format!("{theta:?}"),
        source,
    }
}

pub fn condition(
    model: &LatentGaussianModel,
    theta: &Hyperparameters,
) -> Result<SparseGaussianPosterior> {
    let precision = model.posterior_precision(theta)?;
    let factor = model
        .symbolic()?
        .factorize(&precision)
        .map_err(|e| conditioning_error(theta, e))?;
    let b: Vec<f64> = model
        .projected_observations()
        .iter()
        .map(|v| v / theta.sigma_e2)
        .collect();
    let mean = factor.solve(&b);
    Ok(SparseGaussianPosterior {
        mean,
        precision,
        factor,
    })
}

/// log p(y | θ).
pub fn log_evidence(model: &LatentGaussianModel, theta: &Hyperparameters) -> Result<f64> {
    let post = condition(model, theta)?;
    let prior_ld = model.prior_log_det(theta)?;
    let s2 = theta.sigma_e2;
    let n = model.n_obs() as f64;
    let yty: f64 = model.observations().iter().map(|v| v * v).sum();
    let mb: f64 = post
        .mean
        .iter()
        .zip(model.projected_observations())
        .map(|(m, b)| m * b)
        .sum::<f64>()
        / s2;
    Ok(0.5 * prior_ld
        - 0.5 * post.factor.log_det()
        - 0.5 * n * (2.0 * std::f64::consts::PI * s2).ln()
        - 0.5 * (yty / s2 - mb))
}

/// log p(y | θ) + log p(θ).
pub fn log_marginal_posterior(model: &LatentGaussianModel, theta: &Hyperparameters) -> Result<f64> {
    Ok(log_evidence(model, theta)? + log_hyperprior(theta, model.kind(), model.priors())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitResult {
    pub kind: ModelKind,
    pub theta_hat: Hyperparameters,
    /// Derived from κ̂ for field models (km).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_hat: Option<f64>,
    pub log_posterior_at_mode: f64,
    pub log_posterior_at_init: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: FitResult = serde_json::from_str(s)?;
        r.theta_hat.validate(r.kind)?;
        Ok(r)
    }
}

/// MAP hyperparameters by Nelder–Mead over the unconstrained coordinates.
pub fn fit_map(
    model: &LatentGaussianModel,
    theta_init: &Hyperparameters,
    opts: &NelderMeadOptions,
) -> Result<FitResult> {
    let kind = model.kind();
    let x0 = theta_init.to_unconstrained(kind)?;
    let init = log_marginal_posterior(model, theta_init)?;
    if !init.is_finite() {
        return Err(Error::Domain(format!(
            "log posterior is not finite at the initial value {theta_init:?}"
        )));
    }
    let objective = |u: &[f64]| {
        Hyperparameters::from_unconstrained(kind, u)
            .and_then(|t| log_marginal_posterior(model, &t))
            .map_or(f64::INFINITY, |v| -v)
    };
    let r = minimize(objective, &x0, opts);
    let theta_hat = Hyperparameters::from_unconstrained(kind, &r.x)?;
    if !r.converged {
        log::warn!(
            "{kind} fit stopped after {} iterations without meeting the tolerance",
            r.iterations
        );
    }
    Ok(FitResult {
        kind,
        theta_hat,
        range_hat: theta_hat.range(),
        log_posterior_at_mode: -r.value,
        log_posterior_at_init: init,
        iterations: r.iterations,
        evaluations: r.evaluations,
        converged: r.converged,
        seed: None,
    })
}

/// Joint predictive draws indexed (sample, target farm, lead time).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCube {
    pub samples: Array3<f64>,
    pub lead_times: Vec<usize>,
    pub kind: ModelKind,
    pub theta: Hyperparameters,
}

impl SampleCube {
    pub fn n_samples(&self) -> usize {
        self.samples.dim().0
    }

    pub fn n_farms(&self) -> usize {
        self.samples.dim().1
    }

    pub fn horizon(&self) -> usize {
        self.samples.dim().2
    }
}

/// Predictive mean and variance of each target cell on the transformed
/// scale, observation noise included. Rows are target-major.
pub fn predictive_moments(
    model: &LatentGaussianModel,
    theta: &Hyperparameters,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let post = condition(model, theta)?;
    let at = model.target_projector().transpose();
    let dim = model.dim();
    let mut a = vec![0.0; dim];
    let mut means = Vec::with_capacity(at.ncols());
    let mut vars = Vec::with_capacity(at.ncols());
    for r in 0..at.ncols() {
        let (idx, vals) = at.col(r);
        let mut m = 0.0;
        for (&i, &v) in idx.iter().zip(vals) {
            a[i] = v;
            m += v * post.mean[i];
        }
        means.push(m);
        vars.push(post.linear_variance(&a) + theta.sigma_e2);
        for &i in idx {
            a[i] = 0.0;
        }
    }
    Ok((means, vars))
}

/// Transformed-scale joint draws, (sample, target, lead time).
pub fn predictive_transformed(
    model: &LatentGaussianModel,
    theta: &Hyperparameters,
    n_samples: usize,
    seed: u64,
    par: Parallelism,
) -> Result<Array3<f64>> {
    if n_samples < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 samples, got {n_samples}"
        )));
    }
    if model.horizon() == 0 {
        return Err(Error::Argument(
            "model was assembled without a forecast horizon".into(),
        ));
    }
    let post = condition(model, theta)?;
    let at = model.target_projector().transpose();
    let (n_targets, horizon) = (model.n_targets(), model.horizon());
    let rows = n_targets * horizon;
    let dim = model.dim();
    let sd_e = theta.sigma_e2.sqrt();
    let n_blocks = n_samples.div_ceil(SAMPLE_BLOCK);
    let blocks = par::map_range(par, n_blocks, |b| {
        let count = SAMPLE_BLOCK.min(n_samples - b * SAMPLE_BLOCK);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b as u64]));
        let mut z: Vec<f64> = (0..dim * count)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        post.factor.sample_transform_block(&mut z, count);
        let mut out = vec![0.0; count * rows];
        for s in 0..count {
            let x = &z[s * dim..(s + 1) * dim];
            for r in 0..rows {
                let (idx, vals) = at.col(r);
                let eta: f64 = idx
                    .iter()
                    .zip(vals)
                    .map(|(&i, &v)| v * (post.mean[i] + x[i]))
                    .sum();
                let noise: f64 = StandardNormal.sample(&mut rng);
                out[s * rows + r] = eta + sd_e * noise;
            }
        }
        out
    });
    let flat: Vec<f64> = blocks.into_iter().flatten().collect();
    Ok(Array3::from_shape_vec((n_samples, n_targets, horizon), flat).expect("block sizes add up"))
}

/// Power-scale joint draws for every target and lead time.
pub fn predictive_samples(
    model: &LatentGaussianModel,
    theta: &Hyperparameters,
    n_samples: usize,
    seed: u64,
    par: Parallelism,
) -> Result<SampleCube> {
    let samples = predictive_transformed(model, theta, n_samples, seed, par)?.mapv(inv_logit);
    Ok(SampleCube {
        samples,
        lead_times: (1..=model.horizon()).collect(),
        kind: model.kind(),
        theta: *theta,
    })
}

/// Dense posterior computed in covariance form, for equivalence tests.
#[derive(Debug, Clone)]
pub struct DenseGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub log_evidence: f64,
}

/// Posterior via the prior covariance and the marginal covariance of y:
/// m = Σ Aᵀ S⁻¹ y, P = Σ − Σ Aᵀ S⁻¹ A Σ with S = A Σ Aᵀ + σ_e² I.
pub fn dense_oracle(model: &LatentGaussianModel, theta: &Hyperparameters) -> Result<DenseGaussian> {
    let n = model.dim();
    if n > DENSE_ORACLE_MAX_DIM {
        return Err(Error::Argument(format!(
            "dense oracle refuses latent dimension {n} > {DENSE_ORACLE_MAX_DIM}"
        )));
    }
    let to_dense = |m: &CscMatrix| DMatrix::from_row_slice(m.nrows(), m.ncols(), &m.to_dense());
    let q = to_dense(&model.prior_precision(theta)?);
    let sigma = q
        .try_inverse()
        .ok_or_else(|| Error::Domain("prior precision is singular".into()))?;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let n_obs = model.n_obs();
    if n_obs == 0 {
        return Ok(DenseGaussian {
            mean: DVector::zeros(n),
            covariance: sigma,
            log_evidence: 0.0,
        });
    }
    let a = to_dense(model.projector());
    let y = DVector::from_column_slice(model.observations());
    let sa = &sigma * a.transpose();
    let s = &a * &sa + DMatrix::identity(n_obs, n_obs) * theta.sigma_e2;
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Domain("marginal covariance not positive definite".into()))?;
    let s_inv_y = chol.solve(&y);
    let mean = &sa * &s_inv_y;
    let covariance = &sigma - &sa * chol.solve(&sa.transpose());
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_evidence =
        -0.5 * (n_obs as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + y.dot(&s_inv_y));
    Ok(DenseGaussian {
        mean,
        covariance,
        log_evidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assemble_t, AssemblyOptions, PriorSettings, Target};
    use ndarray::Array2;

    /// One farm, one step: the intercept carries the whole prior.
    fn scalar_model(y: f64, intercept_variance: f64) -> LatentGaussianModel {
        let opts = AssemblyOptions {
            priors: PriorSettings {
                intercept_variance,
                ..Default::default()
            },
            ..Default::default()
        };
        let yy = Array2::from_elem((1, 2), y);
        assemble_t(&yy, &[[0.0, 0.0]], &[], &opts).unwrap()
    }

    #[test]
    fn conjugate_scalar_case() {
        let q = CscMatrix::identity(1);
        let a = CscMatrix::identity(1);
        let (post, ev) = condition_linear(&q, &a, &[2.0], 1.0).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-15);
        assert!((post.marginal_variances()[0] - 0.5).abs() < 1e-15);
        // y ~ N(0, 2)
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - 4.0 / 4.0;
        assert!((ev - expected).abs() < 1e-14);
    }

    #[test]
    fn no_observations_gives_prior() {
        let q = CscMatrix::from_diagonal(&[2.0, 4.0]);
        let a = CscMatrix::zeros(0, 2);
        let (post, ev) = condition_linear(&q, &a, &[], 0.3).unwrap();
        assert_eq!(post.mean, vec![0.0, 0.0]);
        let v = post.marginal_variances();
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 0.25).abs() < 1e-15);
        assert!(ev.abs() < 1e-14);
    }

    #[test]
    fn dense_oracle_refuses_large_models() {
        let y = Array2::zeros((3, 100));
        let m = assemble_t(&y, &[[0.0, 0.0]; 3], &[], &AssemblyOptions::default()).unwrap();
        let theta = Hyperparameters {
            sigma_e2: 1.0,
            sigma_nu2: Some(1.0),
            rho1: Some(0.0),
            rho2: None,
            sigma_w2: None,
            kappa: None,
        };
        assert!(matches!(dense_oracle(&m, &theta), Err(Error::Argument(_))));
    }

    #[test]
    fn huge_noise_returns_prior() {
        let m = scalar_model(2.0, 1.0);
        let theta = Hyperparameters {
            sigma_e2: 1e12,
            sigma_nu2: Some(1.0),
            rho1: Some(0.3),
            rho2: None,
            sigma_w2: None,
            kappa: None,
        };
        let post = condition(&m, &theta).unwrap();
        assert!(post.mean.iter().all(|v| v.abs() < 1e-10));
        let var = post.marginal_variances();
        assert!((var[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fit_result_json_round_trip() {
        let r = FitResult {
            kind: ModelKind::Temporal,
            theta_hat: Hyperparameters {
                sigma_e2: 0.01,
                sigma_nu2: Some(0.1),
                rho1: Some(0.9),
                rho2: None,
                sigma_w2: None,
                kappa: None,
            },
            range_hat: None,
            log_posterior_at_mode: -12.5,
            log_posterior_at_init: -20.0,
            iterations: 31,
            evaluations: 60,
            converged: true,
            seed: Some(42),
        };
        let s = r.to_json().unwrap();
        assert!(s.contains("\"kind\": \"T\"") && s.contains("\"rho1\"") && !s.contains("kappa"));
        assert_eq!(FitResult::from_json(&s).unwrap(), r);
    }

    #[test]
    fn sample_count_validated() {
        let m = scalar_model(0.0, 1.0);
        let theta = Hyperparameters {
            sigma_e2: 1.0,
            sigma_nu2: Some(1.0),
            rho1: Some(0.0),
            rho2: None,
            sigma_w2: None,
            kappa: None,
        };
        assert!(predictive_samples(&m, &theta, 1, 0, Parallelism::Sequential).is_err());
        let y = Array2::zeros((1, 3));
        let opts = AssemblyOptions {
            horizon: 2,
            ..Default::default()
        };
        let m = assemble_t(&y, &[[0.0, 0.0]], &[Target::Observed(0)], &opts).unwrap();
        let c = predictive_samples(&m, &theta, 3, 0, Parallelism::Sequential).unwrap();
        assert_eq!(c.samples.dim(), (3, 1, 2));
        assert_eq!(c.lead_times, vec![1, 2]);
    }
}
