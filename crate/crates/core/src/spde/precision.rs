//! Sparse precision matrices for the spatial, temporal and space-time priors.
//!
//! Each precision is a fixed linear combination of parameter-free matrices,
//! so that models can keep one sparsity pattern across parameter values.

use windcast_sparse::{CholeskyFactor, CscMatrix, Ordering};

use super::fem::FemMatrices;
use crate::error::{Error, Result};

/// τ such that the field has marginal variance σ² (smoothness one, 2-D).
pub fn tau_from_sigma(sigma_w2: f64, kappa: f64) -> f64 {
    1.0 / (4.0 * std::f64::consts::PI * kappa * kappa * sigma_w2).sqrt()
}

/// Term weights for [C, G, G C⁻¹ G]: τ²·(κ⁴, 2κ², 1).
pub fn matern_weights(kappa: f64, tau: f64) -> [f64; 3] {
    let t2 = tau * tau;
    let k2 = kappa * kappa;
    [t2 * k2 * k2, t2 * 2.0 * k2, t2]
}

pub fn matern_terms(fem: &FemMatrices) -> [CscMatrix; 3] {
    [
        fem.mass_matrix(),
        fem.stiffness.clone(),
        fem.stiffness2.clone(),
    ]
}

/// τ²(κ⁴C + 2κ²G + G C⁻¹ G).
pub fn spatial_precision(fem: &FemMatrices, kappa: f64, tau: f64) -> Result<CscMatrix> {
    if !(kappa > 0.0 && tau > 0.0) || !kappa.is_finite() || !tau.is_finite() {
        return Err(Error::Domain(format!(
            "kappa {kappa} and tau {tau} must be positive"
        )));
    }
    let [c, g, g2] = matern_terms(fem);
    let [wc, wg, wg2] = matern_weights(kappa, tau);
    let q = c.scaled(wc).add(1.0, &g, wg)?.add(1.0, &g2, wg2)?;
    CholeskyFactor::new(&q, &Ordering::ReverseCuthillMckee).map_err(|e| Error::IllConditioned {
        kappa,
        detail: format!(
            "{e}; {} vertices, smallest mass {:e}",
            fem.mass.len(),
            min_of(&fem.mass)
        ),
    })?;
    Ok(q)
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Parameter-free parts of a stationary AR(1) chain of length `n`:
/// identity, interior indicator (neighbour count minus one) and the
/// adjacent-pair pattern.
pub fn ar1_terms(n: usize) -> [CscMatrix; 3] {
    let interior: Vec<f64> = (0..n)
        .map(|i| {
            let neighbours = usize::from(i > 0) + usize::from(i + 1 < n);
            neighbours as f64 - 1.0
        })
        .collect();
    let mut off = Vec::with_capacity(2 * n.saturating_sub(1));
    for i in 1..n {
        off.push((i - 1, i, 1.0));
        off.push((i, i - 1, 1.0));
    }
    [
        CscMatrix::identity(n),
        CscMatrix::from_diagonal(&interior),
        CscMatrix::from_triplets(n, n, &off).expect("indices in range"),
    ]
}

/// Weights for [`ar1_terms`]: (1, ρ², −ρ)/σ².
pub fn ar1_weights(rho: f64, innovation_var: f64) -> [f64; 3] {
    [
        1.0 / innovation_var,
        rho * rho / innovation_var,
        -rho / innovation_var,
    ]
}

/// log det of the stationary AR(1) precision: ln(1−ρ²) − n ln σ².
pub fn ar1_log_det(n: usize, rho: f64, innovation_var: f64) -> f64 {
    (1.0 - rho * rho).ln() - n as f64 * innovation_var.ln()
}

pub fn check_rho(rho: f64) -> Result<()> {
    if rho.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::Nonstationary(rho.abs()))
    }
}

pub fn ar1_precision(n: usize, rho: f64, innovation_var: f64) -> Result<CscMatrix> {
    check_rho(rho)?;
    if n == 0 || !(innovation_var > 0.0) {
        return Err(Error::Domain(format!(
            "AR(1) needs n >= 1 and positive variance (n = {n})"
        )));
    }
    let [i, d, o] = ar1_terms(n);
    let [wi, wd, wo] = ar1_weights(rho, innovation_var);
    Ok(i.scaled(wi).add(1.0, &d, wd)?.add(1.0, &o, wo)?)
}

/// Q_time ⊗ Q_space: time-major stacking, all vertices of knot 0 first.
pub fn spacetime_precision(q_space: &CscMatrix, q_time: &CscMatrix) -> CscMatrix {
    q_time.kron(q_space)
}
