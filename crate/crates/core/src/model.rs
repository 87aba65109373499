//! The three latent Gaussian models as single linear-Gaussian systems.
//!
//! Latent vector layout: intercepts, then AR chains (chain-major), then
//! space-time field weights (knot-major). Observation rows are farm-major.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use windcast_sparse::{CholeskyFactor, CscMatrix, Ordering, SparseCombination, SymbolicCholesky};

use crate::error::{Error, Result};
use crate::spde::{
    ar1_log_det, ar1_terms, ar1_weights, build_projector, check_rho, fem_matrices, matern_terms,
    matern_weights, tau_from_sigma, KnotGrid, Mesh,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    /// Per-farm intercepts and AR(1) chains.
    #[serde(rename = "T")]
    Temporal,
    /// Shared intercept and a space-time field.
    #[serde(rename = "S-T")]
    SpatioTemporal,
    /// Shared intercept, AR(1) chains and a space-time field.
    #[serde(rename = "ST+T")]
    Combined,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::Temporal,
        ModelKind::SpatioTemporal,
        ModelKind::Combined,
    ];

    pub fn has_chains(self) -> bool {
        matches!(self, ModelKind::Temporal | ModelKind::Combined)
    }

    pub fn has_field(self) -> bool {
        matches!(self, ModelKind::SpatioTemporal | ModelKind::Combined)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Temporal => "T",
            ModelKind::SpatioTemporal => "S-T",
            ModelKind::Combined => "ST+T",
        }
    }

    pub fn n_params(self) -> usize {
        match self {
            ModelKind::Temporal => 3,
            ModelKind::SpatioTemporal => 4,
            ModelKind::Combined => 6,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown model kind {s:?} (expected T, S-T or ST+T)"
                ))
            })
    }
}

/// Hyperparameters; fields outside the model's active set are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    pub sigma_e2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_nu2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_w2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

/// All six values, for building any kind's active subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullHyperparameters {
    pub sigma_e2: f64,
    pub sigma_nu2: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub sigma_w2: f64,
    /// Matérn range in km.
    pub range: f64,
}

impl FullHyperparameters {
    pub fn for_kind(&self, kind: ModelKind) -> Hyperparameters {
        let chains = kind.has_chains();
        let field = kind.has_field();
        Hyperparameters {
            sigma_e2: self.sigma_e2,
            sigma_nu2: chains.then_some(self.sigma_nu2),
            rho1: chains.then_some(self.rho1),
            rho2: field.then_some(self.rho2),
            sigma_w2: field.then_some(self.sigma_w2),
            kappa: field.then_some(8f64.sqrt() / self.range),
        }
    }
}

fn ln_odds(rho: f64) -> f64 {
    ((1.0 + rho) / (1.0 - rho)).ln()
}

fn from_ln_odds(z: f64) -> f64 {
    (z / 2.0).tanh()
}

impl Hyperparameters {
    /// Checks the active set matches `kind` and every value is valid.
    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let chains = kind.has_chains();
        let field = kind.has_field();
        let presence = [
            ("sigma_nu2", self.sigma_nu2.is_some(), chains),
            ("rho1", self.rho1.is_some(), chains),
            ("rho2", self.rho2.is_some(), field),
            ("sigma_w2", self.sigma_w2.is_some(), field),
            ("kappa", self.kappa.is_some(), field),
        ];
        for (name, present, wanted) in presence {
            if present != wanted {
                let what = if wanted { "missing" } else { "not used" };
                return Err(Error::Domain(format!("{name} is {what} for model {kind}")));
            }
        }
        let positive = [
            Some(self.sigma_e2),
            self.sigma_nu2,
            self.sigma_w2,
            self.kappa,
        ];
        if positive
            .iter()
            .flatten()
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return Err(Error::Domain(format!(
                "variances and kappa must be positive and finite: {self:?}"
            )));
        }
        for rho in [self.rho1, self.rho2].into_iter().flatten() {
            check_rho(rho)?;
        }
        Ok(())
    }

    pub fn range(&self) -> Option<f64> {
        self.kappa.map(|k| 8f64.sqrt() / k)
    }

    /// Unconstrained coordinates: log variances, log-odds correlations, log κ.
    ///
    /// T: [σ_e², σ_ν², ρ₁]; S-T: [σ_e², ρ₂, σ_w², κ]; ST+T: all six in that order.
    pub fn to_unconstrained(&self, kind: ModelKind) -> Result<Vec<f64>> {
        self.validate(kind)?;
        let mut v = vec![self.sigma_e2.ln()];
        if kind.has_chains() {
            v.push(self.sigma_nu2.unwrap().ln());
            v.push(ln_odds(self.rho1.unwrap()));
        }
        if kind.has_field() {
            v.push(ln_odds(self.rho2.unwrap()));
            v.push(self.sigma_w2.unwrap().ln());
            v.push(self.kappa.unwrap().ln());
        }
        Ok(v)
    }

    pub fn from_unconstrained(kind: ModelKind, v: &[f64]) -> Result<Self> {
        if v.len() != kind.n_params() {
            return Err(Error::Dimension {
                expected: kind.n_params(),
                found: v.len(),
            });
        }
        let mut it = v.iter().copied();
        let mut next = || it.next().unwrap();
        let sigma_e2 = next().exp();
        let (sigma_nu2, rho1) = if kind.has_chains() {
            (Some(next().exp()), Some(from_ln_odds(next())))
        } else {
            (None, None)
        };
        let (rho2, sigma_w2, kappa) = if kind.has_field() {
            (
                Some(from_ln_odds(next())),
                Some(next().exp()),
                Some(next().exp()),
            )
        } else {
            (None, None, None)
        };
        let theta = Self {
            sigma_e2,
            sigma_nu2,
            rho1,
            rho2,
            sigma_w2,
            kappa,
        };
        theta.validate(kind)?;
        Ok(theta)
    }
}

/// Hyperprior and intercept prior settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSettings {
    /// log-Gamma shape on each log precision and on log κ².
    pub precision_shape: f64,
    /// log-Gamma rate on each log precision and on log κ².
    pub precision_rate: f64,
    /// Standard deviation of the Gaussian prior on log((1+ρ)/(1−ρ)).
    pub correlation_sd: f64,
    pub intercept_variance: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            precision_shape: 1.0,
            precision_rate: 5e-5,
            correlation_sd: 1.0,
            intercept_variance: 100.0,
        }
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Log density of u = log(p) when p ~ Gamma(shape, rate).
pub fn log_gamma_density(u: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + shape * u - rate * u.exp()
}

/// Log hyperprior density with respect to the unconstrained coordinates.
pub fn log_hyperprior(
    theta: &Hyperparameters,
    kind: ModelKind,
    priors: &PriorSettings,
) -> Result<f64> {
    theta.validate(kind)?;
    let (a, b) = (priors.precision_shape, priors.precision_rate);
    let sd = priors.correlation_sd;
    let normal =
        |z: f64| -0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - 0.5 * (z / sd).powi(2);
    let mut lp = log_gamma_density(-theta.sigma_e2.ln(), a, b);
    if kind.has_chains() {
        lp += log_gamma_density(-theta.sigma_nu2.unwrap().ln(), a, b);
        lp += normal(ln_odds(theta.rho1.unwrap()));
    }
    if kind.has_field() {
        lp += normal(ln_odds(theta.rho2.unwrap()));
        lp += log_gamma_density(-theta.sigma_w2.unwrap().ln(), a, b);
        // prior on log κ², expressed in log κ
        lp += log_gamma_density(2.0 * theta.kappa.unwrap().ln(), a, b) + 2f64.ln();
    }
    Ok(lp)
}

/// Block sizes of the stacked latent vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    pub n_intercepts: usize,
    pub n_chains: usize,
    pub chain_len: usize,
    pub n_vertices: usize,
    pub n_knots: usize,
}

impl LatentLayout {
    pub fn chain_offset(&self) -> usize {
        self.n_intercepts
    }

    pub fn field_offset(&self) -> usize {
        self.n_intercepts + self.n_chains * self.chain_len
    }

    pub fn dim(&self) -> usize {
        self.field_offset() + self.n_vertices * self.n_knots
    }

    pub fn intercept(&self, i: usize) -> usize {
        debug_assert!(i < self.n_intercepts);
        i
    }

    pub fn chain(&self, c: usize, t: usize) -> usize {
        debug_assert!(c < self.n_chains && t < self.chain_len);
        self.chain_offset() + c * self.chain_len + t
    }

    pub fn field(&self, knot: usize, vertex: usize) -> usize {
        debug_assert!(knot < self.n_knots && vertex < self.n_vertices);
        self.field_offset() + knot * self.n_vertices + vertex
    }
}

/// A farm whose horizon is predicted: either a training farm (by index)
/// or a new location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Observed(usize),
    New([f64; 2]),
}

/// Inputs shared by all model kinds.
#[derive(Debug, Clone, Copy)]
pub struct AssemblyOptions {
    pub knot_spacing: usize,
    pub horizon: usize,
    pub priors: PriorSettings,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            knot_spacing: 12,
            horizon: 0,
            priors: PriorSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Term {
    Intercept,
    Chain(usize),
    /// (temporal part, spatial part)
    Field(usize, usize),
    Likelihood,
}

#[derive(Debug)]
struct SpatialBlock {
    combination: SparseCombination,
    ordering: Ordering,
    symbolic: OnceLock<Arc<SymbolicCholesky>>,
}

/// One of the three models assembled over a training window, optionally
/// extended over a forecast horizon.
#[derive(Debug)]
pub struct LatentGaussianModel {
    kind: ModelKind,
    layout: LatentLayout,
    priors: PriorSettings,
    obs: CscMatrix,
    y: Vec<f64>,
    aty: Vec<f64>,
    targets: CscMatrix,
    n_target_farms: usize,
    horizon: usize,
    terms: Vec<Term>,
    combination: SparseCombination,
    spatial: Option<SpatialBlock>,
    coords: Vec<Option<[f64; 3]>>,
    symbolic: OnceLock<Arc<SymbolicCholesky>>,
}

/// Transformed observations `y` (farms × L) at `locations`.
pub fn assemble(
    kind: ModelKind,
    y: &Array2<f64>,
    locations: &[[f64; 2]],
    mesh: Option<&Mesh>,
    targets: &[Target],
    opts: &AssemblyOptions,
) -> Result<LatentGaussianModel> {
    let (n_farms, train_len) = y.dim();
    if locations.len() != n_farms {
        return Err(Error::Dimension {
            expected: n_farms,
            found: locations.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("observations must be finite".into()));
    }
    if opts.horizon > 0 && targets.is_empty() {
        return Err(Error::Argument(
            "a forecast horizon needs at least one target".into(),
        ));
    }
    let horizon = if targets.is_empty() { 0 } else { opts.horizon };
    let n_steps = train_len + horizon;
    let mesh = match (kind.has_field(), mesh) {
        (true, None) => return Err(Error::Argument(format!("model {kind} needs a mesh"))),
        (true, Some(m)) => Some(m),
        (false, _) => None,
    };

    // chains: training farms, then new target locations
    let mut chain_of_target = Vec::with_capacity(targets.len());
    let mut target_locs = Vec::with_capacity(targets.len());
    let mut n_new = 0;
    for t in targets {
        match *t {
            Target::Observed(j) if j < n_farms => {
                chain_of_target.push(j);
                target_locs.push(locations[j]);
            }
            Target::Observed(j) => {
                return Err(Error::Dimension {
                    expected: n_farms,
                    found: j + 1,
                })
            }
            Target::New(p) => {
                if kind == ModelKind::Temporal {
                    return Err(Error::Argument(
                        "model T cannot forecast at unobserved locations".into(),
                    ));
                }
                chain_of_target.push(n_farms + n_new);
                target_locs.push(p);
                n_new += 1;
            }
        }
    }

    let knots = if kind.has_field() {
        Some(KnotGrid::covering(n_steps, opts.knot_spacing)?)
    } else {
        None
    };
    let layout = LatentLayout {
        n_intercepts: if kind == ModelKind::Temporal {
            n_farms
        } else {
            1
        },
        n_chains: if kind.has_chains() {
            n_farms + n_new
        } else {
            0
        },
        chain_len: if kind.has_chains() { n_steps } else { 0 },
        n_vertices: mesh.map_or(0, Mesh::n_vertices),
        n_knots: knots.map_or(0, |k| k.n_knots),
    };
    let dim = layout.dim();

    let (obs_field, target_field) = match (mesh, knots) {
        (Some(m), Some(k)) => {
            let kt = k.times();
            let obs_times: Vec<f64> = (0..train_len).map(|t| t as f64).collect();
            let tgt_times: Vec<f64> = (train_len..n_steps).map(|t| t as f64).collect();
            let a = build_projector(m, locations, &kt, &obs_times)?.into_matrix();
            let b = build_projector(m, &target_locs, &kt, &tgt_times)?.into_matrix();
            (Some(a.transpose()), Some(b.transpose()))
        }
        _ => (None, None),
    };

    // rows assembled as transposed columns: each row is a column of Aᵀ
    let row_entries =
        |field_t: Option<&CscMatrix>, row: usize, intercept: usize, chain: Option<usize>| {
            let mut e = vec![(layout.intercept(intercept), 1.0)];
            if let Some(c) = chain {
                e.push((c, 1.0));
            }
            if let Some(ft) = field_t {
                let (rows, vals) = ft.col(row);
                e.extend(
                    rows.iter()
                        .zip(vals)
                        .map(|(&r, &v)| (layout.field_offset() + r, v)),
                );
            }
            e
        };
    let mut trip = Vec::new();
    let mut yv = Vec::with_capacity(n_farms * train_len);
    for j in 0..n_farms {
        for t in 0..train_len {
            let row = j * train_len + t;
            let intercept = if kind == ModelKind::Temporal { j } else { 0 };
            let chain = kind.has_chains().then(|| layout.chain(j, t));
            for (c, v) in row_entries(obs_field.as_ref(), row, intercept, chain) {
                trip.push((row, c, v));
            }
            yv.push(y[[j, t]]);
        }
    }
    let obs = CscMatrix::from_triplets(n_farms * train_len, dim, &trip)?;
    let mut trip = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        for h in 0..horizon {
            let row = i * horizon + h;
            let intercept = match (kind, t) {
                (ModelKind::Temporal, Target::Observed(j)) => *j,
                _ => 0,
            };
            let chain = kind
                .has_chains()
                .then(|| layout.chain(chain_of_target[i], train_len + h));
            for (c, v) in row_entries(target_field.as_ref(), row, intercept, chain) {
                trip.push((row, c, v));
            }
        }
    }
    let target_matrix = CscMatrix::from_triplets(targets.len() * horizon, dim, &trip)?;

    // precision terms
    let mut terms = Vec::new();
    let mut mats = Vec::new();
    terms.push(Term::Intercept);
    mats.push(CscMatrix::identity(layout.n_intercepts).embed(dim, dim, 0, 0));
    if kind.has_chains() {
        let block = CscMatrix::identity(layout.n_chains);
        for (p, m) in ar1_terms(layout.chain_len).iter().enumerate() {
            terms.push(Term::Chain(p));
            let off = layout.chain_offset();
            let size = layout.n_chains * layout.chain_len;
            mats.push(block.kron(m).embed(dim, dim, off, off));
            debug_assert_eq!(block.kron(m).nrows(), size);
        }
    }
    let mut spatial = None;
    let mut time_scale = 1.0;
    if let Some(m) = mesh {
        let fem = fem_matrices(m);
        let space = matern_terms(&fem);
        let time = ar1_terms(layout.n_knots);
        let off = layout.field_offset();
        for (a, mt) in time.iter().enumerate() {
            for (b, ms) in space.iter().enumerate() {
                terms.push(Term::Field(a, b));
                mats.push(mt.kron(ms).embed(dim, dim, off, off));
            }
        }
        let mean_edge = {
            let e = m.edges();
            e.iter().map(|&x| m.edge_length(x)).sum::<f64>() / e.len() as f64
        };
        time_scale = mean_edge / opts.knot_spacing as f64;
        let vcoords = m
            .vertices()
            .iter()
            .map(|v| Some([v[0], v[1], 0.0]))
            .collect();
        spatial = Some(SpatialBlock {
            combination: SparseCombination::new(&space.iter().collect::<Vec<_>>())?,
            ordering: Ordering::NestedDissection(vcoords),
            symbolic: OnceLock::new(),
        });
    }
    let ata = obs.transpose().matmul(&obs)?;
    terms.push(Term::Likelihood);
    mats.push(ata);
    let combination = SparseCombination::new(&mats.iter().collect::<Vec<_>>())?;

    let mut coords = vec![None; dim];
    if kind.has_chains() {
        let all_locs: Vec<[f64; 2]> = locations
            .iter()
            .copied()
            .chain(targets.iter().filter_map(|t| match t {
                Target::New(p) => Some(*p),
                Target::Observed(_) => None,
            }))
            .collect();
        for (c, p) in all_locs.iter().enumerate() {
            for t in 0..layout.chain_len {
                coords[layout.chain(c, t)] = Some([p[0], p[1], t as f64 * time_scale]);
            }
        }
    }
    if let (Some(m), Some(k)) = (mesh, knots) {
        for (knot, kt) in k.times().iter().enumerate() {
            for (v, p) in m.vertices().iter().enumerate() {
                coords[layout.field(knot, v)] = Some([p[0], p[1], kt * time_scale]);
            }
        }
    }

    let aty = obs.mul_transpose_vec(&yv);
    Ok(LatentGaussianModel {
        kind,
        layout,
        priors: opts.priors,
        obs,
        y: yv,
        aty,
        targets: target_matrix,
        n_target_farms: targets.len(),
        horizon,
        terms,
        combination,
        spatial,
        coords,
        symbolic: OnceLock::new(),
    })
}

/// Model T on a transformed window.
pub fn assemble_t(
    y: &Array2<f64>,
    locations: &[[f64; 2]],
    targets: &[Target],
    opts: &AssemblyOptions,
) -> Result<LatentGaussianModel> {
    if y.ncols() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: y.ncols(),
        });
    }
    assemble(ModelKind::Temporal, y, locations, None, targets, opts)
}

pub fn assemble_st(
    y: &Array2<f64>,
    locations: &[[f64; 2]],
    mesh: &Mesh,
    targets: &[Target],
    opts: &AssemblyOptions,
) -> Result<LatentGaussianModel> {
    assemble(
        ModelKind::SpatioTemporal,
        y,
        locations,
        Some(mesh),
        targets,
        opts,
    )
}

pub fn assemble_stt(
    y: &Array2<f64>,
    locations: &[[f64; 2]],
    mesh: &Mesh,
    targets: &[Target],
    opts: &AssemblyOptions,
) -> Result<LatentGaussianModel> {
    assemble(ModelKind::Combined, y, locations, Some(mesh), targets, opts)
}

impl LatentGaussianModel {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn priors(&self) -> &PriorSettings {
        &self.priors
    }

    /// Observation projector, rows farm-major.
    pub fn projector(&self) -> &CscMatrix {
        &self.obs
    }

    pub fn observations(&self) -> &[f64] {
        &self.y
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    /// Aᵀy.
    pub fn projected_observations(&self) -> &[f64] {
        &self.aty
    }

    /// Rows for (target, lead time), target-major.
    pub fn target_projector(&self) -> &CscMatrix {
        &self.targets
    }

    pub fn n_targets(&self) -> usize {
        self.n_target_farms
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn weights(&self, theta: &Hyperparameters, likelihood: bool) -> Result<Vec<f64>> {
        theta.validate(self.kind)?;
        let chain_w = theta.rho1.map(|r| ar1_weights(r, theta.sigma_nu2.unwrap()));
        let (time_w, space_w) = match (theta.rho2, theta.kappa) {
            (Some(r), Some(k)) => (
                Some(ar1_weights(r, 1.0)),
                Some(matern_weights(
                    k,
                    tau_from_sigma(theta.sigma_w2.unwrap(), k),
                )),
            ),
            _ => (None, None),
        };
        Ok(self
            .terms
            .iter()
            .map(|t| match *t {
                Term::Intercept => 1.0 / self.priors.intercept_variance,
                Term::Chain(p) => chain_w.unwrap()[p],
                Term::Field(a, b) => time_w.unwrap()[a] * space_w.unwrap()[b],
                Term::Likelihood => {
                    if likelihood {
                        1.0 / theta.sigma_e2
                    } else {
                        0.0
                    }
                }
            })
            .collect())
    }

    /// Joint prior precision, on the posterior's sparsity pattern.
    pub fn prior_precision(&self, theta: &Hyperparameters) -> Result<CscMatrix> {
        Ok(self.combination.evaluate(&self.weights(theta, false)?))
    }

    /// Q_prior + AᵀA/σ_e².
    pub fn posterior_precision(&self, theta: &Hyperparameters) -> Result<CscMatrix> {
        Ok(self.combination.evaluate(&self.weights(theta, true)?))
    }

    /// Fill-reducing ordering inputs: one point per latent unknown.
    pub fn ordering(&self) -> Ordering {
        Ordering::NestedDissection(self.coords.clone())
    }

    /// Symbolic factorization of the posterior pattern, computed once.
    pub fn symbolic(&self) -> Result<Arc<SymbolicCholesky>> {
        if let Some(s) = self.symbolic.get() {
            return Ok(s.clone());
        }
        let s = Arc::new(SymbolicCholesky::analyze(
            self.combination.pattern(),
            &self.ordering(),
        )?);
        Ok(self.symbolic.get_or_init(|| s).clone())
    }

    /// log det of the spatial Matérn precision, or `None` without a field.
    fn spatial_log_det(&self, theta: &Hyperparameters) -> Result<Option<f64>> {
        let Some(sp) = &self.spatial else {
            return Ok(None);
        };
        let kappa = theta.kappa.unwrap();
        let q = sp.combination.evaluate(&matern_weights(
            kappa,
            tau_from_sigma(theta.sigma_w2.unwrap(), kappa),
        ));
        let sym = match sp.symbolic.get() {
            Some(s) => s.clone(),
            None => {
                let s = Arc::new(SymbolicCholesky::analyze(
                    sp.combination.pattern(),
                    &sp.ordering,
                )?);
                sp.symbolic.get_or_init(|| s).clone()
            }
        };
        let f = sym.factorize(&q).map_err(|e| Error::IllConditioned {
            kappa,
            detail: e.to_string(),
        })?;
        Ok(Some(f.log_det()))
    }

    /// log det Q_prior from the block structure.
    pub fn prior_log_det(&self, theta: &Hyperparameters) -> Result<f64> {
        theta.validate(self.kind)?;
        let l = &self.layout;
        let mut ld = -(l.n_intercepts as f64) * self.priors.intercept_variance.ln();
        if self.kind.has_chains() {
            ld += l.n_chains as f64
                * ar1_log_det(l.chain_len, theta.rho1.unwrap(), theta.sigma_nu2.unwrap());
        }
        if let Some(lds) = self.spatial_log_det(theta)? {
            ld += l.n_vertices as f64 * ar1_log_det(l.n_knots, theta.rho2.unwrap(), 1.0)
                + l.n_knots as f64 * lds;
        }
        Ok(ld)
    }

    /// Sparse Cholesky of the prior precision on the posterior pattern.
    pub fn factor_prior(&self, theta: &Hyperparameters) -> Result<CholeskyFactor> {
        Ok(self.symbolic()?.factorize(&self.prior_precision(theta)?)?)
    }
}
