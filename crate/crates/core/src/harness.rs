//! Experiment orchestration: rolling-window evaluation, spatial
//! cross-validation and the simulation study.
//!
//! Every (window or fold, model) pair is an independent unit with its own
//! seed; units run through [`par::map`] and are merged in a fixed order, so
//! reports do not depend on the execution mode.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{DateTime, TimeDelta, Utc};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use windcast_sparse::{CholeskyFactor, Ordering};

use crate::data::{filter_farms, make_windows, Farm, Portfolio, Window};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_truth, default_levels, empirical_quantile, score_aggregated, score_individual,
    BarSettings, ReliabilityDiagram, Scope, ScoreTable, Scores, HIGHLIGHT_LEAD_TIMES,
};
use crate::inference::{fit_map, predictive_samples, FitResult};
use crate::model::{
    assemble, AssemblyOptions, FullHyperparameters, Hyperparameters, ModelKind, PriorSettings,
    Target,
};
use crate::optim::NelderMeadOptions;
use crate::par::{self, derive_seed, Parallelism};
use crate::spde::{
    build_mesh, build_projector, fem_matrices, spatial_precision, tau_from_sigma, KnotGrid, Mesh,
    MeshParams,
};
use crate::transform::{inv_logit, TransformedSeries};

/// First element of every derived seed path.
pub mod stream {
    pub const SAMPLES: u64 = 1;
    pub const BARS: u64 = 2;
    pub const SIMULATION: u64 = 3;
    pub const LOCATIONS: u64 = 4;
    pub const FOLDS: u64 = 5;
}

/// Mesh controls derived from a prior range guess.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshSettings {
    /// Prior guess of the Matérn range (km); also seeds κ in initial values.
    pub prior_range: f64,
    pub extension_factor: f64,
    /// Defaults to a third of `prior_range`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_edge_inner: Option<f64>,
    /// Defaults to three times the inner edge.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_edge_outer: Option<f64>,
}

impl Default for MeshSettings {
    fn default() -> Self {
        Self {
            prior_range: 62.1,
            extension_factor: 0.3,
            max_edge_inner: None,
            max_edge_outer: None,
        }
    }
}

impl MeshSettings {
    pub fn params(&self) -> MeshParams {
        let mut p = MeshParams::new(
            self.max_edge_inner.unwrap_or(self.prior_range / 3.0),
            self.extension_factor,
        );
        if let Some(outer) = self.max_edge_outer {
            p.max_edge_outer = outer;
        }
        p
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldAssignment {
    /// Seeded uniform shuffle dealt round-robin.
    #[default]
    Random,
    /// Contiguous blocks along the longer extent of the locations.
    SpatialBlocks,
}

/// Generating values for simulated portfolios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationTruth {
    pub theta: FullHyperparameters,
    pub intercept: f64,
}

impl Default for SimulationTruth {
    fn default() -> Self {
        Self {
            theta: FullHyperparameters {
                sigma_e2: 0.01,
                sigma_nu2: 0.1,
                rho1: 0.9,
                rho2: 0.7,
                sigma_w2: 1.0,
                range: 62.1,
            },
            intercept: -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSettings {
    pub n_datasets: usize,
    pub n_farms: usize,
    /// Width and height of the rectangle farms are drawn in (km).
    pub domain_km: [f64; 2],
    /// Spatial cross-validation runs on the first this many datasets.
    pub cv_datasets: usize,
    pub truth: SimulationTruth,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            n_datasets: 20,
            n_farms: 50,
            domain_km: [150.0, 250.0],
            cv_datasets: 20,
            truth: SimulationTruth::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub models: Vec<ModelKind>,
    pub train_len: usize,
    pub horizon: usize,
    pub stride: usize,
    pub knot_spacing: usize,
    pub n_samples: usize,
    pub cv_folds: usize,
    pub fold_assignment: FoldAssignment,
    pub master_seed: u64,
    pub epsilon: f64,
    pub max_zero_fraction: f64,
    pub mesh: MeshSettings,
    pub priors: PriorSettings,
    pub optimizer: NelderMeadOptions,
    pub bars: BarSettings,
    pub parallelism: Parallelism,
    pub simulation: SimulationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            models: ModelKind::ALL.to_vec(),
            train_len: 192,
            horizon: 20,
            stride: 192,
            knot_spacing: 12,
            n_samples: 1000,
            cv_folds: 5,
            fold_assignment: FoldAssignment::Random,
            master_seed: 20_140_101,
            epsilon: 1e-3,
            max_zero_fraction: 1.0,
            mesh: MeshSettings::default(),
            priors: PriorSettings::default(),
            optimizer: NelderMeadOptions::default(),
            bars: BarSettings::default(),
            parallelism: Parallelism::default(),
            simulation: SimulationSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.models.is_empty() {
            return bad("no model kinds selected".into());
        }
        for (i, k) in self.models.iter().enumerate() {
            if self.models[..i].contains(k) {
                return bad(format!("model kind {k} listed twice"));
            }
        }
        if self.train_len < 2 || self.horizon < 1 || self.stride < 1 || self.knot_spacing < 1 {
            return bad("need train_len >= 2, horizon >= 1, stride >= 1, knot_spacing >= 1".into());
        }
        if self.n_samples < 2 {
            return bad(format!(
                "n_samples must be at least 2, got {}",
                self.n_samples
            ));
        }
        if self.cv_folds < 2 {
            return bad(format!(
                "cv_folds must be at least 2, got {}",
                self.cv_folds
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return bad(format!("epsilon {} outside (0, 0.5)", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.max_zero_fraction) {
            return bad(format!(
                "max_zero_fraction {} outside [0, 1]",
                self.max_zero_fraction
            ));
        }
        if !(self.mesh.prior_range > 0.0 && self.mesh.prior_range.is_finite()) {
            return bad(format!(
                "prior_range {} must be positive",
                self.mesh.prior_range
            ));
        }
        if !(self.bars.band > 0.0 && self.bars.band < 1.0) || self.bars.n_mc < 10 {
            return bad("bar band must be in (0, 1) with at least 10 Monte Carlo draws".into());
        }
        if !(self.optimizer.tolerance > 0.0) || self.optimizer.max_iterations == 0 {
            return bad("optimizer tolerance and iteration cap must be positive".into());
        }
        let s = &self.simulation;
        if s.n_datasets == 0 || s.n_farms < 2 || !(s.domain_km[0] > 0.0 && s.domain_km[1] > 0.0) {
            return bad(
                "simulation needs at least one dataset, two farms and a positive domain".into(),
            );
        }
        s.truth
            .theta
            .for_kind(ModelKind::Combined)
            .validate(ModelKind::Combined)
    }

    /// SHA-256 of the canonical JSON encoding, as lowercase hex.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&json)
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            }))
    }

    fn assembly(&self, horizon: usize) -> AssemblyOptions {
        AssemblyOptions {
            knot_spacing: self.knot_spacing,
            horizon,
            priors: self.priors,
        }
    }
}

/// Data-driven starting point for the optimizer.
///
/// Splits the transformed-scale variance between noise (10%) and the
/// model's latent components, and sets correlations from the mean lag-1
/// autocorrelation of the series.
pub fn initial_guess(
    kind: ModelKind,
    y: &Array2<f64>,
    prior_range: f64,
    knot_spacing: usize,
) -> Hyperparameters {
    let (n, len) = y.dim();
    let vals: Vec<f64> = y.iter().copied().collect();
    let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
    let var =
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len().max(1) as f64).max(1e-4);
    let mut r1 = 0.0;
    if len >= 3 {
        for row in y.rows() {
            let m = row.mean().unwrap_or(0.0);
            let den: f64 = row.iter().map(|v| (v - m).powi(2)).sum();
            let num: f64 = row
                .iter()
                .zip(row.iter().skip(1))
                .map(|(a, b)| (a - m) * (b - m))
                .sum();
            if den > 0.0 {
                r1 += num / den;
            }
        }
        r1 /= n as f64;
    }
    let rho1 = r1.clamp(0.05, 0.95);
    let rho2 = rho1.powi(knot_spacing as i32).clamp(0.05, 0.95);
    let latent = 0.9 * var;
    let (chain_share, field_share) = match kind {
        ModelKind::Temporal => (1.0, 0.0),
        ModelKind::SpatioTemporal => (0.0, 1.0),
        ModelKind::Combined => (0.5, 0.5),
    };
    let full = FullHyperparameters {
        sigma_e2: 0.1 * var,
        sigma_nu2: (chain_share * latent * (1.0 - rho1 * rho1)).max(1e-6),
        rho1,
        rho2,
        sigma_w2: (field_share * latent).max(1e-6),
        range: prior_range,
    };
    full.for_kind(kind)
}

/// Fit diagnostics and scores of one (window or fold, model) unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit: String,
    pub fit: FitResult,
    pub n_targets: usize,
    pub individual: Scores,
    pub aggregated: Scores,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub unit: String,
    pub model: ModelKind,
    pub message: String,
}

/// Seed used for one purpose in one unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub purpose: String,
    pub unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelKind>,
    pub seed: u64,
}

/// One model's units merged in unit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: ModelKind,
    pub individual: Scores,
    pub aggregated: Scores,
    pub units: Vec<UnitRecord>,
    pub failures: Vec<FailureRecord>,
}

impl ModelReport {
    fn new(model: ModelKind, horizon: usize) -> Self {
        let levels = default_levels();
        Self {
            model,
            individual: Scores::new(&levels, horizon),
            aggregated: Scores::new(&levels, horizon),
            units: Vec::new(),
            failures: Vec::new(),
        }
    }

    fn push(&mut self, unit: String, outcome: Result<UnitRecord>) -> Result<()> {
        match outcome {
            Ok(r) => {
                self.individual.merge(&r.individual)?;
                self.aggregated.merge(&r.aggregated)?;
                self.units.push(r);
            }
            Err(e) => {
                log::warn!("{} failed in {unit}: {e}", self.model);
                self.failures.push(FailureRecord {
                    unit,
                    model: self.model,
                    message: e.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn n_converged(&self) -> usize {
        self.units.iter().filter(|u| u.fit.converged).count()
    }

    pub fn scores(&self, scope: Scope) -> &Scores {
        match scope {
            Scope::Individual => &self.individual,
            Scope::Aggregated => &self.aggregated,
        }
    }

    /// Range estimates of the field models, in unit order.
    pub fn ranges(&self) -> Vec<f64> {
        self.units.iter().filter_map(|u| u.fit.range_hat).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Rolling,
    SpatialCv,
}

impl Scenario {
    fn code(self) -> u64 {
        match self {
            Scenario::Rolling => 0,
            Scenario::SpatialCv => 1,
        }
    }

    fn title(self) -> &'static str {
        match self {
            Scenario::Rolling => "rolling windows at the training locations",
            Scenario::SpatialCv => "spatial cross-validation at held-out locations",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub scenario: Scenario,
    pub master_seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub n_farms: usize,
    pub models: Vec<ModelReport>,
    pub seeds: Vec<SeedRecord>,
}

fn kind_code(kind: ModelKind) -> u64 {
    match kind {
        ModelKind::Temporal => 0,
        ModelKind::SpatioTemporal => 1,
        ModelKind::Combined => 2,
    }
}

fn scope_code(scope: Scope) -> u64 {
    match scope {
        Scope::Individual => 0,
        Scope::Aggregated => 1,
    }
}

impl VerificationReport {
    fn new(
        scenario: Scenario,
        cfg: &ExperimentConfig,
        n_farms: usize,
        kinds: &[ModelKind],
    ) -> Result<Self> {
        let mut seeds = Vec::new();
        for &k in kinds {
            for scope in [Scope::Individual, Scope::Aggregated] {
                seeds.push(SeedRecord {
                    purpose: format!("bars_{}", scope.as_str()),
                    unit: "all".into(),
                    model: Some(k),
                    seed: derive_seed(
                        cfg.master_seed,
                        &[
                            stream::BARS,
                            scenario.code(),
                            kind_code(k),
                            scope_code(scope),
                        ],
                    ),
                });
            }
        }
        Ok(Self {
            scenario,
            master_seed: cfg.master_seed,
            config_hash: cfg.hash()?,
            config: cfg.clone(),
            n_farms,
            models: kinds
                .iter()
                .map(|&k| ModelReport::new(k, cfg.horizon))
                .collect(),
            seeds,
        })
    }

    pub fn model(&self, kind: ModelKind) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.model == kind)
    }

    fn model_mut(&mut self, kind: ModelKind) -> &mut ModelReport {
        self.models
            .iter_mut()
            .find(|m| m.model == kind)
            .expect("report covers every scheduled kind")
    }

    fn bar_seed(&self, kind: ModelKind, scope: Scope) -> u64 {
        derive_seed(
            self.master_seed,
            &[
                stream::BARS,
                self.scenario.code(),
                kind_code(kind),
                scope_code(scope),
            ],
        )
    }

    pub fn score_tables(&self) -> Vec<ScoreTable> {
        let mut out = Vec::new();
        for scope in [Scope::Individual, Scope::Aggregated] {
            for m in self.models.iter().filter(|m| !m.units.is_empty()) {
                out.push(ScoreTable::from_scores(
                    m.scores(scope),
                    scope,
                    m.model,
                    m.units.len(),
                    self.n_farms,
                ));
            }
        }
        out
    }

    /// Reliability diagram of one model and scope; `None` without scored units.
    pub fn reliability(&self, kind: ModelKind, scope: Scope) -> Result<Option<ReliabilityDiagram>> {
        let Some(m) = self.model(kind).filter(|m| !m.units.is_empty()) else {
            return Ok(None);
        };
        let seed = self.bar_seed(kind, scope);
        ReliabilityDiagram::from_scores(m.scores(scope), scope, kind, &self.config.bars, seed)
            .map(Some)
    }

    pub fn summary_markdown(&self) -> Result<String> {
        let mut s = String::new();
        let _ = writeln!(s, "# Verification report: {}\n", self.scenario.title());
        let _ = writeln!(s, "- master seed: {}", self.master_seed);
        let _ = writeln!(s, "- config hash (SHA-256): {}", self.config_hash);
        let _ = writeln!(s, "- farms: {}", self.n_farms);
        let _ = writeln!(
            s,
            "- hyperparameters are MAP estimates; predictive intervals do not include hyperparameter uncertainty"
        );
        let _ = writeln!(
            s,
            "- hyperpriors: log-Gamma({}, {}) on log precisions and log κ², N(0, {}²) on log-odds correlations",
            self.config.priors.precision_shape, self.config.priors.precision_rate, self.config.priors.correlation_sd
        );
        for m in &self.models {
            let _ = writeln!(s, "\n## Model {}\n", m.model);
            let _ = writeln!(
                s,
                "units scored: {}; failed: {}; fits without convergence: {}",
                m.units.len(),
                m.failures.len(),
                m.units.len() - m.n_converged()
            );
            if m.units.is_empty() {
                continue;
            }
            let ranges = m.ranges();
            if !ranges.is_empty() {
                let q = quartiles(&ranges);
                let _ = writeln!(
                    s,
                    "estimated range (km) quartiles: {:.1} / {:.1} / {:.1}",
                    q[0], q[1], q[2]
                );
            }
            let _ = writeln!(
                s,
                "\n| scope | h | RMSE % | CRPS % | below 5% quantile | below 95% quantile |"
            );
            let _ = writeln!(s, "|---|---|---|---|---|---|");
            for scope in [Scope::Individual, Scope::Aggregated] {
                let sc = m.scores(scope);
                let (rmse, crps, cov) = (sc.rmse_pct(), sc.crps_pct(), sc.coverage());
                let last = sc.levels().len() - 1;
                for h in HIGHLIGHT_LEAD_TIMES
                    .into_iter()
                    .filter(|&h| h <= sc.horizon())
                {
                    let _ = writeln!(
                        s,
                        "| {} | {h} | {:.3} | {:.3} | {:.3} | {:.3} |",
                        scope.as_str(),
                        rmse[h - 1],
                        crps[h - 1],
                        cov[h - 1][0],
                        cov[h - 1][last]
                    );
                }
            }
        }
        Ok(s)
    }

    /// Write all report files into an existing directory.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        let tables = self.score_tables();
        let refs: Vec<&ScoreTable> = tables.iter().collect();
        ScoreTable::write_csv(&refs, fs::File::create(dir.join("scores.csv"))?)?;
        for m in &self.models {
            for scope in [Scope::Individual, Scope::Aggregated] {
                if let Some(d) = self.reliability(m.model, scope)? {
                    let name = format!("reliability_{}_{}.json", file_tag(m.model), scope.as_str());
                    fs::write(dir.join(name), serde_json::to_string_pretty(&d)?)?;
                }
            }
        }
        self.write_fits(fs::File::create(dir.join("fits.csv"))?)?;
        self.write_seeds(fs::File::create(dir.join("seeds.csv"))?)?;
        fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        fs::write(dir.join("report.json"), serde_json::to_string(self)?)?;
        fs::write(dir.join("summary.md"), self.summary_markdown()?)?;
        Ok(())
    }

    /// Write the report directory atomically, replacing `out` if present.
    pub fn write(&self, out: &Path) -> Result<()> {
        write_atomically(out, |dir| self.write_files(dir))
    }

    fn write_fits<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "unit",
            "model",
            "converged",
            "iterations",
            "evaluations",
            "log_posterior",
            "sigma_e2",
            "sigma_nu2",
            "rho1",
            "rho2",
            "sigma_w2",
            "kappa",
            "range",
            "sample_seed",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for m in &self.models {
            for u in &m.units {
                let f = &u.fit;
                let t = &f.theta_hat;
                out.write_record([
                    u.unit.clone(),
                    f.kind.to_string(),
                    f.converged.to_string(),
                    f.iterations.to_string(),
                    f.evaluations.to_string(),
                    format!("{:?}", f.log_posterior_at_mode),
                    format!("{:?}", t.sigma_e2),
                    opt(t.sigma_nu2),
                    opt(t.rho1),
                    opt(t.rho2),
                    opt(t.sigma_w2),
                    opt(t.kappa),
                    opt(f.range_hat),
                    f.seed.map(|s| s.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    fn write_seeds<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["purpose", "unit", "model", "seed"])?;
        for r in &self.seeds {
            out.write_record([
                r.purpose.clone(),
                r.unit.clone(),
                r.model.map(|k| k.to_string()).unwrap_or_default(),
                r.seed.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn file_tag(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Temporal => "t",
        ModelKind::SpatioTemporal => "s-t",
        ModelKind::Combined => "st+t",
    }
}

/// Lower quartile, median and upper quartile.
pub fn quartiles(values: &[f64]) -> [f64; 3] {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    [
        empirical_quantile(&v, 0.25),
        empirical_quantile(&v, 0.5),
        empirical_quantile(&v, 0.75),
    ]
}

/// Build a directory next to `out` with `fill`, then move it into place.
pub fn write_atomically<F: FnOnce(&Path) -> Result<()>>(out: &Path, fill: F) -> Result<()> {
    let parent = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = tempfile::Builder::new()
        .prefix(".windcast-staging-")
        .tempdir_in(parent)?;
    fill(staging.path())?;
    // the old directory is moved aside, not deleted, until the new one is in place
    let graveyard = tempfile::Builder::new()
        .prefix(".windcast-old-")
        .tempdir_in(parent)?;
    if out.exists() {
        fs::rename(out, graveyard.path().join("previous"))?;
    }
    let staged = staging.keep();
    if let Err(e) = fs::rename(&staged, out) {
        let _ = fs::rename(graveyard.path().join("previous"), out);
        let _ = fs::remove_dir_all(&staged);
        return Err(e.into());
    }
    Ok(())
}

/// Everything one unit needs, owned so units can run in any order.
struct UnitSpec {
    label: String,
    kind: ModelKind,
    y: Array2<f64>,
    locations: Vec<[f64; 2]>,
    targets: Vec<Target>,
    truth: Array2<f64>,
    capacities: Vec<f64>,
    init: Hyperparameters,
    seed: u64,
}

impl UnitSpec {
    fn seed_record(&self) -> SeedRecord {
        SeedRecord {
            purpose: "samples".into(),
            unit: self.label.clone(),
            model: Some(self.kind),
            seed: self.seed,
        }
    }
}

/// 64-bit digest of a unit's inputs, so identical inputs draw identical samples.
fn content_key(
    kind: ModelKind,
    y: &Array2<f64>,
    locations: &[[f64; 2]],
    targets: &[Target],
) -> u64 {
    let mut h = Sha256::new();
    h.update(kind.as_str().as_bytes());
    h.update((y.nrows() as u64).to_le_bytes());
    for v in y.iter() {
        h.update(v.to_le_bytes());
    }
    for p in locations {
        h.update(p[0].to_le_bytes());
        h.update(p[1].to_le_bytes());
    }
    for t in targets {
        match *t {
            Target::Observed(j) => h.update((j as u64).to_le_bytes()),
            Target::New(p) => {
                h.update(p[0].to_le_bytes());
                h.update(p[1].to_le_bytes());
            }
        }
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn run_unit(spec: &UnitSpec, mesh: Option<&Mesh>, cfg: &ExperimentConfig) -> Result<UnitRecord> {
    let mesh = mesh.filter(|_| spec.kind.has_field());
    let fit_model = assemble(
        spec.kind,
        &spec.y,
        &spec.locations,
        mesh,
        &[],
        &cfg.assembly(0),
    )?;
    let mut fit = fit_map(&fit_model, &spec.init, &cfg.optimizer)?;
    drop(fit_model);
    fit.seed = Some(spec.seed);
    let model = assemble(
        spec.kind,
        &spec.y,
        &spec.locations,
        mesh,
        &spec.targets,
        &cfg.assembly(cfg.horizon),
    )?;
    let cube = predictive_samples(
        &model,
        &fit.theta_hat,
        cfg.n_samples,
        spec.seed,
        cfg.parallelism,
    )?;
    drop(model);
    let levels = default_levels();
    let individual = score_individual(&cube, &spec.truth, &levels)?;
    let agg_truth = aggregate_truth(&spec.truth, &spec.capacities)?;
    let aggregated = score_aggregated(&cube, &spec.capacities, &agg_truth, &levels)?;
    log::info!(
        "{} {}: {} evaluations, log posterior {:.3}{}",
        spec.label,
        spec.kind,
        fit.evaluations,
        fit.log_posterior_at_mode,
        if fit.converged {
            ""
        } else {
            " (not converged)"
        }
    );
    Ok(UnitRecord {
        unit: spec.label.clone(),
        fit,
        n_targets: spec.targets.len(),
        individual,
        aggregated,
    })
}

fn mesh_for(
    kinds: &[ModelKind],
    locations: &[[f64; 2]],
    cfg: &ExperimentConfig,
) -> Result<Option<Mesh>> {
    if kinds.iter().any(|k| k.has_field()) {
        Ok(Some(build_mesh(locations, &cfg.mesh.params())?))
    } else {
        Ok(None)
    }
}

fn transformed(p: &Portfolio, cfg: &ExperimentConfig) -> Result<Array2<f64>> {
    Ok(TransformedSeries::from_power(p.power(), cfg.epsilon)?.values)
}

type Init<'a> = &'a dyn Fn(ModelKind, &Array2<f64>) -> Hyperparameters;

fn rolling_specs(
    window: &Window,
    label: &str,
    kinds: &[ModelKind],
    cfg: &ExperimentConfig,
    init: Init<'_>,
) -> Result<Vec<UnitSpec>> {
    let y = transformed(&window.train, cfg)?;
    let locations = window.train.locations();
    let targets: Vec<Target> = (0..window.train.n_farms()).map(Target::Observed).collect();
    Ok(kinds
        .iter()
        .map(|&kind| UnitSpec {
            label: label.to_string(),
            kind,
            init: init(kind, &y),
            seed: derive_seed(
                cfg.master_seed,
                &[stream::SAMPLES, content_key(kind, &y, &locations, &targets)],
            ),
            y: y.clone(),
            locations: locations.clone(),
            targets: targets.clone(),
            truth: window.truth.clone(),
            capacities: window.train.capacities(),
        })
        .collect())
}

fn cv_specs(
    window: &Window,
    label: &str,
    folds: &[usize],
    n_folds: usize,
    kinds: &[ModelKind],
    cfg: &ExperimentConfig,
    init: Init<'_>,
) -> Result<Vec<UnitSpec>> {
    let all_y = transformed(&window.train, cfg)?;
    let all_locs = window.train.locations();
    let caps = window.train.capacities();
    let mut out = Vec::new();
    for f in 0..n_folds {
        let train: Vec<usize> = (0..folds.len()).filter(|&j| folds[j] != f).collect();
        let held: Vec<usize> = (0..folds.len()).filter(|&j| folds[j] == f).collect();
        let y = all_y.select(ndarray::Axis(0), &train);
        let truth = window.truth.select(ndarray::Axis(0), &held);
        let locations: Vec<[f64; 2]> = train.iter().map(|&j| all_locs[j]).collect();
        let targets: Vec<Target> = held.iter().map(|&j| Target::New(all_locs[j])).collect();
        for &kind in kinds {
            out.push(UnitSpec {
                label: format!("{label}/fold{f}"),
                kind,
                init: init(kind, &y),
                seed: derive_seed(
                    cfg.master_seed,
                    &[stream::SAMPLES, content_key(kind, &y, &locations, &targets)],
                ),
                y: y.clone(),
                locations: locations.clone(),
                targets: targets.clone(),
                truth: truth.clone(),
                capacities: held.iter().map(|&j| caps[j]).collect(),
            });
        }
    }
    Ok(out)
}

fn default_init(
    cfg: &ExperimentConfig,
) -> impl Fn(ModelKind, &Array2<f64>) -> Hyperparameters + '_ {
    move |kind, y| initial_guess(kind, y, cfg.mesh.prior_range, cfg.knot_spacing)
}

fn prepare(p: &Portfolio, cfg: &ExperimentConfig) -> Result<Portfolio> {
    cfg.validate()?;
    if cfg.max_zero_fraction < 1.0 {
        filter_farms(p, cfg.max_zero_fraction)
    } else {
        Ok(p.clone())
    }
}

fn collate(
    report: &mut VerificationReport,
    specs: &[UnitSpec],
    outcomes: Vec<Result<UnitRecord>>,
) -> Result<()> {
    for (spec, outcome) in specs.iter().zip(outcomes) {
        report.seeds.push(spec.seed_record());
        report
            .model_mut(spec.kind)
            .push(spec.label.clone(), outcome)?;
    }
    Ok(())
}

/// Fit, forecast and score every model on every rolling window.
pub fn run_rolling_eval(p: &Portfolio, cfg: &ExperimentConfig) -> Result<VerificationReport> {
    let p = prepare(p, cfg)?;
    let windows = make_windows(&p, cfg.train_len, cfg.horizon, cfg.stride)?;
    let mesh = mesh_for(&cfg.models, &p.locations(), cfg)?;
    let init = default_init(cfg);
    let mut specs = Vec::new();
    for w in &windows {
        specs.extend(rolling_specs(
            w,
            &format!("window{}", w.offset),
            &cfg.models,
            cfg,
            &init,
        )?);
    }
    let outcomes = par::map(cfg.parallelism, &specs, |s| run_unit(s, mesh.as_ref(), cfg));
    let mut report = VerificationReport::new(Scenario::Rolling, cfg, p.n_farms(), &cfg.models)?;
    collate(&mut report, &specs, outcomes)?;
    Ok(report)
}

/// Fold index of every location; each of the `k` folds is non-empty.
pub fn assign_folds(
    locations: &[[f64; 2]],
    k: usize,
    method: FoldAssignment,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = locations.len();
    if k < 2 {
        return Err(Error::Partition(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::Partition(format!(
            "{k} folds over {n} farms leaves a fold with zero farms"
        )));
    }
    let mut folds = vec![0; n];
    match method {
        FoldAssignment::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            for (i, &j) in order.iter().enumerate() {
                folds[j] = i % k;
            }
        }
        FoldAssignment::SpatialBlocks => {
            let extent = |d: usize| {
                let (lo, hi) = locations
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                        (lo.min(p[d]), hi.max(p[d]))
                    });
                hi - lo
            };
            let axis = usize::from(extent(1) > extent(0));
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                locations[a][axis]
                    .total_cmp(&locations[b][axis])
                    .then(a.cmp(&b))
            });
            for (i, &j) in order.iter().enumerate() {
                folds[j] = i * k / n;
            }
        }
    }
    Ok(folds)
}

fn field_kinds(cfg: &ExperimentConfig) -> Vec<ModelKind> {
    let kinds: Vec<ModelKind> = cfg
        .models
        .iter()
        .copied()
        .filter(|k| k.has_field())
        .collect();
    if kinds.len() < cfg.models.len() {
        log::info!("model T needs local observations and is skipped in spatial cross-validation");
    }
    kinds
}

/// k-fold cross-validation over farms: fit on the other folds, forecast at
/// the held-out locations. Only models with a spatial field take part.
pub fn run_spatial_cv(p: &Portfolio, cfg: &ExperimentConfig) -> Result<VerificationReport> {
    let p = prepare(p, cfg)?;
    let kinds = field_kinds(cfg);
    if kinds.is_empty() {
        return Err(Error::Config(
            "spatial cross-validation needs S-T or ST+T".into(),
        ));
    }
    let locations = p.locations();
    let fold_seed = derive_seed(cfg.master_seed, &[stream::FOLDS]);
    let folds = assign_folds(&locations, cfg.cv_folds, cfg.fold_assignment, fold_seed)?;
    let windows = make_windows(&p, cfg.train_len, cfg.horizon, cfg.stride)?;
    // one mesh over every farm, so held-out locations lie inside it
    let mesh = mesh_for(&kinds, &locations, cfg)?;
    let init = default_init(cfg);
    let mut specs = Vec::new();
    for w in &windows {
        specs.extend(cv_specs(
            w,
            &format!("window{}", w.offset),
            &folds,
            cfg.cv_folds,
            &kinds,
            cfg,
            &init,
        )?);
    }
    let outcomes = par::map(cfg.parallelism, &specs, |s| run_unit(s, mesh.as_ref(), cfg));
    let mut report = VerificationReport::new(Scenario::SpatialCv, cfg, p.n_farms(), &kinds)?;
    report.seeds.push(SeedRecord {
        purpose: "folds".into(),
        unit: "all".into(),
        model: None,
        seed: fold_seed,
    });
    collate(&mut report, &specs, outcomes)?;
    Ok(report)
}

/// `n` locations uniform on [0, width] × [0, height].
pub fn uniform_locations(n: usize, domain_km: [f64; 2], seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            [
                rng.random::<f64>() * domain_km[0],
                rng.random::<f64>() * domain_km[1],
            ]
        })
        .collect()
}

fn simulation_start() -> DateTime<Utc> {
    DateTime::from_timestamp(1_388_534_400, 0).expect("valid timestamp")
}

/// Portfolio drawn from the ST+T model on `mesh`: space-time field, per-farm
/// stationary AR(1) chains, shared intercept and noise on the logit scale.
pub fn simulate_on_mesh(
    truth: &SimulationTruth,
    mesh: &Mesh,
    locations: &[[f64; 2]],
    n_steps: usize,
    knot_spacing: usize,
    seed: u64,
) -> Result<Portfolio> {
    let th = truth.theta;
    th.for_kind(ModelKind::Combined)
        .validate(ModelKind::Combined)?;
    if n_steps < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: n_steps,
        });
    }
    let kappa = 8f64.sqrt() / th.range;
    let qs = spatial_precision(
        &fem_matrices(mesh),
        kappa,
        tau_from_sigma(th.sigma_w2, kappa),
    )?;
    let factor = CholeskyFactor::new(&qs, &Ordering::ReverseCuthillMckee)?;
    let knots = KnotGrid::covering(n_steps, knot_spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nv = mesh.n_vertices();
    let mut field = Vec::with_capacity(nv * knots.n_knots);
    let mut prev: Vec<f64> = Vec::new();
    for k in 0..knots.n_knots {
        let z: Vec<f64> = (0..nv).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = factor.sample_transform(&z);
        let x: Vec<f64> = if k == 0 {
            let s = (1.0 - th.rho2 * th.rho2).sqrt();
            e.iter().map(|v| v / s).collect()
        } else {
            prev.iter().zip(&e).map(|(p, v)| th.rho2 * p + v).collect()
        };
        field.extend_from_slice(&x);
        prev = x;
    }
    let obs_times: Vec<f64> = (0..n_steps).map(|t| t as f64).collect();
    let fz = build_projector(mesh, locations, &knots.times(), &obs_times)?
        .matrix()
        .mul_vec(&field);
    let sd_stat = (th.sigma_nu2 / (1.0 - th.rho1 * th.rho1)).sqrt();
    let (sd_nu, sd_e) = (th.sigma_nu2.sqrt(), th.sigma_e2.sqrt());
    let mut power = Array2::zeros((locations.len(), n_steps));
    for j in 0..locations.len() {
        let mut w = sd_stat * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        for t in 0..n_steps {
            if t > 0 {
                w = th.rho1 * w + sd_nu * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
            let noise: f64 = StandardNormal.sample(&mut rng);
            power[[j, t]] = inv_logit(truth.intercept + fz[j * n_steps + t] + w + sd_e * noise);
        }
    }
    let farms = locations
        .iter()
        .enumerate()
        .map(|(j, &location)| Farm {
            id: format!("F{:04}", j + 1),
            location,
            capacity: 1.0,
        })
        .collect();
    Portfolio::new(farms, simulation_start(), TimeDelta::minutes(15), power)
}

/// [`simulate_on_mesh`] on a mesh built over `locations`.
pub fn simulate_stt(
    truth: &SimulationTruth,
    locations: &[[f64; 2]],
    n_steps: usize,
    mesh_params: &MeshParams,
    knot_spacing: usize,
    seed: u64,
) -> Result<Portfolio> {
    let mesh = build_mesh(locations, mesh_params)?;
    simulate_on_mesh(truth, &mesh, locations, n_steps, knot_spacing, seed)
}

/// Range estimates of one model across simulated datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeSummary {
    pub model: ModelKind,
    pub estimates: Vec<f64>,
    pub quartiles: [f64; 3],
}

impl RangeSummary {
    pub fn iqr(&self) -> f64 {
        self.quartiles[2] - self.quartiles[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub truth: SimulationTruth,
    pub n_datasets: usize,
    /// One window per dataset at the training locations.
    pub rolling: VerificationReport,
    /// Spatial cross-validation on the first `cv_datasets` datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<VerificationReport>,
    pub ranges: Vec<RangeSummary>,
}

impl SimulationReport {
    pub fn range_summary(&self, kind: ModelKind) -> Option<&RangeSummary> {
        self.ranges.iter().find(|r| r.model == kind)
    }

    pub fn summary_markdown(&self) -> Result<String> {
        let mut s = String::new();
        let _ = writeln!(s, "# Simulation study\n");
        let _ = writeln!(s, "- datasets: {}", self.n_datasets);
        let _ = writeln!(s, "- master seed: {}", self.rolling.master_seed);
        let _ = writeln!(s, "- config hash (SHA-256): {}", self.rolling.config_hash);
        let t = &self.truth.theta;
        let _ = writeln!(
            s,
            "- generating values: σ_e² = {}, σ_ν² = {}, ρ₁ = {}, ρ₂ = {}, σ_w² = {}, range = {} km, intercept = {}",
            t.sigma_e2, t.sigma_nu2, t.rho1, t.rho2, t.sigma_w2, t.range, self.truth.intercept
        );
        let _ = writeln!(s, "\n## Estimated range (km)\n");
        let _ = writeln!(s, "| model | lower quartile | median | upper quartile |");
        let _ = writeln!(s, "|---|---|---|---|");
        for r in &self.ranges {
            let q = r.quartiles;
            let _ = writeln!(
                s,
                "| {} | {:.1} | {:.1} | {:.1} |",
                r.model, q[0], q[1], q[2]
            );
        }
        let _ = writeln!(s, "\nScenario reports are in `rolling/` and `cv/`.");
        Ok(s)
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        let rolling = dir.join("rolling");
        fs::create_dir(&rolling)?;
        self.rolling.write_files(&rolling)?;
        if let Some(cv) = &self.cv {
            let d = dir.join("cv");
            fs::create_dir(&d)?;
            cv.write_files(&d)?;
        }
        let mut out = csv::Writer::from_writer(fs::File::create(dir.join("ranges.csv"))?);
        out.write_record(["model", "dataset", "range"])?;
        for r in &self.ranges {
            for (i, v) in r.estimates.iter().enumerate() {
                out.write_record([r.model.to_string(), i.to_string(), format!("{v:?}")])?;
            }
        }
        out.flush()?;
        fs::write(dir.join("summary.md"), self.summary_markdown()?)?;
        Ok(())
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        write_atomically(out, |dir| self.write_files(dir))
    }
}

/// Simulated dataset `d`: its portfolio (L + H steps) and mesh.
pub fn simulated_dataset(
    cfg: &ExperimentConfig,
    truth: &SimulationTruth,
    d: usize,
) -> Result<(Portfolio, Mesh, [u64; 2])> {
    let s = &cfg.simulation;
    let loc_seed = derive_seed(cfg.master_seed, &[stream::LOCATIONS, d as u64]);
    let sim_seed = derive_seed(cfg.master_seed, &[stream::SIMULATION, d as u64]);
    let locations = uniform_locations(s.n_farms, s.domain_km, loc_seed);
    let mesh = build_mesh(&locations, &cfg.mesh.params())?;
    let p = simulate_on_mesh(
        truth,
        &mesh,
        &locations,
        cfg.train_len + cfg.horizon,
        cfg.knot_spacing,
        sim_seed,
    )?;
    Ok((p, mesh, [loc_seed, sim_seed]))
}

struct DatasetOutcome {
    specs: Vec<UnitSpec>,
    rolling: Vec<Result<UnitRecord>>,
    cv_specs: Vec<UnitSpec>,
    cv: Vec<Result<UnitRecord>>,
    seeds: Vec<SeedRecord>,
}

fn run_dataset(
    cfg: &ExperimentConfig,
    truth: &SimulationTruth,
    d: usize,
    with_cv: bool,
) -> Result<DatasetOutcome> {
    let (p, mesh, [loc_seed, sim_seed]) = simulated_dataset(cfg, truth, d)?;
    let label = format!("dataset{d}");
    let mut seeds = vec![
        SeedRecord {
            purpose: "locations".into(),
            unit: label.clone(),
            model: None,
            seed: loc_seed,
        },
        SeedRecord {
            purpose: "simulation".into(),
            unit: label.clone(),
            model: None,
            seed: sim_seed,
        },
    ];
    let window = make_windows(&p, cfg.train_len, cfg.horizon, cfg.stride)?.swap_remove(0);
    let init = default_init(cfg);
    let specs = rolling_specs(&window, &label, &cfg.models, cfg, &init)?;
    let rolling: Vec<Result<UnitRecord>> = specs
        .iter()
        .map(|s| run_unit(s, Some(&mesh), cfg))
        .collect();
    let (mut cv_specs_out, mut cv) = (Vec::new(), Vec::new());
    let kinds = field_kinds(cfg);
    if with_cv && !kinds.is_empty() {
        let fold_seed = derive_seed(cfg.master_seed, &[stream::FOLDS, d as u64]);
        seeds.push(SeedRecord {
            purpose: "folds".into(),
            unit: label.clone(),
            model: None,
            seed: fold_seed,
        });
        let folds = assign_folds(&p.locations(), cfg.cv_folds, cfg.fold_assignment, fold_seed)?;
        // warm start from the same dataset's full fit
        let fitted: Vec<(ModelKind, Hyperparameters)> = specs
            .iter()
            .zip(&rolling)
            .filter_map(|(s, r)| r.as_ref().ok().map(|r| (s.kind, r.fit.theta_hat)))
            .collect();
        let warm = |kind: ModelKind, y: &Array2<f64>| {
            fitted
                .iter()
                .find(|(k, _)| *k == kind)
                .map_or_else(|| init(kind, y), |&(_, t)| t)
        };
        cv_specs_out = cv_specs(&window, &label, &folds, cfg.cv_folds, &kinds, cfg, &warm)?;
        cv = cv_specs_out
            .iter()
            .map(|s| run_unit(s, Some(&mesh), cfg))
            .collect();
    }
    Ok(DatasetOutcome {
        specs,
        rolling,
        cv_specs: cv_specs_out,
        cv,
        seeds,
    })
}

/// Simulate datasets from the ST+T model and score every configured model on
/// one window per dataset, plus spatial cross-validation on the first
/// `cv_datasets` of them.
pub fn run_simulation_study(
    cfg: &ExperimentConfig,
    truth: &SimulationTruth,
    n_datasets: usize,
) -> Result<SimulationReport> {
    cfg.validate()?;
    if n_datasets == 0 {
        return Err(Error::Config(
            "simulation study needs at least one dataset".into(),
        ));
    }
    let n_cv = cfg.simulation.cv_datasets.min(n_datasets);
    let outcomes = par::map_range(cfg.parallelism, n_datasets, |d| {
        run_dataset(cfg, truth, d, d < n_cv)
    });
    let n_farms = cfg.simulation.n_farms;
    let mut rolling = VerificationReport::new(Scenario::Rolling, cfg, n_farms, &cfg.models)?;
    let kinds = field_kinds(cfg);
    let mut cv = if n_cv > 0 && !kinds.is_empty() {
        Some(VerificationReport::new(
            Scenario::SpatialCv,
            cfg,
            n_farms,
            &kinds,
        )?)
    } else {
        None
    };
    for o in outcomes {
        let o = o?;
        rolling.seeds.extend(o.seeds.iter().cloned());
        collate(&mut rolling, &o.specs, o.rolling)?;
        if let Some(cv) = cv.as_mut() {
            collate(cv, &o.cv_specs, o.cv)?;
        }
    }
    let ranges = rolling
        .models
        .iter()
        .filter(|m| m.model.has_field())
        .map(|m| {
            let estimates = m.ranges();
            let quartiles = if estimates.is_empty() {
                [f64::NAN; 3]
            } else {
                quartiles(&estimates)
            };
            RangeSummary {
                model: m.model,
                estimates,
                quartiles,
            }
        })
        .collect();
    Ok(SimulationReport {
        truth: *truth,
        n_datasets,
        rolling,
        cv,
        ranges,
    })
}
