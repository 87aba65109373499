//! Forecast verification: RMSE, CRPS and reliability with consistency bars.
//!
//! Scores accumulate over cases so windows can be scored independently and
//! merged in a fixed order. All reported scores are in % of nominal power.

use std::io::Write;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::SampleCube;
use crate::model::ModelKind;
use crate::par::derive_seed;
use crate::transform::aggregate;

/// Nominal levels 0.05, 0.10, …, 0.95.
pub fn default_levels() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

/// Lead times singled out in summaries.
pub const HIGHLIGHT_LEAD_TIMES: [usize; 4] = [1, 7, 13, 19];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Individual,
    Aggregated,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Individual => "individual",
            Scope::Aggregated => "aggregated",
        }
    }
}

/// Empirical quantile of sorted data with linear interpolation between
/// order statistics (position α·(n−1)).
pub fn empirical_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let n = sorted.len();
    let pos = alpha * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Sample CRPS: (1/n)Σ|x_k − y| − (1/2n²)Σ_{k,l}|x_k − x_l|, from sorted samples.
pub fn crps_sorted(sorted: &[f64], obs: f64) -> f64 {
    // a point mass scores exactly its absolute error
    if sorted[0] == sorted[sorted.len() - 1] {
        return (sorted[0] - obs).abs();
    }
    let n = sorted.len() as f64;
    let mut abs_err = 0.0;
    let mut spread = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        abs_err += (x - obs).abs();
        // Σ_{k,l}|x_k − x_l| = 2 Σ_i (2i − n + 1) x_(i), 0-based
        spread += (2.0 * i as f64 - n + 1.0) * x;
    }
    abs_err / n - spread / (n * n)
}

pub fn crps_ensemble(samples: &[f64], obs: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    crps_sorted(&s, obs)
}

/// Running sums over cases per lead time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    levels: Vec<f64>,
    sq_err: Vec<f64>,
    crps: Vec<f64>,
    /// hits[h][a]: truth at or below the level-a quantile.
    hits: Vec<Vec<u64>>,
    cases: Vec<u64>,
}

impl Scores {
    pub fn new(levels: &[f64], horizon: usize) -> Self {
        Self {
            levels: levels.to_vec(),
            sq_err: vec![0.0; horizon],
            crps: vec![0.0; horizon],
            hits: vec![vec![0; levels.len()]; horizon],
            cases: vec![0; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.cases.len()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn cases(&self) -> &[u64] {
        &self.cases
    }

    pub fn hits(&self) -> &[Vec<u64>] {
        &self.hits
    }

    /// One forecast case at lead index `h` (0-based).
    pub fn add_case(&mut self, h: usize, samples: &[f64], truth: f64) {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        self.sq_err[h] += (mean - truth).powi(2);
        self.crps[h] += crps_sorted(&s, truth);
        for (a, &alpha) in self.levels.iter().enumerate() {
            if truth <= empirical_quantile(&s, alpha) {
                self.hits[h][a] += 1;
            }
        }
        self.cases[h] += 1;
    }

    pub fn merge(&mut self, other: &Scores) -> Result<()> {
        if self.levels != other.levels || self.horizon() != other.horizon() {
            return Err(Error::Dimension {
                expected: self.horizon(),
                found: other.horizon(),
            });
        }
        for h in 0..self.horizon() {
            self.sq_err[h] += other.sq_err[h];
            self.crps[h] += other.crps[h];
            self.cases[h] += other.cases[h];
            for a in 0..self.levels.len() {
                self.hits[h][a] += other.hits[h][a];
            }
        }
        Ok(())
    }

    pub fn rmse_pct(&self) -> Vec<f64> {
        self.sq_err
            .iter()
            .zip(&self.cases)
            .map(|(s, &c)| 100.0 * (s / c as f64).sqrt())
            .collect()
    }

    pub fn crps_pct(&self) -> Vec<f64> {
        self.crps
            .iter()
            .zip(&self.cases)
            .map(|(s, &c)| 100.0 * s / c as f64)
            .collect()
    }

    /// coverage[h][a] = hits / cases.
    pub fn coverage(&self) -> Vec<Vec<f64>> {
        self.hits
            .iter()
            .zip(&self.cases)
            .map(|(row, &c)| row.iter().map(|&k| k as f64 / c as f64).collect())
            .collect()
    }
}

/// Per-entry sample mean, farms × lead times.
pub fn point_forecast(cube: &SampleCube) -> Array2<f64> {
    cube.samples.mean_axis(Axis(0)).expect("cube has samples")
}

fn check_shape(found: (usize, usize), expected: (usize, usize)) -> Result<()> {
    if found != expected {
        return Err(Error::Dimension {
            expected: expected.0 * expected.1,
            found: found.0 * found.1,
        });
    }
    Ok(())
}

/// RMSE per lead time over all farms, in %.
pub fn rmse(point: &Array2<f64>, truth: &Array2<f64>) -> Result<Vec<f64>> {
    check_shape(truth.dim(), point.dim())?;
    let n = point.nrows() as f64;
    Ok((0..point.ncols())
        .map(|h| {
            let se: f64 = point
                .column(h)
                .iter()
                .zip(truth.column(h))
                .map(|(p, t)| (p - t).powi(2))
                .sum();
            100.0 * (se / n).sqrt()
        })
        .collect())
}

/// CRPS per lead time averaged over farms, in %.
pub fn crps(cube: &SampleCube, truth: &Array2<f64>) -> Result<Vec<f64>> {
    Ok(score_individual(cube, truth, &[])?.crps_pct())
}

/// Individual scores of one window: one case per (farm, lead time).
pub fn score_individual(cube: &SampleCube, truth: &Array2<f64>, levels: &[f64]) -> Result<Scores> {
    let (_, n_farms, horizon) = cube.samples.dim();
    check_shape(truth.dim(), (n_farms, horizon))?;
    let mut s = Scores::new(levels, horizon);
    for j in 0..n_farms {
        for h in 0..horizon {
            let col: Vec<f64> = cube.samples.slice(ndarray::s![.., j, h]).to_vec();
            s.add_case(h, &col, truth[[j, h]]);
        }
    }
    Ok(s)
}

/// Capacity-weighted aggregate of every sample, (sample, lead time).
pub fn aggregate_cube(cube: &SampleCube, capacities: &[f64]) -> Result<Array2<f64>> {
    let (n, n_farms, horizon) = cube.samples.dim();
    if capacities.len() != n_farms {
        return Err(Error::Dimension {
            expected: n_farms,
            found: capacities.len(),
        });
    }
    let mut out = Array2::zeros((n, horizon));
    let mut buf = vec![0.0; n_farms];
    for k in 0..n {
        for h in 0..horizon {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = cube.samples[[k, j, h]];
            }
            out[[k, h]] = aggregate(&buf, capacities)?;
        }
    }
    Ok(out)
}

/// Aggregated truth per lead time.
pub fn aggregate_truth(truth: &Array2<f64>, capacities: &[f64]) -> Result<Vec<f64>> {
    (0..truth.ncols())
        .map(|h| aggregate(&truth.column(h).to_vec(), capacities))
        .collect()
}

/// Aggregated scores of one window: one case per lead time.
pub fn score_aggregated(
    cube: &SampleCube,
    capacities: &[f64],
    truth_agg: &[f64],
    levels: &[f64],
) -> Result<Scores> {
    let agg = aggregate_cube(cube, capacities)?;
    if truth_agg.len() != agg.ncols() {
        return Err(Error::Dimension {
            expected: agg.ncols(),
            found: truth_agg.len(),
        });
    }
    let mut s = Scores::new(levels, agg.ncols());
    for h in 0..agg.ncols() {
        s.add_case(h, &agg.column(h).to_vec(), truth_agg[h]);
    }
    Ok(s)
}

/// Binomial Monte Carlo bars for observed coverage under perfect
/// calibration. Bars are empirical quantiles of the simulated coverage,
/// widened if needed so that each contains its own level.
pub fn consistency_bars(
    n_cases: u64,
    levels: &[f64],
    n_mc: usize,
    band: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if n_cases == 0 || n_mc == 0 || !(band > 0.0 && band < 1.0) {
        return Err(Error::Argument(format!(
            "invalid bar settings: cases {n_cases}, draws {n_mc}, band {band}"
        )));
    }
    let lo_q = (1.0 - band) / 2.0;
    let hi_q = (1.0 + band) / 2.0;
    levels
        .iter()
        .enumerate()
        .map(|(a, &alpha)| {
            let binom =
                Binomial::new(n_cases, alpha).map_err(|e| Error::Argument(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[a as u64]));
            let mut draws: Vec<u64> = (0..n_mc).map(|_| binom.sample(&mut rng)).collect();
            draws.sort_unstable();
            // inverse empirical CDF keeps bars on attainable proportions
            let pick = |q: f64| {
                let idx = ((q * n_mc as f64).ceil() as usize).clamp(1, n_mc) - 1;
                draws[idx] as f64 / n_cases as f64
            };
            Ok((pick(lo_q).min(alpha), pick(hi_q).max(alpha)))
        })
        .collect()
}

/// Settings for consistency bars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarSettings {
    pub n_mc: usize,
    pub band: f64,
}

impl Default for BarSettings {
    fn default() -> Self {
        Self {
            n_mc: 10_000,
            band: 0.90,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityDiagram {
    pub scope: Scope,
    pub model: ModelKind,
    pub levels: Vec<f64>,
    pub lead_times: Vec<usize>,
    /// coverage[h][a]
    pub coverage: Vec<Vec<f64>>,
    /// bars[h][a] = (lower, upper)
    pub bars: Vec<Vec<(f64, f64)>>,
    /// Cases per lead time.
    pub counts: Vec<u64>,
    pub hits: Vec<Vec<u64>>,
    pub seed: u64,
}

impl ReliabilityDiagram {
    pub fn from_scores(
        scores: &Scores,
        scope: Scope,
        model: ModelKind,
        bars: &BarSettings,
        seed: u64,
    ) -> Result<Self> {
        let mut bar_rows = Vec::with_capacity(scores.horizon());
        let mut memo: Vec<(u64, Vec<(f64, f64)>)> = Vec::new();
        for &c in scores.cases() {
            let row = match memo.iter().find(|(n, _)| *n == c) {
                Some((_, b)) => b.clone(),
                None => {
                    let b = consistency_bars(c, scores.levels(), bars.n_mc, bars.band, seed)?;
                    memo.push((c, b.clone()));
                    b
                }
            };
            bar_rows.push(row);
        }
        Ok(Self {
            scope,
            model,
            levels: scores.levels().to_vec(),
            lead_times: (1..=scores.horizon()).collect(),
            coverage: scores.coverage(),
            bars: bar_rows,
            counts: scores.cases().to_vec(),
            hits: scores.hits().to_vec(),
            seed,
        })
    }

    /// Fraction of (level, lead time) cells whose coverage is within its bar.
    pub fn fraction_within_bars(&self, lead_times: &[usize]) -> f64 {
        let mut inside = 0;
        let mut total = 0;
        for &h in lead_times {
            for (a, &c) in self.coverage[h - 1].iter().enumerate() {
                let (lo, hi) = self.bars[h - 1][a];
                total += 1;
                if c >= lo && c <= hi {
                    inside += 1;
                }
            }
        }
        inside as f64 / total as f64
    }

    pub fn level_index(&self, alpha: f64) -> Option<usize> {
        self.levels.iter().position(|&l| (l - alpha).abs() < 1e-9)
    }
}

/// Reliability of sample vectors against outcomes, one case per entry.
pub fn reliability(
    samples: &[Vec<f64>],
    truth: &[f64],
    levels: &[f64],
    bars: &BarSettings,
    seed: u64,
) -> Result<ReliabilityDiagram> {
    if samples.len() != truth.len() {
        return Err(Error::Dimension {
            expected: truth.len(),
            found: samples.len(),
        });
    }
    let mut s = Scores::new(levels, 1);
    for (x, &y) in samples.iter().zip(truth) {
        s.add_case(0, x, y);
    }
    ReliabilityDiagram::from_scores(&s, Scope::Individual, ModelKind::Combined, bars, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub scope: Scope,
    pub model: ModelKind,
    pub h: usize,
    pub rmse_pct: f64,
    pub crps_pct: f64,
}

/// Per-lead-time scores with the window and farm counts behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    pub n_windows: usize,
    pub n_farms: usize,
}

impl ScoreTable {
    pub fn from_scores(
        scores: &Scores,
        scope: Scope,
        model: ModelKind,
        n_windows: usize,
        n_farms: usize,
    ) -> Self {
        let rows = scores
            .rmse_pct()
            .into_iter()
            .zip(scores.crps_pct())
            .enumerate()
            .map(|(h, (rmse_pct, crps_pct))| ScoreRow {
                scope,
                model,
                h: h + 1,
                rmse_pct,
                crps_pct,
            })
            .collect();
        Self {
            rows,
            n_windows,
            n_farms,
        }
    }

    pub fn write_csv<W: Write>(tables: &[&ScoreTable], w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scope", "model", "h", "rmse_pct", "crps_pct"])?;
        for t in tables {
            for r in &t.rows {
                out.write_record([
                    r.scope.as_str().to_string(),
                    r.model.to_string(),
                    r.h.to_string(),
                    format!("{:?}", r.rmse_pct),
                    format!("{:?}", r.crps_pct),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Aggregated score table and reliability of a single cube.
pub fn aggregate_scores(
    cube: &SampleCube,
    capacities: &[f64],
    truth_agg: &[f64],
    bars: &BarSettings,
    seed: u64,
) -> Result<(ScoreTable, ReliabilityDiagram)> {
    let s = score_aggregated(cube, capacities, truth_agg, &default_levels())?;
    let table = ScoreTable::from_scores(&s, Scope::Aggregated, cube.kind, 1, cube.n_farms());
    let diagram = ReliabilityDiagram::from_scores(&s, Scope::Aggregated, cube.kind, bars, seed)?;
    Ok((table, diagram))
}

/// Copy of the cube with the sample index permuted independently per farm,
/// which keeps each farm's marginal (and temporal) law but removes
/// cross-farm dependence.
pub fn shuffle_per_farm(cube: &SampleCube, seed: u64) -> SampleCube {
    use rand::seq::SliceRandom;
    let (n, n_farms, _) = cube.samples.dim();
    let mut out = cube.clone();
    for j in 0..n_farms {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[j as u64]));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        for (k, &p) in perm.iter().enumerate() {
            let src = cube.samples.slice(ndarray::s![p, j, ..]);
            out.samples.slice_mut(ndarray::s![k, j, ..]).assign(&src);
        }
    }
    out
}
