//! Portfolio ingestion, farm filtering and rolling windows.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, TimeDelta, Utc};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EARTH_RADIUS_KM: f64 = 6371.0;
/// Raw power may exceed capacity by this fraction before it is rejected.
const CAPACITY_SLACK: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Farm {
    pub id: String,
    /// Planar coordinates in km.
    pub location: [f64; 2],
    /// Nominal power in MW.
    pub capacity: f64,
}

/// Farms with normalized production on a regular time grid.
///
/// `power[[j, t]]` is farm `j` at time `start + t·step`, in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    farms: Vec<Farm>,
    start: DateTime<Utc>,
    step: TimeDelta,
    power: Array2<f64>,
}

impl Portfolio {
    pub fn new(
        farms: Vec<Farm>,
        start: DateTime<Utc>,
        step: TimeDelta,
        power: Array2<f64>,
    ) -> Result<Self> {
        if power.nrows() != farms.len() {
            return Err(Error::Dimension {
                expected: farms.len(),
                found: power.nrows(),
            });
        }
        if step <= TimeDelta::zero() {
            return Err(Error::Argument("time step must be positive".into()));
        }
        let mut ids: Vec<&str> = farms.iter().map(|f| f.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument("farm ids must be unique".into()));
        }
        for f in &farms {
            if !(f.capacity > 0.0) || !f.location.iter().all(|c| c.is_finite()) {
                return Err(Error::Argument(format!(
                    "farm {} has invalid capacity or location",
                    f.id
                )));
            }
        }
        if let Some(bad) = power.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Domain(format!(
                "normalized power {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            farms,
            start,
            step,
            power,
        })
    }

    pub fn farms(&self) -> &[Farm] {
        &self.farms
    }

    pub fn n_farms(&self) -> usize {
        self.farms.len()
    }

    pub fn n_times(&self) -> usize {
        self.power.ncols()
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn step(&self) -> TimeDelta {
        self.step
    }

    pub fn power(&self) -> &Array2<f64> {
        &self.power
    }

    pub fn time(&self, t: usize) -> DateTime<Utc> {
        self.start + self.step * t as i32
    }

    pub fn locations(&self) -> Vec<[f64; 2]> {
        self.farms.iter().map(|f| f.location).collect()
    }

    pub fn capacities(&self) -> Vec<f64> {
        self.farms.iter().map(|f| f.capacity).collect()
    }

    /// Farms at the given indices, in the given order.
    pub fn select_farms(&self, idx: &[usize]) -> Portfolio {
        let farms = idx.iter().map(|&j| self.farms[j].clone()).collect();
        let power = self.power.select(ndarray::Axis(0), idx);
        Portfolio {
            farms,
            start: self.start,
            step: self.step,
            power,
        }
    }

    /// Time steps `[offset, offset + len)`.
    pub fn slice_times(&self, offset: usize, len: usize) -> Portfolio {
        Portfolio {
            farms: self.farms.clone(),
            start: self.time(offset),
            step: self.step,
            power: self.power.slice(s![.., offset..offset + len]).to_owned(),
        }
    }
}

/// A training slice plus the horizon that immediately follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub offset: usize,
    pub train: Portfolio,
    /// Farms × horizon, normalized.
    pub truth: Array2<f64>,
}

impl Window {
    pub fn horizon(&self) -> usize {
        self.truth.ncols()
    }

    pub fn train_len(&self) -> usize {
        self.train.n_times()
    }
}

/// How the two coordinate columns are interpreted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateSystem {
    /// Already projected, in km.
    #[default]
    PlanarKm,
    /// Latitude and longitude in degrees, projected equirectangularly about
    /// the portfolio centroid.
    Geographic,
}

#[derive(Debug, serde::Deserialize)]
struct Row {
    farm_id: String,
    lat_or_x: f64,
    lon_or_y: f64,
    capacity: f64,
    timestamp: String,
    power_mw: f64,
}

const COLUMNS: [&str; 6] = [
    "farm_id",
    "lat_or_x",
    "lon_or_y",
    "capacity",
    "timestamp",
    "power_mw",
];

pub fn load_portfolio(path: &Path, coords: CoordinateSystem) -> Result<Portfolio> {
    let file = std::fs::File::open(path)?;
    read_portfolio(file, coords)
}

pub fn read_portfolio<R: std::io::Read>(reader: R, coords: CoordinateSystem) -> Result<Portfolio> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing column {col}"),
            });
        }
    }

    struct Raw {
        location: [f64; 2],
        capacity: f64,
        obs: HashMap<DateTime<Utc>, f64>,
    }
    let mut raw: BTreeMap<String, Raw> = BTreeMap::new();
    let mut all_times = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: Row = record
            .deserialize(Some(&headers))
            .map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
        let ts = DateTime::parse_from_rfc3339(&row.timestamp)
            .map_err(|e| Error::Parse {
                line,
                message: format!("timestamp {:?}: {e}", row.timestamp),
            })?
            .with_timezone(&Utc);
        if !(row.capacity > 0.0) || !row.capacity.is_finite() {
            return Err(Error::Range {
                line,
                message: format!("capacity {} must be positive", row.capacity),
            });
        }
        if !row.lat_or_x.is_finite() || !row.lon_or_y.is_finite() {
            return Err(Error::Parse {
                line,
                message: "non-finite coordinate".into(),
            });
        }
        if !(row.power_mw >= 0.0) {
            return Err(Error::Range {
                line,
                message: format!("power {} is negative", row.power_mw),
            });
        }
        if row.power_mw > row.capacity * (1.0 + CAPACITY_SLACK) {
            return Err(Error::Range {
                line,
                message: format!(
                    "power {} exceeds capacity {} by more than 1%",
                    row.power_mw, row.capacity
                ),
            });
        }
        let farm = raw.entry(row.farm_id.clone()).or_insert_with(|| Raw {
            location: [row.lat_or_x, row.lon_or_y],
            capacity: row.capacity,
            obs: HashMap::new(),
        });
        if farm.capacity != row.capacity || farm.location != [row.lat_or_x, row.lon_or_y] {
            return Err(Error::Parse {
                line,
                message: format!("farm {} changes capacity or location", row.farm_id),
            });
        }
        let x = (row.power_mw / row.capacity).min(1.0);
        if farm.obs.insert(ts, x).is_some() {
            return Err(Error::Duplicate {
                farm: row.farm_id,
                timestamp: fmt_time(ts),
            });
        }
        all_times.push(ts);
    }
    if raw.is_empty() {
        return Err(Error::EmptyPortfolio);
    }
    all_times.sort_unstable();
    all_times.dedup();
    let start = all_times[0];
    let step = all_times
        .windows(2)
        .map(|w| w[1] - w[0])
        .min()
        .ok_or(Error::InsufficientData {
            needed: 2,
            available: 1,
        })?;
    let end = *all_times.last().unwrap();
    let n_times =
        usize::try_from((end - start).num_seconds() / step.num_seconds()).unwrap_or(0) + 1;

    let projection = match coords {
        CoordinateSystem::PlanarKm => None,
        CoordinateSystem::Geographic => {
            let n = raw.len() as f64;
            let lat0 = raw.values().map(|r| r.location[0]).sum::<f64>() / n;
            let lon0 = raw.values().map(|r| r.location[1]).sum::<f64>() / n;
            Some((lat0, lon0))
        }
    };

    let mut farms = Vec::with_capacity(raw.len());
    let mut power = Array2::zeros((raw.len(), n_times));
    for (j, (id, r)) in raw.into_iter().enumerate() {
        for t in 0..n_times {
            let ts = start + step * t as i32;
            match r.obs.get(&ts) {
                Some(&x) => power[[j, t]] = x,
                None => {
                    return Err(Error::Gap {
                        farm: id,
                        timestamp: fmt_time(ts),
                    })
                }
            }
        }
        if r.obs.len() != n_times {
            // an observation off the grid
            let off = r
                .obs
                .keys()
                .find(|ts| ((**ts - start).num_seconds() % step.num_seconds()) != 0);
            return Err(Error::Parse {
                line: 0,
                message: format!(
                    "farm {id} has an off-grid timestamp {}",
                    off.map(|t| fmt_time(*t)).unwrap_or_default()
                ),
            });
        }
        let location = match projection {
            None => r.location,
            Some((lat0, lon0)) => project(r.location[0], r.location[1], lat0, lon0),
        };
        farms.push(Farm {
            id,
            location,
            capacity: r.capacity,
        });
    }
    Portfolio::new(farms, start, step, power)
}

fn project(lat: f64, lon: f64, lat0: f64, lon0: f64) -> [f64; 2] {
    let x = EARTH_RADIUS_KM * (lon - lon0).to_radians() * lat0.to_radians().cos();
    let y = EARTH_RADIUS_KM * (lat - lat0).to_radians();
    [x, y]
}

fn fmt_time(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Write in the long CSV format; power is denormalized by capacity.
pub fn write_portfolio<W: std::io::Write>(p: &Portfolio, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COLUMNS)?;
    for (j, f) in p.farms.iter().enumerate() {
        for t in 0..p.n_times() {
            w.write_record([
                f.id.clone(),
                format!("{}", f.location[0]),
                format!("{}", f.location[1]),
                format!("{}", f.capacity),
                fmt_time(p.time(t)),
                format!("{}", p.power[[j, t]] * f.capacity),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Keep farms whose fraction of exact zeros is at most `max_zero_fraction`.
pub fn filter_farms(p: &Portfolio, max_zero_fraction: f64) -> Result<Portfolio> {
    if !(0.0..=1.0).contains(&max_zero_fraction) {
        return Err(Error::Argument(format!(
            "max_zero_fraction {max_zero_fraction} outside [0, 1]"
        )));
    }
    let n = p.n_times() as f64;
    let keep: Vec<usize> = (0..p.n_farms())
        .filter(|&j| {
            let zeros = p.power.row(j).iter().filter(|&&x| x == 0.0).count();
            zeros as f64 / n <= max_zero_fraction
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyPortfolio);
    }
    Ok(p.select_farms(&keep))
}

/// Windows at offsets 0, stride, 2·stride, … that fit entirely in the series.
pub fn make_windows(
    p: &Portfolio,
    train_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    if train_len < 2 || horizon < 1 || stride < 1 {
        return Err(Error::Argument(format!(
            "need L >= 2, H >= 1, stride >= 1 (got {train_len}, {horizon}, {stride})"
        )));
    }
    let needed = train_len + horizon;
    if needed > p.n_times() {
        return Err(Error::InsufficientData {
            needed,
            available: p.n_times(),
        });
    }
    Ok((0..=p.n_times() - needed)
        .step_by(stride)
        .map(|offset| Window {
            offset,
            train: p.slice_times(offset, train_len),
            truth: p
                .power
                .slice(s![.., offset + train_len..offset + needed])
                .to_owned(),
        })
        .collect())
}
