use thiserror::Error;
use windcast_sparse::SparseError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("duplicate observation for farm {farm} at {timestamp}")]
    Duplicate { farm: String, timestamp: String },
    #[error("value out of range at line {line}: {message}")]
    Range { line: u64, message: String },
    #[error("gap in time grid: farm {farm} has no observation at {timestamp}")]
    Gap { farm: String, timestamp: String },
    #[error("portfolio is empty after filtering")]
    EmptyPortfolio,
    #[error("insufficient data: need {needed} time steps, have {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("location ({x:.3}, {y:.3}) is outside the mesh")]
    Coverage { x: f64, y: f64 },
    #[error("time {time} is outside the knot span [{first}, {last}]")]
    Extrapolation { time: f64, first: f64, last: f64 },
    #[error("ill-conditioned precision (kappa = {kappa}): {detail}")]
    IllConditioned { kappa: f64, detail: String },
    #[error("nonstationary autoregression: |rho| = {0} >= 1")]
    Nonstationary(f64),
    #[error("conditioning failed at theta = {theta}: {source}")]
    Conditioning {
        theta: String,
        #[source]
        source: SparseError,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
