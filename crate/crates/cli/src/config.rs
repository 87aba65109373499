use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use windcast_core::data::CoordinateSystem;
use windcast_core::harness::ExperimentConfig;
use windcast_core::model::ModelKind;

use crate::error::{CliError, CliResult};

/// Everything a run needs; command-line flags override these values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    /// Long-format CSV input.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Model used by `fit` and `forecast`.
    pub model: ModelKind,
    pub coordinates: CoordinateSystem,
    /// Levels written by `forecast`.
    pub quantiles: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            data: None,
            out: None,
            model: ModelKind::Combined,
            coordinates: CoordinateSystem::default(),
            quantiles: vec![0.05, 0.5, 0.95],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigIo {
            path: path.into(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| CliError::ConfigSyntax {
            path: path.into(),
            source,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        self.experiment.validate()?;
        if self.quantiles.is_empty()
            || self.quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0))
            || self.quantiles.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(CliError::Usage(format!(
                "quantiles must be increasing and inside (0, 1), got {:?}",
                self.quantiles
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn data_path(&self) -> CliResult<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Usage("no data file: pass --data or set \"data\"".into()))
    }

    pub fn out_path(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output path: pass --out or set \"out\"".into()))
    }
}
