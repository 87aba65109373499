//! `windcast`: fit, forecast, evaluate and simulate from the command line.
//!
//! Exit codes: 0 success, 1 usage or data error, 2 fit did not converge.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use windcast_core::model::ModelKind;
use windcast_core::par::Parallelism;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "windcast",
    version,
    about = "Probabilistic wind power forecasts from latent Gaussian models"
)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that reads a configuration.
#[derive(Debug, Args)]
struct Common {
    /// JSON configuration; defaults apply to absent keys.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Long-format CSV (farm_id, lat_or_x, lon_or_y, capacity, timestamp, power_mw).
    #[arg(short, long)]
    data: Option<PathBuf>,
    /// Output file or directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Model for fit and forecast: T, S-T or ST+T.
    #[arg(short, long)]
    model: Option<ModelKind>,
    /// Worker threads; 1 runs sequentially. Defaults to the available cores.
    #[arg(short, long)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print or write the full default configuration.
    InitConfig {
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Fit the model on the last full window and write the fit as JSON.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Also write the mesh in text format.
        #[arg(long)]
        mesh_out: Option<PathBuf>,
    },
    /// Write predictive quantiles per farm and for the aggregate.
    Forecast {
        #[command(flatten)]
        common: Common,
        /// Fit JSON written by `fit`.
        #[arg(short, long)]
        theta: PathBuf,
        /// Mesh written by `fit --mesh-out`; rebuilt from the data otherwise.
        #[arg(long)]
        mesh: Option<PathBuf>,
    },
    /// Rolling-window evaluation at the training locations.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Spatial cross-validation at held-out locations.
    Cv {
        #[command(flatten)]
        common: Common,
    },
    /// Simulation study on data drawn from the combined model.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Overrides simulation.n_datasets.
        #[arg(short, long)]
        n_datasets: Option<usize>,
    },
    /// Render the markdown summary of an existing report directory.
    Report {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.experiment.master_seed = s;
    }
    if let Some(m) = common.model {
        cfg.model = m;
    }
    match common.jobs {
        Some(0) => return Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(1) => cfg.experiment.parallelism = Parallelism::Sequential,
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Usage(format!("cannot start {n} worker threads: {e}")))?;
        }
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::InitConfig { out } => commands::init_config(out.as_deref()),
        Command::Fit { common, mesh_out } => commands::fit(&resolve(&common)?, mesh_out.as_deref()),
        Command::Forecast {
            common,
            theta,
            mesh,
        } => commands::forecast(&resolve(&common)?, &theta, mesh.as_deref()),
        Command::Evaluate { common } => commands::evaluate(&resolve(&common)?),
        Command::Cv { common } => commands::cross_validate(&resolve(&common)?),
        Command::Simulate { common, n_datasets } => {
            let cfg = resolve(&common)?;
            let n = n_datasets.unwrap_or(cfg.experiment.simulation.n_datasets);
            commands::simulate(&cfg, n)
        }
        Command::Report { input, out } => commands::report(&input, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
