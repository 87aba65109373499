use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::SecondsFormat;
use windcast_core::data::{filter_farms, load_portfolio, write_portfolio, Portfolio};
use windcast_core::eval::{aggregate_cube, empirical_quantile};
use windcast_core::harness::{
    initial_guess, run_rolling_eval, run_simulation_study, run_spatial_cv, simulated_dataset,
    stream, write_atomically, VerificationReport,
};
use windcast_core::inference::{fit_map, predictive_samples, FitResult};
use windcast_core::model::{assemble, AssemblyOptions, ModelKind, Target};
use windcast_core::par::derive_seed;
use windcast_core::spde::{build_mesh, Mesh};
use windcast_core::transform::TransformedSeries;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Write a single file via a sibling temporary file and a rename.
fn write_file_atomically(path: &Path, contents: &[u8]) -> CliResult<()> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(contents)?;
    tmp.persist(path).map_err(|e| CliError::Io(e.error))?;
    Ok(())
}

fn load_data(cfg: &RunConfig) -> CliResult<Portfolio> {
    let path = cfg.data_path()?;
    load_portfolio(path, cfg.coordinates).map_err(|source| CliError::Input {
        path: path.into(),
        source,
    })
}

/// Filtered farms over the last `train_len` steps.
fn last_window(p: &Portfolio, cfg: &RunConfig) -> CliResult<Portfolio> {
    let e = &cfg.experiment;
    let p = if e.max_zero_fraction < 1.0 {
        filter_farms(p, e.max_zero_fraction)?
    } else {
        p.clone()
    };
    if p.n_times() < e.train_len {
        return Err(windcast_core::Error::InsufficientData {
            needed: e.train_len,
            available: p.n_times(),
        }
        .into());
    }
    Ok(p.slice_times(p.n_times() - e.train_len, e.train_len))
}

fn mesh_for(
    kind: ModelKind,
    train: &Portfolio,
    cfg: &RunConfig,
    path: Option<&Path>,
) -> CliResult<Option<Mesh>> {
    if !kind.has_field() {
        return Ok(None);
    }
    match path {
        Some(p) => {
            let file = fs::File::open(p)?;
            let mesh = Mesh::read_text(std::io::BufReader::new(file)).map_err(|source| {
                CliError::Input {
                    path: p.into(),
                    source,
                }
            })?;
            Ok(Some(mesh))
        }
        None => Ok(Some(build_mesh(
            &train.locations(),
            &cfg.experiment.mesh.params(),
        )?)),
    }
}

fn assembly(cfg: &RunConfig, horizon: usize) -> AssemblyOptions {
    let e = &cfg.experiment;
    AssemblyOptions {
        knot_spacing: e.knot_spacing,
        horizon,
        priors: e.priors,
    }
}

pub fn init_config(out: Option<&Path>) -> CliResult<()> {
    let json = RunConfig::default().to_json()?;
    match out {
        Some(p) => write_file_atomically(p, json.as_bytes()),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

/// Fit the configured model on the last full window and write the result.
pub fn fit(cfg: &RunConfig, mesh_out: Option<&Path>) -> CliResult<()> {
    let out = cfg.out_path()?;
    let train = last_window(&load_data(cfg)?, cfg)?;
    let e = &cfg.experiment;
    let y = TransformedSeries::from_power(train.power(), e.epsilon)?.values;
    let mesh = mesh_for(cfg.model, &train, cfg, None)?;
    let model = assemble(
        cfg.model,
        &y,
        &train.locations(),
        mesh.as_ref(),
        &[],
        &assembly(cfg, 0),
    )?;
    let init = initial_guess(cfg.model, &y, e.mesh.prior_range, e.knot_spacing);
    let result = fit_map(&model, &init, &e.optimizer)?;
    write_file_atomically(out, result.to_json()?.as_bytes())?;
    if let (Some(path), Some(mesh)) = (mesh_out, &mesh) {
        let mut buf = Vec::new();
        mesh.write_text(&mut buf)?;
        write_file_atomically(path, &buf)?;
    }
    if !result.converged {
        return Err(CliError::NotConverged {
            evaluations: result.evaluations,
            path: out.into(),
        });
    }
    Ok(())
}

/// Per-farm and aggregated predictive quantiles after the last window, in
/// long format: one row per (target, lead time, level).
pub fn forecast(cfg: &RunConfig, theta_path: &Path, mesh_path: Option<&Path>) -> CliResult<()> {
    let out = cfg.out_path()?;
    let text = fs::read_to_string(theta_path)?;
    let fit: FitResult = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", theta_path.display())))?;
    if fit.kind != cfg.model {
        return Err(CliError::Usage(format!(
            "{} holds a model {} fit but the configuration selects model {}",
            theta_path.display(),
            fit.kind,
            cfg.model
        )));
    }
    fit.theta_hat
        .validate(fit.kind)
        .map_err(|e| CliError::Usage(format!("{}: {e}", theta_path.display())))?;
    let data = load_data(cfg)?;
    let train = last_window(&data, cfg)?;
    let e = &cfg.experiment;
    let y = TransformedSeries::from_power(train.power(), e.epsilon)?.values;
    let mesh = mesh_for(cfg.model, &train, cfg, mesh_path)?;
    let targets: Vec<Target> = (0..train.n_farms()).map(Target::Observed).collect();
    let model = assemble(
        cfg.model,
        &y,
        &train.locations(),
        mesh.as_ref(),
        &targets,
        &assembly(cfg, e.horizon),
    )?;
    let seed = derive_seed(e.master_seed, &[stream::SAMPLES]);
    let cube = predictive_samples(&model, &fit.theta_hat, e.n_samples, seed, e.parallelism)?;
    let caps = train.capacities();
    let agg = aggregate_cube(&cube, &caps)?;
    let total: f64 = caps.iter().sum();
    let last = train.time(train.n_times() - 1);

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["target", "h", "timestamp", "quantile", "power", "power_mw"])?;
    let mut emit =
        |target: &str, capacity: f64, column: &mut dyn FnMut(usize) -> Vec<f64>| -> CliResult<()> {
            for h in 1..=e.horizon {
                let mut s = column(h - 1);
                s.sort_by(f64::total_cmp);
                let stamp =
                    (last + train.step() * h as i32).to_rfc3339_opts(SecondsFormat::Secs, true);
                for &q in &cfg.quantiles {
                    let v = empirical_quantile(&s, q);
                    w.write_record([
                        target.to_string(),
                        h.to_string(),
                        stamp.clone(),
                        q.to_string(),
                        format!("{v:?}"),
                        format!("{:?}", v * capacity),
                    ])?;
                }
            }
            Ok(())
        };
    for (j, farm) in train.farms().iter().enumerate() {
        emit(&farm.id, farm.capacity, &mut |h| {
            cube.samples.slice(ndarray::s![.., j, h]).to_vec()
        })?;
    }
    emit("aggregate", total, &mut |h| agg.column(h).to_vec())?;
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    write_file_atomically(out, &bytes)
}

pub fn evaluate(cfg: &RunConfig) -> CliResult<()> {
    let out = cfg.out_path()?;
    let report = run_rolling_eval(&load_data(cfg)?, &cfg.experiment)?;
    report.write(out)?;
    Ok(())
}

pub fn cross_validate(cfg: &RunConfig) -> CliResult<()> {
    let out = cfg.out_path()?;
    let report = run_spatial_cv(&load_data(cfg)?, &cfg.experiment)?;
    report.write(out)?;
    Ok(())
}

/// Simulation study report plus every simulated dataset in the input format.
pub fn simulate(cfg: &RunConfig, n_datasets: usize) -> CliResult<()> {
    let out = cfg.out_path()?;
    let e = &cfg.experiment;
    let truth = e.simulation.truth;
    let report = run_simulation_study(e, &truth, n_datasets)?;
    write_atomically(out, |dir| {
        report.write_files(dir)?;
        let data = dir.join("datasets");
        fs::create_dir(&data)?;
        for d in 0..n_datasets {
            let (p, _, _) = simulated_dataset(e, &truth, d)?;
            write_portfolio(&p, fs::File::create(data.join(format!("dataset{d}.csv")))?)?;
        }
        Ok(())
    })?;
    Ok(())
}

/// Markdown summaries of every scenario report under `input`.
pub fn report(input: &Path, out: Option<&Path>) -> CliResult<()> {
    let candidates: Vec<PathBuf> = ["report.json", "rolling/report.json", "cv/report.json"]
        .iter()
        .map(|f| input.join(f))
        .collect();
    let mut text = String::new();
    for path in candidates.iter().filter(|p| p.is_file()) {
        let r: VerificationReport = serde_json::from_str(&fs::read_to_string(path)?)?;
        text.push_str(&r.summary_markdown()?);
        text.push('\n');
    }
    if text.is_empty() {
        return Err(CliError::Usage(format!(
            "no report.json under {}",
            input.display()
        )));
    }
    match out {
        Some(p) => write_file_atomically(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
