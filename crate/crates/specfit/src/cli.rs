//! Command-line front end: simulate, fit, compare, and report subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::{
    agls_fit, agls_scale_fit, agmle_ar1, agmle_hetero, gls_fit, ols_fit, EstimatorConfig,
};
use crate::io;
use crate::oracle::{oracle_fit, OracleConfig};
use crate::report::{self, RunReport};
use crate::simulate::{gen_mixtures, gen_sources, ScaleModel, SimConfig};
use crate::spectra::{MixtureSet, SourceLibrary};

#[derive(Parser)]
#[command(
    name = "specfit",
    version,
    about = "Distortion-robust spectral data fitting: simulate mixtures, fit weights, compare methods"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a bundled preset or a config file
    Simulate {
        /// Config file in the flat `key = value` format
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Bundled preset: synthetic-iid | synthetic-ar1 | synthetic-scale | nmr-like
        #[arg(long)]
        preset: Option<String>,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// Override the seed in the config
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit mixture weights with one of the estimators
    Fit {
        #[arg(long, value_enum)]
        method: Method,
        /// Directory holding mixtures.csv and sources.csv
        #[arg(long)]
        data: PathBuf,
        /// Report directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Augmented-basis truncation order (1 or 2, agls only)
        #[arg(long)]
        taylor_order: Option<u32>,
        /// Samples trimmed from each grid end before fitting
        #[arg(long)]
        trim: Option<usize>,
        /// Oracle shift search half-range
        #[arg(long)]
        xi_max: Option<f64>,
        /// Oracle shift candidate spacing
        #[arg(long)]
        xi_step: Option<f64>,
    },
    /// Compare two or more fit reports produced on the same dataset
    Compare {
        /// Report directories written by `fit`
        reports: Vec<PathBuf>,
        /// Output directory for the comparison tables
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the summary of a stored fit report
    Report {
        /// Report directory written by `fit`
        dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Ols,
    Gls,
    Agls,
    AglsScale,
    AgmleHetero,
    AgmleAr1,
    Oracle,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ols => "ols",
            Method::Gls => "gls",
            Method::Agls => "agls",
            Method::AglsScale => "agls-scale",
            Method::AgmleHetero => "agmle-hetero",
            Method::AgmleAr1 => "agmle-ar1",
            Method::Oracle => "oracle",
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            preset,
            out,
            seed,
        } => {
            let (text, origin) = match (&config, &preset) {
                (Some(path), None) => (fs::read_to_string(path)?, path.display().to_string()),
                (None, Some(name)) => {
                    let text = io::presets::get(name).ok_or_else(|| {
                        Error::invalid(format!(
                            "unknown preset '{name}'; available: {}",
                            io::presets::NAMES.join(", ")
                        ))
                    })?;
                    (text.to_string(), format!("preset:{name}"))
                }
                _ => {
                    return Err(Error::invalid(
                        "exactly one of --config or --preset is required",
                    ))
                }
            };
            let mut cfg = io::config::parse_sim_config(&text, &origin)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cmd_simulate(&cfg, &out)
        }
        Command::Fit {
            method,
            data,
            out,
            max_iter,
            tol,
            taylor_order,
            trim,
            xi_max,
            xi_step,
        } => {
            let mut est_cfg = EstimatorConfig::default();
            if let Some(v) = max_iter {
                est_cfg.max_iterations = v;
            }
            if let Some(v) = tol {
                est_cfg.tol = v;
            }
            if let Some(v) = taylor_order {
                est_cfg.taylor_order = v;
            }
            if let Some(v) = trim {
                est_cfg.endpoint_trim = v;
            }
            let mut oracle_cfg = OracleConfig::default();
            if let Some(v) = xi_max {
                oracle_cfg.xi_max = v;
            }
            if let Some(v) = xi_step {
                oracle_cfg.xi_step = v;
            }
            let report = cmd_fit(method, &data, &out, &est_cfg, &oracle_cfg)?;
            let truth = read_truth(&data)?;
            print!("{}", report::summary_table(&report, truth.as_ref())?);
            Ok(())
        }
        Command::Compare { reports, out } => {
            let table = cmd_compare(&reports, &out)?;
            print!("{table}");
            Ok(())
        }
        Command::Report { dir } => {
            let report = report::read_report(&dir)?;
            let truth = read_truth(Path::new(&report.data_dir)).unwrap_or(None);
            print!("{}", report::summary_table(&report, truth.as_ref())?);
            Ok(())
        }
    }
}

/// Write the dataset files for one simulation config. Partial outputs are
/// removed when any step fails.
pub fn cmd_simulate(cfg: &SimConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<()> {
        let lib = gen_sources(cfg)?;
        let (mix, truth) = gen_mixtures(&lib, cfg)?;

        let mut write = |name: &str, action: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
            let path = out.join(name);
            action(&path)?;
            written.push(path);
            Ok(())
        };
        write("sources.csv", &|p| io::write_source_library_csv(p, &lib))?;
        write("sources_deriv.csv", &|p| io::write_derivatives_csv(p, &lib))?;
        write("mixtures.csv", &|p| io::write_mixtures_csv(p, &mix))?;
        write("truth_A.csv", &|p| io::write_weights_csv(p, &truth.a))?;
        write("truth_xi.csv", &|p| io::write_weights_csv(p, &truth.xi))?;
        if cfg.scale_model != ScaleModel::None {
            let scales = DMatrix::from_fn(1, truth.scales.len(), |_, j| truth.scales[j]);
            write("truth_v.csv", &|p| io::write_weights_csv(p, &scales))?;
        }
        write("config.txt", &|p| {
            fs::write(p, io::config::render_sim_config(cfg)).map_err(Error::from)
        })?;
        Ok(())
    })();
    if result.is_err() {
        for path in &written {
            let _ = fs::remove_file(path);
        }
    }
    result
}

fn load_data(data: &Path) -> Result<(MixtureSet, SourceLibrary, String)> {
    let mix_path = data.join("mixtures.csv");
    let src_path = data.join("sources.csv");
    for p in [&mix_path, &src_path] {
        if !p.exists() {
            return Err(Error::invalid(format!("missing data file {}", p.display())));
        }
    }
    let mix = io::read_mixtures_csv(&mix_path)?;
    let lib = io::read_source_library_csv(&src_path)?;
    let fingerprint = report::fingerprint_files(&[&mix_path, &src_path])?;
    Ok((mix, lib, fingerprint))
}

fn read_truth(data: &Path) -> Result<Option<DMatrix<f64>>> {
    let path = data.join("truth_A.csv");
    if path.exists() {
        Ok(Some(io::read_weights_csv(&path)?))
    } else {
        Ok(None)
    }
}

/// Covariance estimate for the feasible GLS: per-channel variance of the
/// ordinary-least-squares residuals, floored away from zero.
fn residual_covariance(mix: &MixtureSet, lib: &SourceLibrary) -> Result<DMatrix<f64>> {
    let ols = ols_fit(mix, lib)?;
    let resid = mix.data() - &ols.a_hat * lib.source_matrix();
    let m = mix.m() as f64;
    let mut diag = DVector::from_fn(mix.p(), |j, _| resid.column(j).norm_squared() / m);
    let floor = 1e-12 * diag.max().max(1e-300);
    for v in diag.iter_mut() {
        *v = v.max(floor);
    }
    Ok(DMatrix::from_diagonal(&diag))
}

/// Run one estimator on a data directory and persist the report.
pub fn cmd_fit(
    method: Method,
    data: &Path,
    out: &Path,
    est_cfg: &EstimatorConfig,
    oracle_cfg: &OracleConfig,
) -> Result<RunReport> {
    let (mix, lib, fingerprint) = load_data(data)?;
    let started = Instant::now();
    let fit = match method {
        Method::Ols => ols_fit(&mix, &lib),
        Method::Gls => {
            let q = residual_covariance(&mix, &lib)?;
            gls_fit(&mix, &lib, &q)
        }
        Method::Agls => agls_fit(&mix, &lib, est_cfg),
        Method::AglsScale => agls_scale_fit(&mix, &lib, est_cfg),
        Method::AgmleHetero => agmle_hetero(&mix, &lib, est_cfg),
        Method::AgmleAr1 => agmle_ar1(&mix, &lib, est_cfg),
        Method::Oracle => oracle_fit(&mix, &lib, oracle_cfg),
    }
    .map_err(|e| annotate_method(method, e))?;
    let wall = started.elapsed().as_secs_f64();
    let run = RunReport::from_fit(
        method.name(),
        &fit,
        wall,
        &data.display().to_string(),
        &fingerprint,
    );
    report::write_report(out, &run)?;
    Ok(run)
}

fn annotate_method(method: Method, e: Error) -> Error {
    match e {
        Error::RankDeficient { index, detail } => Error::RankDeficient {
            index,
            detail: format!("[{}] {detail}", method.name()),
        },
        Error::NotPositiveDefinite(msg) => {
            Error::NotPositiveDefinite(format!("[{}] {msg}", method.name()))
        }
        Error::InvalidInput(msg) => Error::InvalidInput(format!("[{}] {msg}", method.name())),
        other => other,
    }
}

/// Compare stored reports and write the comparison tables; returns the
/// printable table.
pub fn cmd_compare(report_dirs: &[PathBuf], out: &Path) -> Result<String> {
    if report_dirs.len() < 2 {
        return Err(Error::invalid("compare needs at least two report directories"));
    }
    let reports: Vec<RunReport> = report_dirs
        .iter()
        .map(|d| report::read_report(d))
        .collect::<Result<Vec<_>>>()?;
    let truth = read_truth(Path::new(&reports[0].data_dir)).unwrap_or(None);
    let cmp = report::compare(&reports, truth.as_ref())?;
    fs::create_dir_all(out)?;
    fs::write(out.join("compare_summary.csv"), &cmp.summary_csv)?;
    fs::write(out.join("compare_params.csv"), &cmp.params_csv)?;
    fs::write(out.join("compare_long.csv"), &cmp.long_csv)?;
    Ok(cmp.table)
}
