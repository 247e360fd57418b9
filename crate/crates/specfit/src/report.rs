//! Fit reports on disk and method-comparison tables.
//!
//! A report directory holds three CSV files: `fit_A.csv` (the weight
//! estimates), `fit_params.csv` (long-format parameter estimates) and
//! `fit_diag.csv` (run diagnostics including a fingerprint of the fitted
//! data). The round trip through these files is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estimators::FitResult;
use crate::io::{self, fmt_float};

/// Everything recorded about one estimator run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub method: String,
    pub a_hat: DMatrix<f64>,
    pub sigma_hat: Option<Vec<f64>>,
    pub tau_hat: Option<f64>,
    pub rho_hat: Option<Vec<f64>>,
    pub scale_hat: Option<Vec<f64>>,
    pub final_loglik: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate_rows: Vec<usize>,
    pub wall_seconds: f64,
    /// Directory the mixtures/sources were read from.
    pub data_dir: String,
    /// Fingerprint of the fitted data files; comparisons require equality.
    pub data_fingerprint: String,
}

impl RunReport {
    pub fn from_fit(
        method: &str,
        fit: &FitResult,
        wall_seconds: f64,
        data_dir: &str,
        data_fingerprint: &str,
    ) -> Self {
        RunReport {
            method: method.to_string(),
            a_hat: fit.a_hat.clone(),
            sigma_hat: fit.sigma_hat.clone(),
            tau_hat: fit.tau_hat,
            rho_hat: fit.rho_hat.clone(),
            scale_hat: fit.scale_hat.clone(),
            final_loglik: fit.final_loglik,
            iterations: fit.iterations,
            converged: fit.converged,
            degenerate_rows: fit.degenerate_rows.clone(),
            wall_seconds,
            data_dir: data_dir.to_string(),
            data_fingerprint: data_fingerprint.to_string(),
        }
    }
}

/// FNV-1a over the raw bytes of the data files a fit consumed.
pub fn fingerprint_files(paths: &[&Path]) -> Result<String> {
    let mut hash: u64 = 0xcbf29ce484222325;
    for path in paths {
        let bytes = fs::read(path)?;
        for b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    Ok(format!("{hash:016x}"))
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_weights_csv(&dir.join("fit_A.csv"), &report.a_hat)?;

    let mut params = String::from("name,index,value\n");
    let mut push = |name: &str, index: Option<usize>, value: String| {
        let idx = index.map(|i| (i + 1).to_string()).unwrap_or_default();
        let _ = writeln!(params, "{name},{idx},{value}");
    };
    if let Some(sigma) = &report.sigma_hat {
        for (k, s) in sigma.iter().enumerate() {
            push("sigma_hat", Some(k), fmt_float(*s));
        }
    }
    if let Some(tau) = report.tau_hat {
        push("tau_hat", None, fmt_float(tau));
    }
    if let Some(rho) = &report.rho_hat {
        for (k, r) in rho.iter().enumerate() {
            push("rho_hat", Some(k), fmt_float(*r));
        }
    }
    if let Some(scale) = &report.scale_hat {
        for (k, v) in scale.iter().enumerate() {
            push("scale_hat", Some(k), fmt_float(*v));
        }
    }
    if let Some(ll) = report.final_loglik {
        push("loglik", None, fmt_float(ll));
    }
    fs::write(dir.join("fit_params.csv"), params)?;

    let degenerate = report
        .degenerate_rows
        .iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join(";");
    let diag = format!(
        "key,value\nmethod,{}\niterations,{}\nconverged,{}\nwall_seconds,{}\ndata_dir,{}\ndata_fingerprint,{}\ndegenerate_rows,{}\n",
        report.method,
        report.iterations,
        report.converged,
        fmt_float(report.wall_seconds),
        report.data_dir,
        report.data_fingerprint,
        degenerate
    );
    fs::write(dir.join("fit_diag.csv"), diag)?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    let a_hat = io::read_weights_csv(&dir.join("fit_A.csv"))?;

    let params_path = dir.join("fit_params.csv");
    let params_name = params_path.display().to_string();
    let text = fs::read_to_string(&params_path)?;
    let mut sigma: Vec<(usize, f64)> = Vec::new();
    let mut rho: Vec<(usize, f64)> = Vec::new();
    let mut scale: Vec<(usize, f64)> = Vec::new();
    let mut tau = None;
    let mut loglik = None;
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(Error::Parse {
                path: params_name.clone(),
                line: idx + 1,
                msg: "expected 'name,index,value'".into(),
            });
        }
        let value: f64 = cells[2].parse().map_err(|_| Error::Parse {
            path: params_name.clone(),
            line: idx + 1,
            msg: format!("bad value '{}'", cells[2]),
        })?;
        let index = if cells[1].is_empty() {
            None
        } else {
            Some(cells[1].parse::<usize>().map_err(|_| Error::Parse {
                path: params_name.clone(),
                line: idx + 1,
                msg: format!("bad index '{}'", cells[1]),
            })?)
        };
        match (cells[0], index) {
            ("sigma_hat", Some(k)) => sigma.push((k, value)),
            ("rho_hat", Some(k)) => rho.push((k, value)),
            ("scale_hat", Some(k)) => scale.push((k, value)),
            ("tau_hat", None) => tau = Some(value),
            ("loglik", None) => loglik = Some(value),
            (name, _) => {
                return Err(Error::Parse {
                    path: params_name.clone(),
                    line: idx + 1,
                    msg: format!("unknown parameter row '{name}'"),
                })
            }
        }
    }
    let collect = |mut v: Vec<(usize, f64)>| -> Option<Vec<f64>> {
        if v.is_empty() {
            return None;
        }
        v.sort_by_key(|(k, _)| *k);
        Some(v.into_iter().map(|(_, x)| x).collect())
    };

    let diag_path = dir.join("fit_diag.csv");
    let diag_name = diag_path.display().to_string();
    let diag_text = fs::read_to_string(&diag_path)?;
    let mut method = None;
    let mut iterations = None;
    let mut converged = None;
    let mut wall = None;
    let mut data_dir = None;
    let mut fingerprint = None;
    let mut degenerate = Vec::new();
    for (idx, line) in diag_text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line.split_once(',').ok_or_else(|| Error::Parse {
            path: diag_name.clone(),
            line: idx + 1,
            msg: "expected 'key,value'".into(),
        })?;
        match key {
            "method" => method = Some(value.to_string()),
            "iterations" => iterations = value.parse::<usize>().ok(),
            "converged" => converged = value.parse::<bool>().ok(),
            "wall_seconds" => wall = value.parse::<f64>().ok(),
            "data_dir" => data_dir = Some(value.to_string()),
            "data_fingerprint" => fingerprint = Some(value.to_string()),
            "degenerate_rows" => {
                degenerate = value
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<usize>().map_err(|_| Error::Parse {
                            path: diag_name.clone(),
                            line: idx + 1,
                            msg: format!("bad row index '{s}'"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            other => {
                return Err(Error::Parse {
                    path: diag_name.clone(),
                    line: idx + 1,
                    msg: format!("unknown diagnostic key '{other}'"),
                })
            }
        }
    }
    let missing = |what: &str| Error::Parse {
        path: diag_name.clone(),
        line: 0,
        msg: format!("missing diagnostic '{what}'"),
    };
    Ok(RunReport {
        method: method.ok_or_else(|| missing("method"))?,
        a_hat,
        sigma_hat: collect(sigma),
        tau_hat: tau,
        rho_hat: collect(rho),
        scale_hat: collect(scale),
        final_loglik: loglik,
        iterations: iterations.ok_or_else(|| missing("iterations"))?,
        converged: converged.ok_or_else(|| missing("converged"))?,
        degenerate_rows: degenerate,
        wall_seconds: wall.ok_or_else(|| missing("wall_seconds"))?,
        data_dir: data_dir.ok_or_else(|| missing("data_dir"))?,
        data_fingerprint: fingerprint.ok_or_else(|| missing("data_fingerprint"))?,
    })
}

/// Weight-error summary of one method against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSummary {
    pub mean_abs: f64,
    pub max_abs: f64,
    pub total_abs: f64,
}

pub fn weight_errors(a_hat: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<ErrorSummary> {
    if a_hat.shape() != truth.shape() {
        return Err(Error::invalid(format!(
            "estimate is {}x{} but truth is {}x{}",
            a_hat.nrows(),
            a_hat.ncols(),
            truth.nrows(),
            truth.ncols()
        )));
    }
    let diff = (a_hat - truth).abs();
    let total = diff.sum();
    Ok(ErrorSummary {
        mean_abs: total / (truth.nrows() * truth.ncols()) as f64,
        max_abs: diff.max(),
        total_abs: total,
    })
}

/// Cross-method comparison on one dataset.
pub struct Comparison {
    pub summary_csv: String,
    pub params_csv: String,
    pub long_csv: String,
    pub table: String,
}

/// Build the comparison artifacts for reports that all fitted the same data.
pub fn compare(reports: &[RunReport], truth: Option<&DMatrix<f64>>) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::invalid("comparison needs at least two reports"));
    }
    let fp = &reports[0].data_fingerprint;
    let shape = reports[0].a_hat.shape();
    for r in &reports[1..] {
        if &r.data_fingerprint != fp {
            return Err(Error::invalid(format!(
                "data fingerprints do not match: '{}' fitted {} but '{}' fitted {}",
                reports[0].method, fp, r.method, r.data_fingerprint
            )));
        }
        if r.a_hat.shape() != shape {
            return Err(Error::invalid("reports have mismatched weight shapes"));
        }
    }
    if let Some(t) = truth {
        if t.shape() != shape {
            return Err(Error::invalid("ground truth shape does not match reports"));
        }
    }

    let mut summary = String::from("method,mean_abs_error,max_abs_error,total_abs_error\n");
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<14} {:>12} {:>12} {:>12} {:>6} {:>10}",
        "method", "mean|err|", "max|err|", "total|err|", "iters", "wall(s)"
    );
    for r in reports {
        match truth {
            Some(t) => {
                let e = weight_errors(&r.a_hat, t)?;
                let _ = writeln!(
                    summary,
                    "{},{},{},{}",
                    r.method,
                    fmt_float(e.mean_abs),
                    fmt_float(e.max_abs),
                    fmt_float(e.total_abs)
                );
                let _ = writeln!(
                    table,
                    "{:<14} {:>12.6} {:>12.6} {:>12.6} {:>6} {:>10.3}",
                    r.method, e.mean_abs, e.max_abs, e.total_abs, r.iterations, r.wall_seconds
                );
            }
            None => {
                let _ = writeln!(summary, "{},,,", r.method);
                let _ = writeln!(
                    table,
                    "{:<14} {:>12} {:>12} {:>12} {:>6} {:>10.3}",
                    r.method, "-", "-", "-", r.iterations, r.wall_seconds
                );
            }
        }
    }

    let mut params = String::from("method,param,index,value\n");
    for r in reports {
        if let Some(sigma) = &r.sigma_hat {
            for (k, v) in sigma.iter().enumerate() {
                let _ = writeln!(params, "{},sigma_hat,{},{}", r.method, k + 1, fmt_float(*v));
            }
        }
        if let Some(tau) = r.tau_hat {
            let _ = writeln!(params, "{},tau_hat,,{}", r.method, fmt_float(tau));
        }
        if let Some(rho) = &r.rho_hat {
            for (k, v) in rho.iter().enumerate() {
                let _ = writeln!(params, "{},rho_hat,{},{}", r.method, k + 1, fmt_float(*v));
            }
        }
        if let Some(scale) = &r.scale_hat {
            for (k, v) in scale.iter().enumerate() {
                let _ = writeln!(params, "{},scale_hat,{},{}", r.method, k + 1, fmt_float(*v));
            }
        }
    }

    // Plot-ready long format: one line per (row, method, source).
    let mut long = String::from("row,method,source,estimate,truth\n");
    let (m, n) = shape;
    for r in reports {
        for i in 0..m {
            for j in 0..n {
                let t = truth
                    .map(|t| fmt_float(t[(i, j)]))
                    .unwrap_or_default();
                let _ = writeln!(
                    long,
                    "{},{},{},{},{}",
                    i + 1,
                    r.method,
                    j + 1,
                    fmt_float(r.a_hat[(i, j)]),
                    t
                );
            }
        }
    }

    Ok(Comparison {
        summary_csv: summary,
        params_csv: params,
        long_csv: long,
        table,
    })
}

/// Human-readable single-run summary printed by the fit and report commands.
pub fn summary_table(report: &RunReport, truth: Option<&DMatrix<f64>>) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "method:        {}", report.method);
    let _ = writeln!(
        out,
        "weights:       {} rows x {} sources",
        report.a_hat.nrows(),
        report.a_hat.ncols()
    );
    if let Some(t) = truth {
        let e = weight_errors(&report.a_hat, t)?;
        let _ = writeln!(
            out,
            "weight error:  mean |err| = {:.6}, max |err| = {:.6}, total = {:.6}",
            e.mean_abs, e.max_abs, e.total_abs
        );
    }
    if let Some(sigma) = &report.sigma_hat {
        let rendered: Vec<String> = sigma.iter().map(|s| format!("{s:.4}")).collect();
        let _ = writeln!(out, "sigma_hat:     [{}]", rendered.join(", "));
    }
    if let Some(tau) = report.tau_hat {
        let _ = writeln!(out, "tau_hat:       {tau:.4}");
    }
    if let Some(rho) = &report.rho_hat {
        let rendered: Vec<String> = rho.iter().map(|r| format!("{r:.4}")).collect();
        let _ = writeln!(out, "rho_hat:       [{}]", rendered.join(", "));
    }
    if let Some(scale) = &report.scale_hat {
        let rendered: Vec<String> = scale.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(out, "scale_hat:     [{}]", rendered.join(", "));
    }
    if let Some(ll) = report.final_loglik {
        let _ = writeln!(out, "log-likelihood: {ll:.4}");
    }
    let _ = writeln!(
        out,
        "iterations:    {} (converged: {})",
        report.iterations, report.converged
    );
    if !report.degenerate_rows.is_empty() {
        let _ = writeln!(out, "degenerate rows: {:?}", report.degenerate_rows);
    }
    let _ = writeln!(out, "wall time:     {:.3} s", report.wall_seconds);
    Ok(out)
}
