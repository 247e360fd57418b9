//! File formats: CSV matrices and spectra, the flat `key = value` config
//! format, and the bundled experiment presets.
//!
//! All floating-point values are serialized with 17 significant digits so a
//! write-then-read round trip is bit-identical.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::simulate::{PeakShape, PeakSpec, ScaleModel, ShiftModel, SimConfig};
use crate::spectra::{Grid, MixtureSet, SourceLibrary, Spectrum, GRID_RTOL};

/// 17 significant digits: enough to reproduce any f64 exactly.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_float(path: &str, line: usize, field: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        msg: format!("expected a number, got '{}'", field.trim()),
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Reconstruct a uniform grid from explicit abscissae, enforcing strictly
/// increasing, equally spaced values within a relative tolerance.
fn grid_from_abscissae(path: &str, nu: &[f64]) -> Result<Grid> {
    if nu.len() < 3 {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 1,
            msg: format!("need at least 3 grid points, got {}", nu.len()),
        });
    }
    let count = nu.len();
    let step = (nu[count - 1] - nu[0]) / (count - 1) as f64;
    if !(step > 0.0) {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 1,
            msg: "grid values must be strictly increasing".into(),
        });
    }
    for w in 0..count - 1 {
        let gap = nu[w + 1] - nu[w];
        if (gap - step).abs() > GRID_RTOL * step {
            return Err(Error::Parse {
                path: path.to_string(),
                line: 1,
                msg: format!(
                    "grid spacing {gap} at index {w} deviates from uniform step {step}"
                ),
            });
        }
    }
    Grid::new(nu[0], step, count).map_err(|e| Error::Parse {
        path: path.to_string(),
        line: 1,
        msg: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Single spectrum: `nu,value`
// ---------------------------------------------------------------------------

pub fn write_spectrum_csv(path: &Path, s: &Spectrum) -> Result<()> {
    let mut out = String::from("nu,value\n");
    for (j, v) in s.values().iter().enumerate() {
        out.push_str(&fmt_float(s.grid().abscissa(j)));
        out.push(',');
        out.push_str(&fmt_float(*v));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_spectrum_csv(path: &Path) -> Result<Spectrum> {
    let name = path.display().to_string();
    let lines = read_lines(path)?;
    let mut it = lines.iter().enumerate();
    match it.next() {
        Some((_, header)) if header.trim() == "nu,value" => {}
        _ => {
            return Err(Error::Parse {
                path: name,
                line: 1,
                msg: "expected header 'nu,value'".into(),
            })
        }
    }
    let mut nu = Vec::new();
    let mut values = Vec::new();
    for (idx, line) in it {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.splitn(2, ',');
        let (a, b) = (fields.next().unwrap_or(""), fields.next().unwrap_or(""));
        nu.push(parse_float(&name, idx + 1, a)?);
        values.push(parse_float(&name, idx + 1, b)?);
    }
    let grid = grid_from_abscissae(&name, &nu)?;
    Spectrum::new(grid, values).map_err(|e| Error::Parse {
        path: name,
        line: 1,
        msg: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Spectra files: header `nu,<nu_1>..<nu_p>`, one labeled spectrum per row
// ---------------------------------------------------------------------------

pub fn write_spectra_csv(path: &Path, grid: &Grid, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut out = String::from("nu");
    for j in 0..grid.count() {
        out.push(',');
        out.push_str(&fmt_float(grid.abscissa(j)));
    }
    out.push('\n');
    for (label, values) in rows {
        out.push_str(label);
        for v in values {
            out.push(',');
            out.push_str(&fmt_float(*v));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_spectra_rows(path: &Path, header_tag: &str) -> Result<(Grid, Vec<Vec<f64>>)> {
    let name = path.display().to_string();
    let lines = read_lines(path)?;
    let header = lines.first().ok_or_else(|| Error::Parse {
        path: name.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let mut cells = header.split(',');
    let first = cells.next().unwrap_or("");
    if first.trim() != header_tag {
        return Err(Error::Parse {
            path: name,
            line: 1,
            msg: format!("expected header to start with '{header_tag}', got '{first}'"),
        });
    }
    let nu: Vec<f64> = cells
        .map(|c| parse_float(&name, 1, c))
        .collect::<Result<_>>()?;
    let grid = grid_from_abscissae(&name, &nu)?;
    let mut rows = Vec::new();
    for (idx, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let _label = cells.next();
        let values: Vec<f64> = cells
            .map(|c| parse_float(&name, idx + 1, c))
            .collect::<Result<_>>()?;
        if values.len() != grid.count() {
            return Err(Error::Parse {
                path: name,
                line: idx + 1,
                msg: format!(
                    "row has {} values, grid has {} points",
                    values.len(),
                    grid.count()
                ),
            });
        }
        rows.push(values);
    }
    Ok((grid, rows))
}

pub fn write_source_library_csv(path: &Path, lib: &SourceLibrary) -> Result<()> {
    let rows: Vec<(String, Vec<f64>)> = lib
        .sources()
        .iter()
        .enumerate()
        .map(|(j, s)| (format!("source_{}", j + 1), s.values().to_vec()))
        .collect();
    write_spectra_csv(path, lib.grid(), &rows)
}

pub fn write_derivatives_csv(path: &Path, lib: &SourceLibrary) -> Result<()> {
    let rows: Vec<(String, Vec<f64>)> = lib
        .derivatives()
        .iter()
        .enumerate()
        .map(|(j, s)| (format!("source_{}_deriv", j + 1), s.values().to_vec()))
        .collect();
    write_spectra_csv(path, lib.grid(), &rows)
}

pub fn read_source_library_csv(path: &Path) -> Result<SourceLibrary> {
    let name = path.display().to_string();
    let (grid, rows) = read_spectra_rows(path, "nu")?;
    let spectra: Vec<Spectrum> = rows
        .into_iter()
        .map(|v| Spectrum::new(grid, v))
        .collect::<Result<_>>()
        .map_err(|e| Error::Parse {
            path: name.clone(),
            line: 1,
            msg: e.to_string(),
        })?;
    SourceLibrary::new(spectra).map_err(|e| Error::Parse {
        path: name,
        line: 1,
        msg: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Mixtures: header `row_id,<nu_1>..<nu_p>`, one observation per row
// ---------------------------------------------------------------------------

pub fn write_mixtures_csv(path: &Path, x: &MixtureSet) -> Result<()> {
    let mut out = String::from("row_id");
    for j in 0..x.grid().count() {
        out.push(',');
        out.push_str(&fmt_float(x.grid().abscissa(j)));
    }
    out.push('\n');
    for i in 0..x.m() {
        out.push_str(&(i + 1).to_string());
        for j in 0..x.p() {
            out.push(',');
            out.push_str(&fmt_float(x.data()[(i, j)]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_mixtures_csv(path: &Path) -> Result<MixtureSet> {
    let name = path.display().to_string();
    let (grid, rows) = read_spectra_rows(path, "row_id")?;
    if rows.is_empty() {
        return Err(Error::Parse {
            path: name,
            line: 1,
            msg: "no observation rows".into(),
        });
    }
    let data = DMatrix::from_fn(rows.len(), grid.count(), |i, j| rows[i][j]);
    MixtureSet::new(grid, data).map_err(|e| Error::Parse {
        path: name,
        line: 1,
        msg: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Weight-shaped matrices (m x n): header `row_id,source_1..source_n`
// ---------------------------------------------------------------------------

pub fn write_weights_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::from("row_id");
    for j in 0..m.ncols() {
        out.push_str(&format!(",source_{}", j + 1));
    }
    out.push('\n');
    for i in 0..m.nrows() {
        out.push_str(&(i + 1).to_string());
        for j in 0..m.ncols() {
            out.push(',');
            out.push_str(&fmt_float(m[(i, j)]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_weights_csv(path: &Path) -> Result<DMatrix<f64>> {
    let name = path.display().to_string();
    let lines = read_lines(path)?;
    let header = lines.first().ok_or_else(|| Error::Parse {
        path: name.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    if !header.starts_with("row_id") {
        return Err(Error::Parse {
            path: name,
            line: 1,
            msg: "expected header starting with 'row_id'".into(),
        });
    }
    let n = header.split(',').count() - 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let _id = cells.next();
        let values: Vec<f64> = cells
            .map(|c| parse_float(&name, idx + 1, c))
            .collect::<Result<_>>()?;
        if values.len() != n {
            return Err(Error::Parse {
                path: name,
                line: idx + 1,
                msg: format!("expected {n} values, got {}", values.len()),
            });
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: name,
            line: 1,
            msg: "no data rows".into(),
        });
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

// ---------------------------------------------------------------------------
// Flat `key = value` config format
// ---------------------------------------------------------------------------

pub mod config {
    use super::*;
    use std::collections::BTreeMap;

    /// Parse a simulation config from the flat text format. `#` starts a
    /// comment; peak lists use repeated `peak.<source>.<index>.<field>`
    /// keys with 1-based indices.
    pub fn parse_sim_config(text: &str, path: &str) -> Result<SimConfig> {
        let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let eq = line.find('=').ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line: idx + 1,
                msg: "expected 'key = value'".into(),
            })?;
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: idx + 1,
                    msg: "empty key or value".into(),
                });
            }
            if entries.insert(key.clone(), (value, idx + 1)).is_some() {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: idx + 1,
                    msg: format!("duplicate key '{key}'"),
                });
            }
        }

        let mut used: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        let mut take = |key: &str| -> Option<(String, usize)> {
            used.insert(key.to_string());
            entries.get(key).cloned()
        };
        let require = |val: Option<(String, usize)>, key: &str| -> Result<(String, usize)> {
            val.ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line: 0,
                msg: format!("missing required key '{key}'"),
            })
        };
        let as_f64 = |pair: (String, usize), key: &str| -> Result<f64> {
            pair.0.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_string(),
                line: pair.1,
                msg: format!("key '{key}': expected a number, got '{}'", pair.0),
            })
        };
        let as_usize = |pair: (String, usize), key: &str| -> Result<usize> {
            pair.0.parse::<usize>().map_err(|_| Error::Parse {
                path: path.to_string(),
                line: pair.1,
                msg: format!("key '{key}': expected an integer, got '{}'", pair.0),
            })
        };

        let n_sources = as_usize(require(take("n_sources"), "n_sources")?, "n_sources")?;
        let m_observations = as_usize(
            require(take("m_observations"), "m_observations")?,
            "m_observations",
        )?;
        let g_start = as_f64(require(take("grid.start"), "grid.start")?, "grid.start")?;
        let g_step = as_f64(require(take("grid.step"), "grid.step")?, "grid.step")?;
        let g_count = as_usize(require(take("grid.count"), "grid.count")?, "grid.count")?;
        let grid = Grid::new(g_start, g_step, g_count).map_err(|e| Error::Parse {
            path: path.to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        let seed = require(take("seed"), "seed")?
            .0
            .parse::<u64>()
            .map_err(|_| Error::Parse {
                path: path.to_string(),
                line: 0,
                msg: "key 'seed': expected a non-negative integer".into(),
            })?;
        let noise_tau = as_f64(require(take("noise.tau"), "noise.tau")?, "noise.tau")?;

        // Weights: global weight.lo/hi or per-source weight.<j>.lo/hi.
        let global_lo = take("weight.lo");
        let global_hi = take("weight.hi");
        let mut weight_ranges = Vec::with_capacity(n_sources);
        for j in 1..=n_sources {
            let lo_key = format!("weight.{j}.lo");
            let hi_key = format!("weight.{j}.hi");
            let lo = match take(&lo_key) {
                Some(p) => as_f64(p, &lo_key)?,
                None => as_f64(
                    require(global_lo.clone(), "weight.lo")?,
                    "weight.lo",
                )?,
            };
            let hi = match take(&hi_key) {
                Some(p) => as_f64(p, &hi_key)?,
                None => as_f64(
                    require(global_hi.clone(), "weight.hi")?,
                    "weight.hi",
                )?,
            };
            weight_ranges.push((lo, hi));
        }

        let shift_model = match require(take("shift.model"), "shift.model")?.0.as_str() {
            "none" => ShiftModel::None,
            "iid" => {
                let mut sigma = Vec::with_capacity(n_sources);
                for k in 1..=n_sources {
                    let key = format!("shift.sigma.{k}");
                    sigma.push(as_f64(require(take(&key), &key)?, &key)?);
                }
                ShiftModel::Iid { sigma }
            }
            "ar1" => {
                let mut sigma = Vec::with_capacity(n_sources);
                let mut rho = Vec::with_capacity(n_sources);
                for k in 1..=n_sources {
                    let skey = format!("shift.sigma.{k}");
                    sigma.push(as_f64(require(take(&skey), &skey)?, &skey)?);
                    let rkey = format!("shift.rho.{k}");
                    rho.push(as_f64(require(take(&rkey), &rkey)?, &rkey)?);
                }
                ShiftModel::Ar1 { sigma, rho }
            }
            other => {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: 0,
                    msg: format!("shift.model must be none|iid|ar1, got '{other}'"),
                })
            }
        };

        let scale_model = match take("scale.model") {
            None => ScaleModel::None,
            Some(p) => match p.0.as_str() {
                "none" => ScaleModel::None,
                "uniform" => ScaleModel::Uniform {
                    lo: as_f64(require(take("scale.lo"), "scale.lo")?, "scale.lo")?,
                    hi: as_f64(require(take("scale.hi"), "scale.hi")?, "scale.hi")?,
                },
                other => {
                    return Err(Error::Parse {
                        path: path.to_string(),
                        line: p.1,
                        msg: format!("scale.model must be none|uniform, got '{other}'"),
                    })
                }
            },
        };

        let mut peaks = Vec::with_capacity(n_sources);
        for j in 1..=n_sources {
            let mut list = Vec::new();
            for i in 1.. {
                let shape_key = format!("peak.{j}.{i}.shape");
                let Some(shape_pair) = take(&shape_key) else {
                    break;
                };
                let shape = match shape_pair.0.as_str() {
                    "gaussian" => PeakShape::Gaussian,
                    "lorentzian" => PeakShape::Lorentzian,
                    other => {
                        return Err(Error::Parse {
                            path: path.to_string(),
                            line: shape_pair.1,
                            msg: format!("peak shape must be gaussian|lorentzian, got '{other}'"),
                        })
                    }
                };
                let ck = format!("peak.{j}.{i}.center");
                let wk = format!("peak.{j}.{i}.width");
                let hk = format!("peak.{j}.{i}.height");
                list.push(PeakSpec {
                    center: as_f64(require(take(&ck), &ck)?, &ck)?,
                    width: as_f64(require(take(&wk), &wk)?, &wk)?,
                    height: as_f64(require(take(&hk), &hk)?, &hk)?,
                    shape,
                });
            }
            peaks.push(list);
        }

        // Anything left over is a typo worth failing loudly on.
        for (key, (_, line)) in &entries {
            if !used.contains(key) {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: *line,
                    msg: format!("unknown key '{key}'"),
                });
            }
        }

        let cfg = SimConfig {
            n_sources,
            m_observations,
            grid,
            peaks,
            weight_ranges,
            shift_model,
            scale_model,
            noise_tau,
            seed,
        };
        cfg.validate().map_err(|e| Error::Parse {
            path: path.to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Render a config back to the flat format in canonical key order.
    /// `parse(render(cfg))` reproduces `cfg` exactly.
    pub fn render_sim_config(cfg: &SimConfig) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("n_sources", cfg.n_sources.to_string());
        kv("m_observations", cfg.m_observations.to_string());
        kv("grid.start", format!("{}", cfg.grid.start()));
        kv("grid.step", format!("{}", cfg.grid.step()));
        kv("grid.count", cfg.grid.count().to_string());
        kv("seed", cfg.seed.to_string());
        kv("noise.tau", format!("{}", cfg.noise_tau));
        for (j, (lo, hi)) in cfg.weight_ranges.iter().enumerate() {
            kv(&format!("weight.{}.lo", j + 1), format!("{lo}"));
            kv(&format!("weight.{}.hi", j + 1), format!("{hi}"));
        }
        match &cfg.shift_model {
            ShiftModel::None => kv("shift.model", "none".into()),
            ShiftModel::Iid { sigma } => {
                kv("shift.model", "iid".into());
                for (k, s) in sigma.iter().enumerate() {
                    kv(&format!("shift.sigma.{}", k + 1), format!("{s}"));
                }
            }
            ShiftModel::Ar1 { sigma, rho } => {
                kv("shift.model", "ar1".into());
                for (k, s) in sigma.iter().enumerate() {
                    kv(&format!("shift.sigma.{}", k + 1), format!("{s}"));
                }
                for (k, r) in rho.iter().enumerate() {
                    kv(&format!("shift.rho.{}", k + 1), format!("{r}"));
                }
            }
        }
        match cfg.scale_model {
            ScaleModel::None => kv("scale.model", "none".into()),
            ScaleModel::Uniform { lo, hi } => {
                kv("scale.model", "uniform".into());
                kv("scale.lo", format!("{lo}"));
                kv("scale.hi", format!("{hi}"));
            }
        }
        for (j, list) in cfg.peaks.iter().enumerate() {
            for (i, pk) in list.iter().enumerate() {
                let prefix = format!("peak.{}.{}", j + 1, i + 1);
                let shape = match pk.shape {
                    PeakShape::Gaussian => "gaussian",
                    PeakShape::Lorentzian => "lorentzian",
                };
                kv(&format!("{prefix}.shape"), shape.into());
                kv(&format!("{prefix}.center"), format!("{}", pk.center));
                kv(&format!("{prefix}.width"), format!("{}", pk.width));
                kv(&format!("{prefix}.height"), format!("{}", pk.height));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Bundled presets
// ---------------------------------------------------------------------------

pub mod presets {
    /// Names of the bundled experiment presets.
    pub const NAMES: [&str; 4] = [
        "synthetic-iid",
        "synthetic-ar1",
        "synthetic-scale",
        "nmr-like",
    ];

    pub fn get(name: &str) -> Option<&'static str> {
        match name {
            "synthetic-iid" => Some(include_str!("../presets/synthetic-iid.txt")),
            "synthetic-ar1" => Some(include_str!("../presets/synthetic-ar1.txt")),
            "synthetic-scale" => Some(include_str!("../presets/synthetic-scale.txt")),
            "nmr-like" => Some(include_str!("../presets/nmr-like.txt")),
            _ => None,
        }
    }
}
