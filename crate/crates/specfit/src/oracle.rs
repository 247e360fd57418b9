//! Brute-force nonlinear fitting by exhaustive grid search over shifts
//! (and optionally scales) with an inner least squares per candidate.
//!
//! Deterministic and gradient-free, so it cannot fall into local minima of
//! the nonlinear objective; it serves as the independent ground-truth
//! solver the linearized estimators are audited against, at desk scale.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::FitResult;
use crate::numerics::lstsq;
use crate::spectra::{MixtureSet, SourceLibrary};

/// Combinatorial guard on `n * (candidates per source)^n`.
pub const MAX_COMBINATIONS: usize = 1_000_000;

/// Source-count guard; beyond this the search space explodes.
pub const MAX_SOURCES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// Shifts are searched over `[-xi_max, xi_max]`.
    pub xi_max: f64,
    /// Candidate spacing; must not exceed `xi_max`.
    pub xi_step: f64,
    /// Optional scale search range (per source).
    pub scale_range: Option<(f64, f64)>,
    /// Candidate spacing for scales; required when `scale_range` is set.
    pub scale_step: Option<f64>,
    /// When false, one shared shift tuple is chosen for all rows instead of
    /// an independent tuple per row.
    pub per_row: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            xi_max: 3.0,
            xi_step: 0.25,
            scale_range: None,
            scale_step: None,
            per_row: true,
        }
    }
}

impl OracleConfig {
    fn validate(&self) -> Result<()> {
        if !(self.xi_max >= 0.0) || !self.xi_max.is_finite() {
            return Err(Error::invalid("xi_max must be finite and >= 0"));
        }
        if !(self.xi_step > 0.0) || self.xi_step > self.xi_max.max(f64::MIN_POSITIVE) {
            return Err(Error::invalid(format!(
                "xi_step must satisfy 0 < step <= xi_max, got step {} and xi_max {}",
                self.xi_step, self.xi_max
            )));
        }
        match (self.scale_range, self.scale_step) {
            (None, None) => {}
            (Some((lo, hi)), Some(step)) => {
                if !(lo > 0.5 && hi < 2.0 && lo <= hi) {
                    return Err(Error::invalid("scale range must lie inside (0.5, 2.0)"));
                }
                if !(step > 0.0) {
                    return Err(Error::invalid("scale_step must be > 0"));
                }
            }
            _ => {
                return Err(Error::invalid(
                    "scale_range and scale_step must be given together",
                ))
            }
        }
        Ok(())
    }
}

/// One candidate distortion of a source.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    xi: f64,
    scale: f64,
}

/// Enumeration order is by (|xi|, xi, |scale-1|, scale), so the first strict
/// minimum found is automatically the tie-break winner: smaller |shifts|
/// first, lexicographically across sources.
fn candidate_list(cfg: &OracleConfig) -> Vec<Candidate> {
    let steps = (cfg.xi_max / cfg.xi_step + 1e-9).floor() as i64;
    let mut shifts: Vec<f64> = (-steps..=steps).map(|i| i as f64 * cfg.xi_step).collect();
    shifts.sort_by(|a, b| {
        (a.abs(), *a)
            .partial_cmp(&(b.abs(), *b))
            .expect("finite shifts")
    });
    let scales = match (cfg.scale_range, cfg.scale_step) {
        (Some((lo, hi)), Some(step)) => {
            let count = ((hi - lo) / step + 1e-9).floor() as i64;
            let mut v: Vec<f64> = (0..=count).map(|i| lo + i as f64 * step).collect();
            v.sort_by(|a, b| {
                ((a - 1.0).abs(), *a)
                    .partial_cmp(&((b - 1.0).abs(), *b))
                    .expect("finite scales")
            });
            v
        }
        _ => vec![1.0],
    };
    let mut out = Vec::with_capacity(shifts.len() * scales.len());
    for &xi in &shifts {
        for &scale in &scales {
            out.push(Candidate { xi, scale });
        }
    }
    out
}

/// Exhaustively search the candidate grid of shifts (and scales) per row,
/// solving an inner least squares for the weights of each candidate basis.
/// Exact up to the grid resolution and interpolation error.
pub fn oracle_fit(x: &MixtureSet, lib: &SourceLibrary, cfg: &OracleConfig) -> Result<FitResult> {
    cfg.validate()?;
    let n = lib.n();
    if n > MAX_SOURCES {
        return Err(Error::SizeGuard {
            what: "oracle source count".into(),
            actual: n,
            limit: MAX_SOURCES,
        });
    }
    if !x.grid().approx_eq(lib.grid()) {
        return Err(Error::invalid("mixture and source grids do not match"));
    }
    let candidates = candidate_list(cfg);
    let c = candidates.len();
    let combos = c
        .checked_pow(n as u32)
        .and_then(|t| t.checked_mul(n))
        .unwrap_or(usize::MAX);
    if combos > MAX_COMBINATIONS {
        return Err(Error::SizeGuard {
            what: "oracle candidate combinations".into(),
            actual: combos,
            limit: MAX_COMBINATIONS,
        });
    }

    // Distorted basis rows, one per (source, candidate).
    let p = x.p();
    let mut bank: Vec<Vec<DVector<f64>>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut per_source = Vec::with_capacity(c);
        for cand in &candidates {
            let base = if cand.scale != 1.0 {
                lib.source(j).scale_resample(cand.scale)?
            } else {
                lib.source(j).clone()
            };
            let distorted = if cand.xi != 0.0 {
                base.shift_resample(cand.xi)?
            } else {
                base
            };
            per_source.push(DVector::from_column_slice(distorted.values()));
        }
        bank.push(per_source);
    }

    let m = x.m();
    let tuples = TupleIter::new(n, c);
    let best = if cfg.per_row {
        let rows: Vec<(DVector<f64>, Vec<usize>)> = (0..m)
            .into_par_iter()
            .map(|i| {
                let y = x.data().row(i).transpose();
                best_tuple(&bank, &tuples.collect_all(), p, |basis| {
                    residual_for(basis, &y)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows
    } else {
        // One shared tuple: the objective sums residuals over all rows.
        let ys: Vec<DVector<f64>> = (0..m).map(|i| x.data().row(i).transpose()).collect();
        let (_, tuple) = {
            let all = tuples.collect_all();
            let mut best: Option<(f64, Vec<usize>)> = None;
            for tuple in &all {
                let basis = basis_for(&bank, tuple, p);
                let mut total = 0.0;
                let mut ok = true;
                for y in &ys {
                    match residual_for(&basis, y) {
                        Some((r, _)) => total += r,
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok && best.as_ref().map_or(true, |(b, _)| total < *b) {
                    best = Some((total, tuple.clone()));
                }
            }
            best.ok_or_else(|| Error::invalid("no admissible candidate tuple"))?
        };
        let basis = basis_for(&bank, &tuple, p);
        (0..m)
            .map(|i| {
                let y = x.data().row(i).transpose();
                let (_, w) = residual_for(&basis, &y)
                    .ok_or_else(|| Error::invalid("degenerate shared-tuple basis"))?;
                Ok((w, tuple.clone()))
            })
            .collect::<Result<Vec<_>>>()?
    };

    let mut a_hat = DMatrix::zeros(m, n);
    let mut xi_hat = DMatrix::zeros(m, n);
    let mut scale_hat = vec![1.0; n];
    let mut any_scale = false;
    for (i, (weights, tuple)) in best.iter().enumerate() {
        for j in 0..n {
            a_hat[(i, j)] = weights[j];
            let cand = candidates[tuple[j]];
            xi_hat[(i, j)] = cand.xi;
            if cand.scale != 1.0 {
                any_scale = true;
            }
            // Per-source scale from the last row wins; identical across rows
            // in shared mode, reported per the final row otherwise.
            scale_hat[j] = cand.scale;
        }
    }
    let mut result = FitResult {
        a_hat,
        deriv_weights: None,
        xi_hat: Some(xi_hat),
        scale_hat: if any_scale { Some(scale_hat) } else { None },
        sigma_hat: None,
        tau_hat: None,
        rho_hat: None,
        ci_half_width: None,
        iterations: 1,
        converged: true,
        final_loglik: None,
        degenerate_rows: Vec::new(),
    };
    result.iterations = 1;
    Ok(result)
}

/// Squared residual of the inner least squares, or None when the candidate
/// basis is rank deficient (that tuple is skipped).
fn residual_for(basis: &DMatrix<f64>, y: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
    match lstsq(basis, y) {
        Ok(w) => {
            let r = y - basis.transpose() * &w;
            Some((r.norm_squared(), w))
        }
        Err(_) => None,
    }
}

fn basis_for(bank: &[Vec<DVector<f64>>], tuple: &[usize], p: usize) -> DMatrix<f64> {
    let n = bank.len();
    DMatrix::from_fn(n, p, |j, col| bank[j][tuple[j]][col])
}

fn best_tuple(
    bank: &[Vec<DVector<f64>>],
    tuples: &[Vec<usize>],
    p: usize,
    mut objective: impl FnMut(&DMatrix<f64>) -> Option<(f64, DVector<f64>)>,
) -> Result<(DVector<f64>, Vec<usize>)> {
    let mut best: Option<(f64, DVector<f64>, Vec<usize>)> = None;
    for tuple in tuples {
        let basis = basis_for(bank, tuple, p);
        if let Some((obj, w)) = objective(&basis) {
            if best.as_ref().map_or(true, |(b, _, _)| obj < *b) {
                best = Some((obj, w, tuple.clone()));
            }
        }
    }
    best.map(|(_, w, t)| (w, t))
        .ok_or_else(|| Error::invalid("every candidate tuple was rank deficient"))
}

/// Odometer over candidate indices with the first source as the most
/// significant digit, preserving the per-source candidate ordering.
struct TupleIter {
    n: usize,
    c: usize,
}

impl TupleIter {
    fn new(n: usize, c: usize) -> Self {
        TupleIter { n, c }
    }

    fn collect_all(&self) -> Vec<Vec<usize>> {
        let total = self.c.pow(self.n as u32);
        let mut out = Vec::with_capacity(total);
        let mut tuple = vec![0usize; self.n];
        loop {
            out.push(tuple.clone());
            // increment from the last digit
            let mut pos = self.n;
            loop {
                if pos == 0 {
                    return out;
                }
                pos -= 1;
                tuple[pos] += 1;
                if tuple[pos] < self.c {
                    break;
                }
                tuple[pos] = 0;
            }
        }
    }
}
