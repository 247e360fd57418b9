//! The estimator family: ordinary and generalized least squares, augmented
//! least squares (shift and scale variants), shift recovery, and the
//! iterative maximum-likelihood estimators built on top of them.
//!
//! Every estimator is a pure function of its inputs; repeated calls are
//! bit-identical regardless of internal parallelism.

mod covariance;
mod mle;

pub use covariance::{build_cov_ar1, build_cov_hetero, Ar1Cov, CovarianceModel, HeteroCov};
pub use mle::{agmle_ar1, agmle_hetero, ar1_regress, loglik};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::lstsq;
use crate::spectra::{MixtureSet, SourceLibrary};

/// Weights with magnitude at or below this are treated as absent when
/// dividing derivative coefficients by them or dropping shift columns.
pub const WEIGHT_GUARD: f64 = 1e-8;

/// Tuning knobs shared by the iterative estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the relative max-norm change of the weight
    /// matrix between iterations.
    pub tol: f64,
    /// Taylor truncation order of the augmented basis (1 or 2).
    pub taylor_order: u32,
    /// Number of samples dropped from each end of the grid before fitting.
    pub endpoint_trim: usize,
    /// Two-sided confidence-interval multiplier (default 95%).
    pub ci_z: f64,
    /// Diagnostic override: force every AR(1) coefficient to this value
    /// instead of estimating it.
    pub rho_override: Option<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            max_iterations: 100,
            tol: 1e-6,
            taylor_order: 1,
            endpoint_trim: 2,
            ci_z: 1.959964,
            rho_override: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::invalid("max_iterations must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be > 0"));
        }
        if self.taylor_order != 1 && self.taylor_order != 2 {
            return Err(Error::invalid("taylor_order must be 1 or 2"));
        }
        if !(self.ci_z > 0.0) {
            return Err(Error::invalid("ci_z must be > 0"));
        }
        Ok(())
    }
}

/// Output of every estimator. Fields that a given method does not produce
/// stay `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Estimated mixing weights, m x n.
    pub a_hat: DMatrix<f64>,
    /// Coefficients on the derivative basis rows (estimates of
    /// `a_ij * xi_ij`, or `a_ij * delta_j` for the scale variant).
    pub deriv_weights: Option<DMatrix<f64>>,
    /// Recovered shifts, m x n.
    pub xi_hat: Option<DMatrix<f64>>,
    /// Recovered per-source scale factors (scale variant only).
    pub scale_hat: Option<Vec<f64>>,
    /// Estimated shift standard deviations per source.
    pub sigma_hat: Option<Vec<f64>>,
    /// Estimated noise standard deviation.
    pub tau_hat: Option<f64>,
    /// Estimated AR(1) coefficients per source.
    pub rho_hat: Option<Vec<f64>>,
    /// Half-width of the per-entry confidence interval, m x n.
    pub ci_half_width: Option<DMatrix<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub final_loglik: Option<f64>,
    /// Rows where a shift or ratio could not be computed (near-zero weight
    /// or a rank-deficient per-row system); their entries are zeroed.
    pub degenerate_rows: Vec<usize>,
}

impl FitResult {
    fn basic(a_hat: DMatrix<f64>) -> Self {
        FitResult {
            a_hat,
            deriv_weights: None,
            xi_hat: None,
            scale_hat: None,
            sigma_hat: None,
            tau_hat: None,
            rho_hat: None,
            ci_half_width: None,
            iterations: 1,
            converged: true,
            final_loglik: None,
            degenerate_rows: Vec::new(),
        }
    }
}

/// Shift estimates plus the rows whose per-row system degenerated.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftEstimates {
    pub xi: DMatrix<f64>,
    pub degenerate_rows: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Shared internals
// ---------------------------------------------------------------------------

/// Fitting matrices with `trim` samples dropped from both grid ends.
pub(crate) struct TrimmedSystem {
    pub x: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub s_deriv: DMatrix<f64>,
    pub nu: DVector<f64>,
    pub p_eff: usize,
}

impl TrimmedSystem {
    pub fn new(x: &MixtureSet, lib: &SourceLibrary, trim: usize) -> Result<Self> {
        check_grids(x, lib)?;
        let p = x.p();
        if 2 * trim + 3 > p {
            return Err(Error::invalid(format!(
                "endpoint trim {trim} leaves fewer than 3 of {p} samples"
            )));
        }
        let p_eff = p - 2 * trim;
        let nu = DVector::from_fn(p_eff, |j, _| x.grid().abscissa(trim + j));
        Ok(TrimmedSystem {
            x: x.data().columns(trim, p_eff).into_owned(),
            s: lib.source_matrix().columns(trim, p_eff).into_owned(),
            s_deriv: lib.derivative_matrix().columns(trim, p_eff).into_owned(),
            nu,
            p_eff,
        })
    }
}

fn check_grids(x: &MixtureSet, lib: &SourceLibrary) -> Result<()> {
    if !x.grid().approx_eq(lib.grid()) {
        return Err(Error::invalid(format!(
            "mixture grid (start {}, step {}, count {}) does not match source grid (start {}, step {}, count {})",
            x.grid().start(),
            x.grid().step(),
            x.grid().count(),
            lib.grid().start(),
            lib.grid().step(),
            lib.grid().count()
        )));
    }
    Ok(())
}

/// Row-wise least squares of `x` against the rows of `basis`; returns the
/// m x k coefficient matrix.
pub(crate) fn fit_rows(basis: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = x.nrows();
    let k = basis.nrows();
    let rows: Vec<DVector<f64>> = (0..m)
        .into_par_iter()
        .map(|i| lstsq(basis, &x.row(i).transpose()))
        .collect::<Result<Vec<_>>>()?;
    let mut out = DMatrix::zeros(m, k);
    for (i, c) in rows.into_iter().enumerate() {
        out.row_mut(i).tr_copy_from(&c);
    }
    Ok(out)
}

/// Core of shift recovery: least squares of each residual row against the
/// rows `a_ik * s'_k`, skipping sources with near-zero weight.
pub(crate) fn shift_rows(
    x: &DMatrix<f64>,
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    s_deriv: &DMatrix<f64>,
) -> ShiftEstimates {
    let (m, n) = (a.nrows(), a.ncols());
    let resid = x - a * s;
    let per_row: Vec<(Vec<f64>, bool)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let active: Vec<usize> = (0..n).filter(|&k| a[(i, k)].abs() > WEIGHT_GUARD).collect();
            let mut row = vec![0.0; n];
            if active.is_empty() {
                return (row, true);
            }
            let basis = DMatrix::from_fn(active.len(), s.ncols(), |t, j| {
                a[(i, active[t])] * s_deriv[(active[t], j)]
            });
            match lstsq(&basis, &resid.row(i).transpose()) {
                Ok(c) => {
                    for (t, &k) in active.iter().enumerate() {
                        row[k] = c[t];
                    }
                    (row, active.len() < n)
                }
                Err(_) => (row, true),
            }
        })
        .collect();
    let mut xi = DMatrix::zeros(m, n);
    let mut degenerate = Vec::new();
    for (i, (row, flagged)) in per_row.into_iter().enumerate() {
        for k in 0..n {
            xi[(i, k)] = row[k];
        }
        if flagged {
            degenerate.push(i);
        }
    }
    ShiftEstimates {
        xi,
        degenerate_rows: degenerate,
    }
}

// ---------------------------------------------------------------------------
// Plain least-squares estimators
// ---------------------------------------------------------------------------

/// Ordinary least squares: each observation row fit against the source rows.
pub fn ols_fit(x: &MixtureSet, lib: &SourceLibrary) -> Result<FitResult> {
    check_grids(x, lib)?;
    let a_hat = fit_rows(&lib.source_matrix(), x.data()).map_err(annotate_source)?;
    Ok(FitResult::basic(a_hat))
}

fn annotate_source(e: Error) -> Error {
    match e {
        Error::RankDeficient { index, detail } => Error::RankDeficient {
            index,
            detail: format!("source {} is (near) linearly dependent; {detail}", index + 1),
        },
        other => other,
    }
}

/// Generalized least squares with a caller-supplied p x p noise covariance.
/// The problem is whitened with the Cholesky factor of `q` and then solved
/// as ordinary least squares.
pub fn gls_fit(x: &MixtureSet, lib: &SourceLibrary, q: &DMatrix<f64>) -> Result<FitResult> {
    check_grids(x, lib)?;
    let p = x.p();
    if q.nrows() != p || q.ncols() != p {
        return Err(Error::invalid(format!(
            "covariance must be {p}x{p}, got {}x{}",
            q.nrows(),
            q.ncols()
        )));
    }
    let factor = crate::numerics::SpdFactor::new(q)?;
    let whitened_basis = factor.whiten_matrix(&lib.source_matrix().transpose());
    let whitened_x = factor.whiten_matrix(&x.data().transpose());
    let a_hat = fit_rows(
        &whitened_basis.transpose(),
        &whitened_x.transpose(),
    )
    .map_err(annotate_source)?;
    Ok(FitResult::basic(a_hat))
}

/// Label for an augmented-basis row, used in rank-deficiency messages.
fn basis_label(source: usize, order: usize) -> String {
    match order {
        0 => format!("source {}", source + 1),
        1 => format!("source {} derivative", source + 1),
        _ => format!("source {} 2nd derivative", source + 1),
    }
}

fn augmented_basis(lib: &SourceLibrary, taylor_order: u32) -> (DMatrix<f64>, Vec<String>) {
    let n = lib.n();
    let p = lib.grid().count();
    let stride = taylor_order as usize + 1;
    let second = if taylor_order == 2 {
        Some(lib.second_derivatives())
    } else {
        None
    };
    let mut basis = DMatrix::zeros(n * stride, p);
    let mut labels = Vec::with_capacity(n * stride);
    for j in 0..n {
        basis
            .row_mut(j * stride)
            .copy_from_slice(lib.source(j).values());
        labels.push(basis_label(j, 0));
        basis
            .row_mut(j * stride + 1)
            .copy_from_slice(lib.derivative(j).values());
        labels.push(basis_label(j, 1));
        if let Some(ref sec) = second {
            basis
                .row_mut(j * stride + 2)
                .copy_from_slice(sec[j].values());
            labels.push(basis_label(j, 2));
        }
    }
    (basis, labels)
}

/// On a rank-deficient augmented basis, name the most collinear pair of
/// basis rows so the failure is actionable.
fn collinear_pair_error(basis: &DMatrix<f64>, labels: &[String], index: usize) -> Error {
    let norm = |r: usize| basis.row(r).norm().max(1e-300);
    let mut best = (0usize, 0.0f64);
    for other in 0..basis.nrows() {
        if other == index {
            continue;
        }
        let cos = (basis.row(index).dot(&basis.row(other)) / (norm(index) * norm(other))).abs();
        if cos >= best.1 {
            best = (other, cos);
        }
    }
    Error::RankDeficient {
        index,
        detail: format!(
            "augmented basis lost rank: '{}' is nearly collinear with '{}' (|cos| = {:.6})",
            labels[index], labels[best.0], best.1
        ),
    }
}

fn split_augmented(coeffs: &DMatrix<f64>, n: usize, stride: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = coeffs.nrows();
    let a = DMatrix::from_fn(m, n, |i, j| coeffs[(i, j * stride)]);
    let dw = DMatrix::from_fn(m, n, |i, j| coeffs[(i, j * stride + 1)]);
    (a, dw)
}

/// Shift ratios `deriv_weight / weight` with the near-zero-weight guard;
/// returns the ratio matrix and flagged rows.
fn guarded_ratios(a: &DMatrix<f64>, dw: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let (m, n) = (a.nrows(), a.ncols());
    let mut out = DMatrix::zeros(m, n);
    let mut flagged = Vec::new();
    for i in 0..m {
        let mut bad = false;
        for j in 0..n {
            if a[(i, j)].abs() > WEIGHT_GUARD {
                out[(i, j)] = dw[(i, j)] / a[(i, j)];
            } else {
                bad = true;
            }
        }
        if bad {
            flagged.push(i);
        }
    }
    (out, flagged)
}

/// Augmented least squares: fit each observation against sources and their
/// derivatives in one linear solve. The derivative coefficients absorb
/// first-order shift effects; with `taylor_order = 2` the second
/// derivatives absorb curvature as well.
pub fn agls_fit(x: &MixtureSet, lib: &SourceLibrary, cfg: &EstimatorConfig) -> Result<FitResult> {
    cfg.validate()?;
    check_grids(x, lib)?;
    let (basis_full, labels) = augmented_basis(lib, cfg.taylor_order);
    let p = x.p();
    let trim = cfg.endpoint_trim;
    if 2 * trim + basis_full.nrows() > p {
        return Err(Error::invalid(format!(
            "trim {trim} leaves fewer samples than {} basis rows",
            basis_full.nrows()
        )));
    }
    let p_eff = p - 2 * trim;
    let basis = basis_full.columns(trim, p_eff).into_owned();
    let data = x.data().columns(trim, p_eff).into_owned();
    let coeffs = fit_rows(&basis, &data).map_err(|e| match e {
        Error::RankDeficient { index, .. } => collinear_pair_error(&basis, &labels, index),
        other => other,
    })?;
    let stride = cfg.taylor_order as usize + 1;
    let (a_hat, dw) = split_augmented(&coeffs, lib.n(), stride);
    let (xi, degenerate_rows) = guarded_ratios(&a_hat, &dw);
    let mut result = FitResult::basic(a_hat);
    result.deriv_weights = Some(dw);
    result.xi_hat = Some(xi);
    result.degenerate_rows = degenerate_rows;
    Ok(result)
}

/// Augmented least squares for compression/expansion: the derivative basis
/// rows are weighted by the abscissa, so the extra coefficient estimates
/// `a_ij * (v_j - 1)`. The per-source scale estimate is the row median of
/// `1 + deriv_weight / weight`.
pub fn agls_scale_fit(
    x: &MixtureSet,
    lib: &SourceLibrary,
    cfg: &EstimatorConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if cfg.taylor_order != 1 {
        return Err(Error::invalid(
            "the scale-augmented fit is first-order only (taylor_order = 1)",
        ));
    }
    check_grids(x, lib)?;
    let ts = TrimmedSystem::new(x, lib, cfg.endpoint_trim)?;
    let n = lib.n();
    if 2 * n > ts.p_eff {
        return Err(Error::invalid("not enough samples for the augmented basis"));
    }
    let mut basis = DMatrix::zeros(2 * n, ts.p_eff);
    let mut labels = Vec::with_capacity(2 * n);
    for j in 0..n {
        basis.row_mut(2 * j).copy_from(&ts.s.row(j));
        labels.push(basis_label(j, 0));
        for col in 0..ts.p_eff {
            basis[(2 * j + 1, col)] = ts.nu[col] * ts.s_deriv[(j, col)];
        }
        labels.push(format!("source {} abscissa-weighted derivative", j + 1));
    }
    let coeffs = fit_rows(&basis, &ts.x).map_err(|e| match e {
        Error::RankDeficient { index, .. } => collinear_pair_error(&basis, &labels, index),
        other => other,
    })?;
    let (a_hat, dw) = split_augmented(&coeffs, n, 2);
    let (ratios, degenerate_rows) = guarded_ratios(&a_hat, &dw);
    let m = a_hat.nrows();
    let scale_hat: Vec<f64> = (0..n)
        .map(|j| {
            let valid: Vec<f64> = (0..m)
                .filter(|&i| a_hat[(i, j)].abs() > WEIGHT_GUARD)
                .map(|i| 1.0 + ratios[(i, j)])
                .collect();
            median(&valid).unwrap_or(1.0)
        })
        .collect();
    let mut result = FitResult::basic(a_hat);
    result.deriv_weights = Some(dw);
    result.scale_hat = Some(scale_hat);
    result.degenerate_rows = degenerate_rows;
    Ok(result)
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Recover per-observation shifts from the residual of a weight estimate:
/// each residual row is regressed on the rows `a_ik * s'_k`.
pub fn estimate_shifts(
    x: &MixtureSet,
    a: &DMatrix<f64>,
    lib: &SourceLibrary,
) -> Result<ShiftEstimates> {
    check_grids(x, lib)?;
    if a.nrows() != x.m() || a.ncols() != lib.n() {
        return Err(Error::invalid(format!(
            "weight matrix is {}x{}, expected {}x{}",
            a.nrows(),
            a.ncols(),
            x.m(),
            lib.n()
        )));
    }
    Ok(shift_rows(
        x.data(),
        a,
        &lib.source_matrix(),
        &lib.derivative_matrix(),
    ))
}

#[cfg(test)]
mod tests;
