//! Iterative maximum-likelihood estimators that absorb shift randomness
//! into the observation covariance, for independent (heteroscedastic) and
//! AR(1)-correlated shifts.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::covariance::{Ar1Cov, CovarianceModel, HeteroCov};
use super::{fit_rows, shift_rows, EstimatorConfig, FitResult, ShiftEstimates, TrimmedSystem};
use crate::error::{Error, Result};
use crate::numerics::SpdFactor;
use crate::spectra::{MixtureSet, SourceLibrary};

const LN_2PI: f64 = 1.8378770664093453;

/// Lag-1 regression coefficient of a shift column:
/// `sum xi_i xi_{i-1} / sum xi_{i-1}^2`, clamped to [-0.99, 0.99].
/// Degenerate columns (tiny denominator or fewer than 3 points) return 0.
pub fn ar1_regress(xi_col: &[f64]) -> f64 {
    if xi_col.len() < 3 {
        return 0.0;
    }
    let num: f64 = xi_col.windows(2).map(|w| w[0] * w[1]).sum();
    let den: f64 = xi_col[..xi_col.len() - 1].iter().map(|x| x * x).sum();
    if den <= 1e-12 {
        return 0.0;
    }
    (num / den).clamp(-0.99, 0.99)
}

/// Shift scale estimates from recovered shifts: `sqrt(mean of squares)` per
/// source column.
fn sigma_from_shifts(xi: &DMatrix<f64>) -> Vec<f64> {
    let m = xi.nrows() as f64;
    (0..xi.ncols())
        .map(|k| (xi.column(k).norm_squared() / m).sqrt())
        .collect()
}

/// Noise scale from the doubly-corrected residual
/// `X - A S - (A .* Xi) S'`, as a root mean square over all entries.
fn tau_from_residual(
    x: &DMatrix<f64>,
    a: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    s: &DMatrix<f64>,
    s_deriv: &DMatrix<f64>,
) -> f64 {
    let shift_coeff = a.component_mul(xi);
    let resid = x - a * s - shift_coeff * s_deriv;
    (resid.norm_squared() / (x.nrows() * x.ncols()) as f64).sqrt()
}

/// Relative max-norm change between successive weight iterates.
fn relative_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let denom = old.amax().max(1e-300);
    (new - old).amax() / denom
}

/// When a noise-free exact fit drives every variance parameter to zero the
/// covariance cannot be built; a floor on tau keeps the update defined (the
/// resulting scalar covariance cancels out of the argmin).
fn variance_floor(sigma: &[f64], tau: f64, x_scale: f64) -> f64 {
    if tau == 0.0 && sigma.iter().all(|s| *s == 0.0) {
        1e-15 * x_scale.max(1.0)
    } else {
        tau
    }
}

struct IterationStats {
    shifts: ShiftEstimates,
    sigma: Vec<f64>,
    tau: f64,
    /// tau after the degenerate-fit floor; what covariance construction uses.
    tau_eff: f64,
}

fn iteration_stats(ts: &TrimmedSystem, a: &DMatrix<f64>) -> IterationStats {
    let shifts = shift_rows(&ts.x, a, &ts.s, &ts.s_deriv);
    let sigma = sigma_from_shifts(&shifts.xi);
    let tau = tau_from_residual(&ts.x, a, &shifts.xi, &ts.s, &ts.s_deriv);
    let tau_eff = variance_floor(&sigma, tau, ts.x.amax());
    IterationStats {
        shifts,
        sigma,
        tau,
        tau_eff,
    }
}

/// Maximum-likelihood weights under independent Gaussian shifts.
///
/// Iterates shift recovery, variance estimation and per-row generalized
/// least squares from an ordinary-least-squares start until the weight
/// matrix stabilizes. Non-convergence is reported through the `converged`
/// flag, not an error.
pub fn agmle_hetero(
    x: &MixtureSet,
    lib: &SourceLibrary,
    cfg: &EstimatorConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let ts = TrimmedSystem::new(x, lib, cfg.endpoint_trim)?;
    let mut a = fit_rows(&ts.s, &ts.x)?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        let stats = iteration_stats(&ts, &a);
        let cov = HeteroCov::new(&a, &ts.s_deriv, &stats.sigma, stats.tau_eff)?;
        let a_new = hetero_gls_rows(&cov, &ts)?;
        iterations += 1;
        let rel = relative_change(&a_new, &a);
        a = a_new;
        if rel < cfg.tol {
            converged = true;
            break;
        }
    }

    // Final statistics at the converged weights.
    let stats = iteration_stats(&ts, &a);
    let cov = HeteroCov::new(&a, &ts.s_deriv, &stats.sigma, stats.tau_eff)?;
    let ci = hetero_ci(&cov, &ts, cfg.ci_z)?;
    let resid = &ts.x - &a * &ts.s;
    let ll = gaussian_loglik(&CovarianceModel::Hetero(cov), &resid);

    let mut result = FitResult::basic(a);
    result.xi_hat = Some(stats.shifts.xi);
    result.sigma_hat = Some(stats.sigma);
    result.tau_hat = Some(stats.tau);
    result.ci_half_width = Some(ci);
    result.iterations = iterations;
    result.converged = converged;
    result.final_loglik = Some(ll);
    result.degenerate_rows = stats.shifts.degenerate_rows;
    Ok(result)
}

/// One sweep of per-row generalized least squares under the block covariance.
fn hetero_gls_rows(cov: &HeteroCov, ts: &TrimmedSystem) -> Result<DMatrix<f64>> {
    let m = ts.x.nrows();
    let n = ts.s.nrows();
    let st = ts.s.transpose();
    let rows: Vec<DVector<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let vs = cov.solve_block(i, &st); // p x n
            let svs = &ts.s * &vs; // n x n
            let svx = vs.transpose() * ts.x.row(i).transpose(); // n
            let factor = SpdFactor::new(&symmetrize(svs))?;
            Ok(factor.solve_vector(&svx))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut a = DMatrix::zeros(m, n);
    for (i, r) in rows.into_iter().enumerate() {
        a.row_mut(i).tr_copy_from(&r);
    }
    Ok(a)
}

/// Per-entry confidence half-widths `z * sqrt(((S V_i^-1 S^T)^-1)_jj)`.
fn hetero_ci(cov: &HeteroCov, ts: &TrimmedSystem, z: f64) -> Result<DMatrix<f64>> {
    let m = ts.x.nrows();
    let n = ts.s.nrows();
    let st = ts.s.transpose();
    let eye = DMatrix::identity(n, n);
    let rows: Vec<DVector<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let vs = cov.solve_block(i, &st);
            let svs = &ts.s * &vs;
            let factor = SpdFactor::new(&symmetrize(svs))?;
            let inv = factor.solve_matrix(&eye);
            Ok(DVector::from_fn(n, |j, _| inv[(j, j)].max(0.0).sqrt() * z))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ci = DMatrix::zeros(m, n);
    for (i, r) in rows.into_iter().enumerate() {
        ci.row_mut(i).tr_copy_from(&r);
    }
    Ok(ci)
}

/// Tiny asymmetry from accumulated rounding breaks the SPD check; fold it.
fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Maximum-likelihood weights under AR(1)-correlated shifts.
///
/// The observations are coupled through the full covariance, so each update
/// solves one joint generalized least squares over the vectorized system.
pub fn agmle_ar1(x: &MixtureSet, lib: &SourceLibrary, cfg: &EstimatorConfig) -> Result<FitResult> {
    cfg.validate()?;
    let ts = TrimmedSystem::new(x, lib, cfg.endpoint_trim)?;
    let n = lib.n();
    let mut a = fit_rows(&ts.s, &ts.x)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut last: Option<(IterationStats, Vec<f64>)> = None;
    while iterations < cfg.max_iterations {
        let stats = iteration_stats(&ts, &a);
        let rho = estimate_rho(&stats.shifts.xi, cfg, n);
        let cov = Ar1Cov::new(&a, &ts.s_deriv, &stats.sigma, stats.tau_eff, &rho)?;
        let (normal, rhs) = cov.gls_normal_system(&ts.x, &ts.s);
        let factor = SpdFactor::new(&symmetrize(normal))?;
        let beta = factor.solve_vector(&rhs);
        let a_new = DMatrix::from_fn(a.nrows(), n, |i, j| beta[i * n + j]);
        iterations += 1;
        let rel = relative_change(&a_new, &a);
        a = a_new;
        last = Some((stats, rho));
        if rel < cfg.tol {
            converged = true;
            break;
        }
    }
    drop(last);

    let stats = iteration_stats(&ts, &a);
    let rho = estimate_rho(&stats.shifts.xi, cfg, n);
    let cov = Ar1Cov::new(&a, &ts.s_deriv, &stats.sigma, stats.tau_eff, &rho)?;
    let (normal, _) = cov.gls_normal_system(&ts.x, &ts.s);
    let factor = SpdFactor::new(&symmetrize(normal))?;
    let inv = factor.solve_matrix(&DMatrix::identity(a.nrows() * n, a.nrows() * n));
    let ci = DMatrix::from_fn(a.nrows(), n, |i, j| {
        inv[(i * n + j, i * n + j)].max(0.0).sqrt() * cfg.ci_z
    });
    let resid = &ts.x - &a * &ts.s;
    let ll = gaussian_loglik(&CovarianceModel::Ar1(cov), &resid);

    let mut result = FitResult::basic(a);
    result.xi_hat = Some(stats.shifts.xi);
    result.sigma_hat = Some(stats.sigma);
    result.tau_hat = Some(stats.tau);
    result.rho_hat = Some(rho);
    result.ci_half_width = Some(ci);
    result.iterations = iterations;
    result.converged = converged;
    result.final_loglik = Some(ll);
    result.degenerate_rows = stats.shifts.degenerate_rows;
    Ok(result)
}

fn estimate_rho(xi: &DMatrix<f64>, cfg: &EstimatorConfig, n: usize) -> Vec<f64> {
    if let Some(forced) = cfg.rho_override {
        return vec![forced; n];
    }
    (0..n)
        .map(|k| {
            let col: Vec<f64> = (0..xi.nrows()).map(|i| xi[(i, k)]).collect();
            ar1_regress(&col)
        })
        .collect()
}

fn gaussian_loglik(cov: &CovarianceModel, resid: &DMatrix<f64>) -> f64 {
    let mp = (resid.nrows() * resid.ncols()) as f64;
    -0.5 * cov.log_det() - 0.5 * cov.quad_form(resid) - 0.5 * mp * LN_2PI
}

/// Gaussian log-likelihood of the observations under either covariance
/// model: heteroscedastic when `rho` is absent, AR(1) otherwise.
pub fn loglik(
    a: &DMatrix<f64>,
    sigma: &[f64],
    tau: f64,
    rho: Option<&[f64]>,
    x: &MixtureSet,
    lib: &SourceLibrary,
) -> Result<f64> {
    if a.nrows() != x.m() || a.ncols() != lib.n() {
        return Err(Error::invalid("weight matrix dimensions do not match data"));
    }
    let cov = match rho {
        None => CovarianceModel::Hetero(HeteroCov::new(
            a,
            &lib.derivative_matrix(),
            sigma,
            tau,
        )?),
        Some(r) => CovarianceModel::Ar1(Ar1Cov::new(
            a,
            &lib.derivative_matrix(),
            sigma,
            tau,
            r,
        )?),
    };
    let resid = x.data() - a * lib.source_matrix();
    Ok(gaussian_loglik(&cov, &resid))
}
