//! Dense linear-algebra kernels shared by the estimators: least-squares
//! solves, symmetric-positive-definite solves, log-determinants.
//!
//! Every solve goes through an orthogonal or Cholesky factorization;
//! explicit inverses are never formed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Pivot tolerance for rank checks, relative to the largest pivot.
pub const PIVOT_RTOL: f64 = 1e-10;

/// Maximum relative asymmetry accepted by the SPD routines.
pub const SYMMETRY_RTOL: f64 = 1e-9;

/// Minimize `|| y - c^T B ||_2` over `c`, where the rows of `basis` are the
/// basis elements (k x p) and `y` has length p.
///
/// Solved through a column-pivoted QR of `basis^T`; a pivot below
/// [`PIVOT_RTOL`] times the largest pivot reports the offending basis row.
pub fn lstsq(basis: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let k = basis.nrows();
    let p = basis.ncols();
    if y.len() != p {
        return Err(Error::invalid(format!(
            "lstsq: basis is {k}x{p} but y has length {}",
            y.len()
        )));
    }
    if k == 0 || k > p {
        return Err(Error::invalid(format!(
            "lstsq: need 1 <= k <= p, got k={k}, p={p}"
        )));
    }
    let qr = basis.transpose().col_piv_qr();
    // A P = Q R with A = basis^T, so the permuted column t is the original
    // column perm[t].
    let perm = permutation_vector(qr.p(), k);
    let r = qr.r();
    let max_diag = r
        .diagonal()
        .iter()
        .fold(0.0_f64, |acc, d| acc.max(d.abs()));
    for t in 0..k {
        if r[(t, t)].abs() <= PIVOT_RTOL * max_diag {
            return Err(Error::RankDeficient {
                index: perm[t],
                detail: format!(
                    "pivot {:.3e} below {:.1e} of max pivot {:.3e}",
                    r[(t, t)].abs(),
                    PIVOT_RTOL,
                    max_diag
                ),
            });
        }
    }
    let qty = qr.q().transpose() * y;
    let z = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient {
            index: perm[k - 1],
            detail: "zero pivot in triangular solve".into(),
        })?;
    let mut x = z;
    qr.p().inv_permute_rows(&mut x);
    Ok(x)
}

/// Recover the explicit permutation: `perm[t]` is the original column placed
/// at position `t` by the pivoting.
fn permutation_vector(p: &nalgebra::PermutationSequence<Dyn>, k: usize) -> Vec<usize> {
    let mut m = DMatrix::<f64>::identity(k, k);
    // A P moves original column perm[t] into slot t; applying the same
    // permutation to I and reading each column's hot row recovers perm.
    p.permute_columns(&mut m);
    (0..k)
        .map(|t| (0..k).find(|&i| m[(i, t)] != 0.0).unwrap())
        .collect()
}

/// Cholesky factorization of a symmetric positive definite matrix, kept for
/// repeated inverse applications and log-determinants.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    dim: usize,
}

impl SpdFactor {
    /// Factor `v`. Fails with [`Error::NotPositiveDefinite`] when the
    /// factorization breaks down and with [`Error::InvalidInput`] when `v`
    /// is visibly asymmetric.
    pub fn new(v: &DMatrix<f64>) -> Result<Self> {
        let q = v.nrows();
        if v.ncols() != q || q == 0 {
            return Err(Error::invalid(format!(
                "SPD factor requires a square matrix, got {}x{}",
                q,
                v.ncols()
            )));
        }
        let scale = v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
        for i in 0..q {
            for j in (i + 1)..q {
                if (v[(i, j)] - v[(j, i)]).abs() > SYMMETRY_RTOL * scale.max(1e-300) {
                    return Err(Error::invalid(format!(
                        "matrix asymmetric at ({i},{j}): {} vs {}",
                        v[(i, j)],
                        v[(j, i)]
                    )));
                }
            }
        }
        let chol = Cholesky::new(v.clone()).ok_or_else(|| {
            Error::NotPositiveDefinite(format!("Cholesky factorization failed for {q}x{q} matrix"))
        })?;
        Ok(SpdFactor { chol, dim: q })
    }

    /// Factor `v`, retrying with an escalating ridge `v + eps*I` when the
    /// plain factorization fails. `eps` starts at `1e-10 * trace(v)/q` and
    /// grows by x100 for at most 3 escalations. Returns the factor and the
    /// ridge that was finally applied (0 when none was needed).
    pub fn new_regularized(v: &DMatrix<f64>) -> Result<(Self, f64)> {
        match SpdFactor::new(v) {
            Ok(f) => return Ok((f, 0.0)),
            Err(e @ Error::InvalidInput(_)) => return Err(e),
            Err(_) => {}
        }
        let q = v.nrows();
        let base = 1e-10 * v.trace() / q as f64;
        let base = if base > 0.0 { base } else { 1e-300 };
        let mut eps = base;
        for _ in 0..3 {
            let mut vr = v.clone();
            for i in 0..q {
                vr[(i, i)] += eps;
            }
            if let Ok(f) = SpdFactor::new(&vr) {
                return Ok((f, eps));
            }
            eps *= 100.0;
        }
        Err(Error::NotPositiveDefinite(format!(
            "matrix stayed indefinite after ridge escalation up to {:.3e}",
            eps / 100.0
        )))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `v^{-1} r` for a matrix right-hand side.
    pub fn solve_matrix(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(r)
    }

    /// `v^{-1} r` for a vector right-hand side.
    pub fn solve_vector(&self, r: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(r)
    }

    /// `ln det v`, computed as twice the sum of log factor diagonals.
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Whitening transform `L^{-1} r` where `v = L L^T`.
    pub fn whiten_matrix(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(r)
            .expect("Cholesky factor has positive diagonal")
    }
}

/// `v^{-1} r` via one Cholesky factorization of `v`.
pub fn spd_solve(v: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if r.nrows() != v.nrows() {
        return Err(Error::invalid(format!(
            "spd_solve: V is {}x{} but R has {} rows",
            v.nrows(),
            v.ncols(),
            r.nrows()
        )));
    }
    Ok(SpdFactor::new(v)?.solve_matrix(r))
}

/// `ln det v` for symmetric positive definite `v`.
pub fn log_det_spd(v: &DMatrix<f64>) -> Result<f64> {
    Ok(SpdFactor::new(v)?.log_det())
}
