//! Observation covariance induced by random shifts.
//!
//! Both covariance models are a scaled identity plus a low-rank term built
//! from weighted derivative rows, so inverse applications and
//! log-determinants go through a small capacitance factorization instead of
//! a dense p x p (or mp x mp) one. `dense_block` / `dense` materialize the
//! full matrices for verification at desk scale; the two routes must agree.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::spectra::SourceLibrary;

/// Desk-scale guard on the stacked dimension of the AR(1) covariance.
pub const AR1_SIZE_LIMIT: usize = 20_000;

const RIDGE_REL: f64 = 1e-10;
const RIDGE_ESCALATIONS: usize = 3;
const RIDGE_GROWTH: f64 = 100.0;

/// Assembled covariance of the vectorized observations.
pub enum CovarianceModel {
    /// Independent rows; block-diagonal with one p x p block per row.
    Hetero(HeteroCov),
    /// Serially correlated rows; one full mp x mp matrix.
    Ar1(Ar1Cov),
}

impl CovarianceModel {
    pub fn log_det(&self) -> f64 {
        match self {
            CovarianceModel::Hetero(c) => c.log_det(),
            CovarianceModel::Ar1(c) => c.log_det(),
        }
    }

    /// `vec(resid)^T V^{-1} vec(resid)` for a row-major m x p residual.
    pub fn quad_form(&self, resid: &DMatrix<f64>) -> f64 {
        match self {
            CovarianceModel::Hetero(c) => c.quad_form(resid),
            CovarianceModel::Ar1(c) => c.quad_form(resid),
        }
    }

    /// Ridge added to the diagonal during regularization (0 when none).
    pub fn ridge(&self) -> f64 {
        match self {
            CovarianceModel::Hetero(c) => c.ridge,
            CovarianceModel::Ar1(c) => c.ridge,
        }
    }
}

/// Per-row covariance `V_i = tau^2 I + sum_k sigma_k^2 a_ik^2 s'_k^T s'_k`.
pub struct HeteroCov {
    tau2: f64,
    ridge: f64,
    /// m x n coefficients `sigma_k^2 * a_ik^2`.
    coeffs: DMatrix<f64>,
    /// n x p derivative rows.
    s_deriv: DMatrix<f64>,
    /// Per-row active sources (positive coefficient) and the Cholesky of the
    /// capacitance `K_i = tau^2 I + D G D` over the active set.
    active: Vec<Vec<usize>>,
    cap: Vec<Option<Cholesky<f64, Dyn>>>,
    m: usize,
    p: usize,
}

/// Public constructor working from a source library (untrimmed).
pub fn build_cov_hetero(
    a: &DMatrix<f64>,
    lib: &SourceLibrary,
    sigma: &[f64],
    tau: f64,
) -> Result<CovarianceModel> {
    Ok(CovarianceModel::Hetero(HeteroCov::new(
        a,
        &lib.derivative_matrix(),
        sigma,
        tau,
    )?))
}

impl HeteroCov {
    pub(crate) fn new(
        a: &DMatrix<f64>,
        s_deriv: &DMatrix<f64>,
        sigma: &[f64],
        tau: f64,
    ) -> Result<Self> {
        let (m, n) = (a.nrows(), a.ncols());
        let p = s_deriv.ncols();
        if s_deriv.nrows() != n || sigma.len() != n {
            return Err(Error::invalid(
                "weights, derivatives and sigma must agree on the number of sources",
            ));
        }
        if sigma.iter().any(|s| !(*s >= 0.0)) || !(tau >= 0.0) {
            return Err(Error::invalid("sigma and tau must be >= 0"));
        }
        if tau == 0.0 && sigma.iter().all(|s| *s == 0.0) {
            return Err(Error::invalid(
                "covariance parameters must not all be zero",
            ));
        }
        let coeffs = DMatrix::from_fn(m, n, |i, k| sigma[k] * sigma[k] * a[(i, k)] * a[(i, k)]);
        let gram = s_deriv * s_deriv.transpose();
        let active: Vec<Vec<usize>> = (0..m)
            .map(|i| (0..n).filter(|&k| coeffs[(i, k)] > 0.0).collect())
            .collect();

        // Mean block trace sets the ridge scale.
        let trace_total: f64 = (0..m)
            .map(|i| p as f64 * tau * tau + (0..n).map(|k| coeffs[(i, k)] * gram[(k, k)]).sum::<f64>())
            .sum();
        let eps0 = (RIDGE_REL * trace_total / (m * p) as f64).max(f64::MIN_POSITIVE);

        let tau2 = tau * tau;
        let mut ridge = 0.0;
        'attempt: for attempt in 0..=RIDGE_ESCALATIONS {
            let tau2_eff = tau2 + ridge;
            if tau2_eff > 0.0 {
                let mut cap = Vec::with_capacity(m);
                for (i, act) in active.iter().enumerate() {
                    match capacitance(&coeffs, &gram, i, act, tau2_eff) {
                        Some(c) => cap.push(c),
                        None => {
                            ridge = escalate(ridge, eps0);
                            continue 'attempt;
                        }
                    }
                }
                return Ok(HeteroCov {
                    tau2: tau2_eff,
                    ridge,
                    coeffs,
                    s_deriv: s_deriv.clone(),
                    active,
                    cap,
                    m,
                    p,
                });
            }
            if attempt == RIDGE_ESCALATIONS {
                break;
            }
            ridge = escalate(ridge, eps0);
        }
        Err(Error::NotPositiveDefinite(
            "shift covariance stayed degenerate after ridge escalation".into(),
        ))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Effective diagonal offset, including any ridge.
    pub fn tau2_effective(&self) -> f64 {
        self.tau2
    }

    /// `V_i^{-1} R` for a p x r right-hand side.
    pub fn solve_block(&self, i: usize, r: &DMatrix<f64>) -> DMatrix<f64> {
        let inv_t = 1.0 / self.tau2;
        match &self.cap[i] {
            None => r * inv_t,
            Some(chol) => {
                let b = self.scaled_columns(i); // p x q
                let w = b.transpose() * r; // q x r
                let w = chol.solve(&w);
                (r - b * w) * inv_t
            }
        }
    }

    /// `r^T V_i^{-1} r` for a p-vector.
    pub fn quad_form_row(&self, i: usize, r: &DVector<f64>) -> f64 {
        let inv_t = 1.0 / self.tau2;
        match &self.cap[i] {
            None => r.norm_squared() * inv_t,
            Some(chol) => {
                let b = self.scaled_columns(i);
                let w = b.transpose() * r;
                let solved = chol.solve(&w);
                (r.norm_squared() - w.dot(&solved)) * inv_t
            }
        }
    }

    /// `ln det V_i` via the determinant lemma on the capacitance.
    pub fn log_det_block(&self, i: usize) -> f64 {
        let q = self.active[i].len();
        let base = (self.p - q) as f64 * self.tau2.ln();
        match &self.cap[i] {
            None => self.p as f64 * self.tau2.ln(),
            Some(chol) => {
                base + 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
            }
        }
    }

    pub fn log_det(&self) -> f64 {
        (0..self.m).map(|i| self.log_det_block(i)).sum()
    }

    pub fn quad_form(&self, resid: &DMatrix<f64>) -> f64 {
        (0..self.m)
            .map(|i| self.quad_form_row(i, &resid.row(i).transpose()))
            .sum()
    }

    /// Materialized `V_i` for verification at small p.
    pub fn dense_block(&self, i: usize) -> DMatrix<f64> {
        let mut v = DMatrix::identity(self.p, self.p) * self.tau2;
        for k in 0..self.coeffs.ncols() {
            let c = self.coeffs[(i, k)];
            if c > 0.0 {
                let u = self.s_deriv.row(k);
                for r in 0..self.p {
                    for col in 0..self.p {
                        v[(r, col)] += c * u[r] * u[col];
                    }
                }
            }
        }
        v
    }

    /// Columns `sqrt(c_ik) * s'_k` for the active sources of row `i` (p x q).
    fn scaled_columns(&self, i: usize) -> DMatrix<f64> {
        let act = &self.active[i];
        DMatrix::from_fn(self.p, act.len(), |r, t| {
            self.coeffs[(i, act[t])].sqrt() * self.s_deriv[(act[t], r)]
        })
    }
}

fn escalate(ridge: f64, eps0: f64) -> f64 {
    if ridge == 0.0 {
        eps0
    } else {
        ridge * RIDGE_GROWTH
    }
}

/// Capacitance `tau2 I + D^{1/2} G[act,act] D^{1/2}` for one row.
fn capacitance(
    coeffs: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    i: usize,
    act: &[usize],
    tau2: f64,
) -> Option<Option<Cholesky<f64, Dyn>>> {
    if act.is_empty() {
        return Some(None);
    }
    let q = act.len();
    let k = DMatrix::from_fn(q, q, |r, c| {
        let scale = (coeffs[(i, act[r])] * coeffs[(i, act[c])]).sqrt();
        scale * gram[(act[r], act[c])] + if r == c { tau2 } else { 0.0 }
    });
    Cholesky::new(k).map(Some)
}

// ---------------------------------------------------------------------------
// AR(1) full covariance
// ---------------------------------------------------------------------------

/// Full covariance of the row-major vectorized observations when shifts
/// follow per-source AR(1) processes:
/// `V = tau^2 I + sum_k C_k (x) s'_k^T s'_k` with
/// `C_k[i,j] = a_ik a_jk rho_k^|i-j| sigma_k^2 / (1-rho_k^2)`.
///
/// Each Kronecker term factors as `(E_k (x) s'_k)(E_k (x) s'_k)^T`, so one
/// mn x mn capacitance factorization stands in for the mp x mp one.
pub struct Ar1Cov {
    tau2: f64,
    ridge: f64,
    a: DMatrix<f64>,
    s_deriv: DMatrix<f64>,
    sigma: Vec<f64>,
    rho: Vec<f64>,
    /// Per-source m x m factors `E_k` with `C_k = E_k E_k^T`.
    e: Vec<DMatrix<f64>>,
    /// Cholesky of `K = tau^2 I_mn + Ut U` where `U = [.., E_k (x) u_k, ..]`.
    cap: Cholesky<f64, Dyn>,
    m: usize,
    p: usize,
    n: usize,
}

/// Public constructor working from a source library (untrimmed).
pub fn build_cov_ar1(
    a: &DMatrix<f64>,
    lib: &SourceLibrary,
    sigma: &[f64],
    tau: f64,
    rho: &[f64],
) -> Result<CovarianceModel> {
    Ok(CovarianceModel::Ar1(Ar1Cov::new(
        a,
        &lib.derivative_matrix(),
        sigma,
        tau,
        rho,
    )?))
}

impl Ar1Cov {
    pub(crate) fn new(
        a: &DMatrix<f64>,
        s_deriv: &DMatrix<f64>,
        sigma: &[f64],
        tau: f64,
        rho: &[f64],
    ) -> Result<Self> {
        let (m, n) = (a.nrows(), a.ncols());
        let p = s_deriv.ncols();
        if s_deriv.nrows() != n || sigma.len() != n || rho.len() != n {
            return Err(Error::invalid(
                "weights, derivatives, sigma and rho must agree on the number of sources",
            ));
        }
        if sigma.iter().any(|s| !(*s >= 0.0)) || !(tau >= 0.0) {
            return Err(Error::invalid("sigma and tau must be >= 0"));
        }
        if rho.iter().any(|r| !(r.abs() < 1.0)) {
            return Err(Error::invalid("AR(1) requires |rho| < 1"));
        }
        if tau == 0.0 && sigma.iter().all(|s| *s == 0.0) {
            return Err(Error::invalid(
                "covariance parameters must not all be zero",
            ));
        }
        if m * p > AR1_SIZE_LIMIT {
            return Err(Error::SizeGuard {
                what: "stacked covariance dimension m*p".into(),
                actual: m * p,
                limit: AR1_SIZE_LIMIT,
            });
        }

        // E_k = sqrt(f_k) * diag(a_k) * L_rho where L_rho is the explicit
        // Cholesky factor of the AR(1) correlation matrix.
        let e: Vec<DMatrix<f64>> = (0..n)
            .map(|k| {
                let f = sigma[k] * sigma[k] / (1.0 - rho[k] * rho[k]);
                let l = ar1_correlation_cholesky(m, rho[k]);
                let mut ek = l;
                let scale = f.sqrt();
                for i in 0..m {
                    let row_scale = scale * a[(i, k)];
                    for j in 0..=i {
                        ek[(i, j)] *= row_scale;
                    }
                }
                ek
            })
            .collect();
        let gram_u = s_deriv * s_deriv.transpose();

        let trace_total: f64 = (m * p) as f64 * tau * tau
            + (0..n)
                .map(|k| {
                    let f = sigma[k] * sigma[k] / (1.0 - rho[k] * rho[k]);
                    let tr_c: f64 = (0..m).map(|i| f * a[(i, k)] * a[(i, k)]).sum();
                    tr_c * gram_u[(k, k)]
                })
                .sum::<f64>();
        let eps0 = (RIDGE_REL * trace_total / (m * p) as f64).max(f64::MIN_POSITIVE);

        let tau2 = tau * tau;
        let mut ridge = 0.0;
        for attempt in 0..=RIDGE_ESCALATIONS {
            let tau2_eff = tau2 + ridge;
            if tau2_eff > 0.0 {
                // K blocks (k,l) = (E_k^T E_l) * (u_k . u_l)
                let mn = m * n;
                let mut kmat = DMatrix::zeros(mn, mn);
                for k in 0..n {
                    for l in 0..n {
                        let block = e[k].transpose() * &e[l];
                        let g = gram_u[(k, l)];
                        for r in 0..m {
                            for c in 0..m {
                                kmat[(k * m + r, l * m + c)] = block[(r, c)] * g;
                            }
                        }
                    }
                }
                for d in 0..mn {
                    kmat[(d, d)] += tau2_eff;
                }
                if let Some(cap) = Cholesky::new(kmat) {
                    return Ok(Ar1Cov {
                        tau2: tau2_eff,
                        ridge,
                        a: a.clone(),
                        s_deriv: s_deriv.clone(),
                        sigma: sigma.to_vec(),
                        rho: rho.to_vec(),
                        e,
                        cap,
                        m,
                        p,
                        n,
                    });
                }
            }
            if attempt == RIDGE_ESCALATIONS {
                break;
            }
            ridge = escalate(ridge, eps0);
        }
        Err(Error::NotPositiveDefinite(
            "AR(1) covariance stayed degenerate after ridge escalation".into(),
        ))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tau2_effective(&self) -> f64 {
        self.tau2
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// `U^T vec(r)` in block form: block k is `E_k^T (r u_k)`.
    fn ut_apply(&self, r: &DMatrix<f64>) -> DVector<f64> {
        let mut w = DVector::zeros(self.m * self.n);
        for k in 0..self.n {
            let u = self.s_deriv.row(k).transpose();
            let ru = r * &u; // m-vector
            let wk = self.e[k].transpose() * ru;
            w.rows_mut(k * self.m, self.m).copy_from(&wk);
        }
        w
    }

    /// `vec(r)^T V^{-1} vec(r)` for a row-major m x p residual.
    pub fn quad_form(&self, resid: &DMatrix<f64>) -> f64 {
        let w = self.ut_apply(resid);
        let solved = self.cap.solve(&w);
        (resid.norm_squared() - w.dot(&solved)) / self.tau2
    }

    pub fn log_det(&self) -> f64 {
        let mn = self.m * self.n;
        let mp = self.m * self.p;
        (mp - mn) as f64 * self.tau2.ln()
            + 2.0 * self.cap.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Normal system of the joint generalized least squares over all rows:
    /// returns `(Z^T V^{-1} Z, Z^T V^{-1} y)` where `Z = I_m (x) S^T` and
    /// `y = vec(X)`, with unknowns ordered row-major over the weight matrix.
    pub fn gls_normal_system(
        &self,
        x: &DMatrix<f64>,
        s: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let (m, n) = (self.m, self.n);
        let mn = m * n;
        let inv_t = 1.0 / self.tau2;

        // T = U^T Z, block row k: entries E_k[i,c] * w_k[j] with w_k = S u_k.
        let mut t = DMatrix::zeros(mn, mn);
        for k in 0..n {
            let wk = s * self.s_deriv.row(k).transpose(); // n-vector
            for c in 0..m {
                for i in 0..m {
                    let e = self.e[k][(i, c)];
                    if e != 0.0 {
                        for j in 0..n {
                            t[(k * m + c, i * n + j)] = e * wk[j];
                        }
                    }
                }
            }
        }

        // Z^T Z = I_m (x) (S S^T)
        let sst = s * s.transpose();
        let mut ztz = DMatrix::zeros(mn, mn);
        for i in 0..m {
            for r in 0..n {
                for c in 0..n {
                    ztz[(i * n + r, i * n + c)] = sst[(r, c)];
                }
            }
        }

        // Z^T y stacks S x_i^T
        let mut zty = DVector::zeros(mn);
        for i in 0..m {
            let sx = s * x.row(i).transpose();
            zty.rows_mut(i * n, n).copy_from(&sx);
        }

        let w = self.ut_apply(x);
        let kw = self.cap.solve(&w);
        let kt = self.cap.solve(&t);

        let m_mat = (ztz - t.transpose() * kt) * inv_t;
        let rhs = (zty - t.transpose() * kw) * inv_t;
        (m_mat, rhs)
    }

    /// Materialized full covariance for verification at small m*p.
    pub fn dense(&self) -> DMatrix<f64> {
        let (m, p, n) = (self.m, self.p, self.n);
        let mut v = DMatrix::identity(m * p, m * p) * self.tau2;
        for k in 0..n {
            let f = self.sigma[k] * self.sigma[k] / (1.0 - self.rho[k] * self.rho[k]);
            let u = self.s_deriv.row(k);
            for i in 0..m {
                for j in 0..m {
                    let c = f
                        * self.a[(i, k)]
                        * self.a[(j, k)]
                        * self.rho[k].powi((i as i32 - j as i32).abs());
                    if c != 0.0 {
                        for r in 0..p {
                            for col in 0..p {
                                v[(i * p + r, j * p + col)] += c * u[r] * u[col];
                            }
                        }
                    }
                }
            }
        }
        v
    }
}

/// Explicit Cholesky factor of the AR(1) correlation matrix
/// `R[i,j] = rho^|i-j|`: first column `rho^i`, then scaled shifted columns.
fn ar1_correlation_cholesky(m: usize, rho: f64) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(m, m);
    let s = (1.0 - rho * rho).sqrt();
    for i in 0..m {
        l[(i, 0)] = rho.powi(i as i32);
        for j in 1..=i {
            l[(i, j)] = s * rho.powi((i - j) as i32);
        }
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SpdFactor;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_deriv(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn ar1_cholesky_reconstructs_correlation() {
        for rho in [0.0, 0.5, -0.7, 0.95] {
            let m = 12;
            let l = ar1_correlation_cholesky(m, rho);
            let r = &l * l.transpose();
            for i in 0..m {
                for j in 0..m {
                    let expect = rho.powi((i as i32 - j as i32).abs());
                    assert_relative_eq!(r[(i, j)], expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn hetero_zero_sigma_gives_scaled_identity_blocks() {
        let a = DMatrix::from_element(3, 2, 1.5);
        let sd = small_deriv(2, 6, 1);
        let cov = HeteroCov::new(&a, &sd, &[0.0, 0.0], 0.3).unwrap();
        for i in 0..3 {
            let v = cov.dense_block(i);
            for r in 0..6 {
                for c in 0..6 {
                    let expect = if r == c { 0.09 } else { 0.0 };
                    assert_relative_eq!(v[(r, c)], expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn hetero_block_matches_covariance_formula() {
        // Single source, a = 2, sigma = 3: V = tau^2 I + 36 s'^T s'.
        let a = DMatrix::from_element(1, 1, 2.0);
        let sd = small_deriv(1, 8, 2);
        let tau = 0.1;
        let cov = HeteroCov::new(&a, &sd, &[3.0], tau).unwrap();
        let v = cov.dense_block(0);
        for r in 0..8 {
            for c in 0..8 {
                let expect = 36.0 * sd[(0, r)] * sd[(0, c)] + if r == c { tau * tau } else { 0.0 };
                assert_relative_eq!(v[(r, c)], expect, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn hetero_structured_solve_matches_dense_cholesky() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(0.5..2.0));
        let sd = small_deriv(2, 10, 4);
        let cov = HeteroCov::new(&a, &sd, &[1.0, 0.7], 0.2).unwrap();
        let r = DMatrix::from_fn(10, 3, |_, _| rng.gen_range(-1.0..1.0));
        for i in 0..4 {
            let dense = cov.dense_block(i);
            let f = SpdFactor::new(&dense).unwrap();
            let expect = f.solve_matrix(&r);
            let got = cov.solve_block(i, &r);
            assert_relative_eq!(got, expect, max_relative = 1e-8);
            assert_relative_eq!(cov.log_det_block(i), f.log_det(), max_relative = 1e-10);
        }
    }

    #[test]
    fn hetero_blocks_are_symmetric_with_ridge_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-2.0..2.0));
        let sd = small_deriv(2, 7, 6);
        let tau = 0.05;
        let cov = HeteroCov::new(&a, &sd, &[0.9, 1.1], tau).unwrap();
        for i in 0..3 {
            let v = cov.dense_block(i);
            let eig = v.clone().symmetric_eigen();
            assert_relative_eq!(v.clone(), v.transpose(), epsilon = 1e-12);
            assert!(eig
                .eigenvalues
                .iter()
                .all(|&l| l >= tau * tau * (1.0 - 1e-8)));
        }
    }

    #[test]
    fn hetero_rejects_all_zero_parameters() {
        let a = DMatrix::from_element(2, 1, 1.0);
        let sd = small_deriv(1, 5, 7);
        assert!(HeteroCov::new(&a, &sd, &[0.0], 0.0).is_err());
    }

    #[test]
    fn hetero_zero_tau_survives_via_ridge() {
        let a = DMatrix::from_element(2, 1, 1.0);
        let sd = small_deriv(1, 5, 8);
        let cov = HeteroCov::new(&a, &sd, &[1.0], 0.0).unwrap();
        assert!(cov.ridge > 0.0);
        assert!(cov.tau2_effective() > 0.0);
    }

    #[test]
    fn ar1_zero_rho_matches_hetero_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(0.5..1.5));
        let sd = small_deriv(2, 6, 10);
        let sigma = [1.0, 0.8];
        let tau = 0.15;
        let hetero = HeteroCov::new(&a, &sd, &sigma, tau).unwrap();
        let ar = Ar1Cov::new(&a, &sd, &sigma, tau, &[0.0, 0.0]).unwrap();
        let dense = ar.dense();
        for i in 0..3 {
            let block = hetero.dense_block(i);
            for r in 0..6 {
                for c in 0..6 {
                    assert_relative_eq!(
                        dense[(i * 6 + r, i * 6 + c)],
                        block[(r, c)],
                        max_relative = 1e-12
                    );
                }
            }
        }
        // Off-diagonal blocks vanish at rho = 0.
        assert_relative_eq!(dense[(0, 6)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ar1_off_diagonal_block_matches_derivation() {
        // n = 1, m = 2: block (0,1) must be rho * sigma^2/(1-rho^2) * a0 a1 * u^T u.
        let a = DMatrix::from_column_slice(2, 1, &[1.5, -2.0]);
        let sd = small_deriv(1, 5, 11);
        let (sigma, rho, tau) = (0.9, 0.6, 0.1);
        let ar = Ar1Cov::new(&a, &sd, &[sigma], tau, &[rho]).unwrap();
        let dense = ar.dense();
        let f = sigma * sigma / (1.0 - rho * rho);
        for r in 0..5 {
            for c in 0..5 {
                let expect = rho * f * 1.5 * (-2.0) * sd[(0, r)] * sd[(0, c)];
                assert_relative_eq!(dense[(r, 5 + c)], expect, max_relative = 1e-12);
                // Symmetry of the full matrix.
                assert_relative_eq!(dense[(5 + c, r)], expect, max_relative = 1e-12);
            }
        }
        for d in 0..10 {
            assert!(dense[(d, d)] >= tau * tau);
        }
    }

    #[test]
    fn ar1_structured_routes_match_dense_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (m, n, p) = (4, 2, 6);
        let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(0.5..1.5));
        let sd = small_deriv(n, p, 14);
        let ar = Ar1Cov::new(&a, &sd, &[1.0, 0.7], 0.2, &[0.5, -0.3]).unwrap();
        let dense = ar.dense();
        let f = SpdFactor::new(&dense).unwrap();
        assert_relative_eq!(ar.log_det(), f.log_det(), max_relative = 1e-10);

        let resid = DMatrix::from_fn(m, p, |_, _| rng.gen_range(-1.0..1.0));
        let vec_r = DVector::from_fn(m * p, |t, _| resid[(t / p, t % p)]);
        let direct = vec_r.dot(&f.solve_vector(&vec_r));
        assert_relative_eq!(ar.quad_form(&resid), direct, max_relative = 1e-8);
    }

    #[test]
    fn ar1_rejects_oversized_problems() {
        let a = DMatrix::from_element(200, 1, 1.0);
        let sd = small_deriv(1, 150, 15);
        match Ar1Cov::new(&a, &sd, &[1.0], 0.1, &[0.5]) {
            Err(Error::SizeGuard { actual, limit, .. }) => {
                assert_eq!(actual, 30_000);
                assert_eq!(limit, AR1_SIZE_LIMIT);
            }
            other => panic!("expected SizeGuard, got {:?}", other.map(|_| ())),
        }
    }
}
