//! Synthetic source libraries and mixture sets under three distortion
//! regimes: i.i.d. shifts, AR(1) shifts, and linear compression/expansion,
//! plus Gaussian observation noise.
//!
//! Mixtures are assembled with the true nonlinear resampling operations,
//! not the Taylor approximation the estimators use, so simulator output is
//! fair ground truth for them. Everything is reproducible bit-for-bit from
//! the seed in the config.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::spectra::{Grid, MixtureSet, SourceLibrary, Spectrum};

/// How many times a rejected shift draw may be retried before giving up
/// (indicates sigma is too large for the grid).
const MAX_SHIFT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeakShape {
    Gaussian,
    Lorentzian,
}

/// One spectral line of a synthetic source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakSpec {
    pub center: f64,
    pub width: f64,
    pub height: f64,
    pub shape: PeakShape,
}

impl PeakSpec {
    pub fn eval(&self, nu: f64) -> f64 {
        let d = nu - self.center;
        match self.shape {
            PeakShape::Gaussian => self.height * (-d * d / (2.0 * self.width * self.width)).exp(),
            PeakShape::Lorentzian => {
                self.height * self.width * self.width / (d * d + self.width * self.width)
            }
        }
    }

    fn validate(&self, grid: &Grid) -> Result<()> {
        if !(self.width > 0.0) || !(self.height > 0.0) {
            return Err(Error::invalid("peak width and height must be positive"));
        }
        if self.width < 3.0 * grid.step() {
            return Err(Error::invalid(format!(
                "peak width {} below smoothness floor 3*step = {}",
                self.width,
                3.0 * grid.step()
            )));
        }
        let lo = grid.start();
        let hi = grid.abscissa(grid.count() - 1);
        if self.center < lo || self.center > hi {
            return Err(Error::invalid(format!(
                "peak center {} outside grid [{lo}, {hi}]",
                self.center
            )));
        }
        Ok(())
    }
}

/// Shift regime for the realized distortions.
#[derive(Debug, Clone, PartialEq)]
pub enum ShiftModel {
    None,
    /// Independent N(0, sigma_k^2) shifts per source.
    Iid { sigma: Vec<f64> },
    /// AR(1) shifts per source: xi_i = rho*xi_{i-1} + u_i, u_i ~ N(0, sigma^2),
    /// started from xi_0 = 0.
    Ar1 { sigma: Vec<f64>, rho: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleModel {
    None,
    /// One compression/expansion factor per source, uniform in [lo, hi].
    Uniform { lo: f64, hi: f64 },
}

/// Full description of one synthetic experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_sources: usize,
    pub m_observations: usize,
    pub grid: Grid,
    /// Peaks per source; outer length must equal `n_sources`.
    pub peaks: Vec<Vec<PeakSpec>>,
    /// Per-source uniform range for the mixing weights.
    pub weight_ranges: Vec<(f64, f64)>,
    pub shift_model: ShiftModel,
    pub scale_model: ScaleModel,
    pub noise_tau: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0 || self.m_observations == 0 {
            return Err(Error::invalid("need at least one source and one observation"));
        }
        if self.peaks.len() != self.n_sources {
            return Err(Error::invalid(format!(
                "{} peak lists for {} sources",
                self.peaks.len(),
                self.n_sources
            )));
        }
        for (j, list) in self.peaks.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::invalid(format!("source {} has no peaks", j + 1)));
            }
            for peak in list {
                peak.validate(&self.grid)?;
            }
        }
        if self.weight_ranges.len() != self.n_sources {
            return Err(Error::invalid(format!(
                "{} weight ranges for {} sources",
                self.weight_ranges.len(),
                self.n_sources
            )));
        }
        for &(lo, hi) in &self.weight_ranges {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::invalid(format!("bad weight range [{lo}, {hi}]")));
            }
        }
        match &self.shift_model {
            ShiftModel::None => {}
            ShiftModel::Iid { sigma } => {
                if sigma.len() != self.n_sources {
                    return Err(Error::invalid("one shift sigma per source required"));
                }
                if sigma.iter().any(|s| !(*s >= 0.0)) {
                    return Err(Error::invalid("shift sigma must be >= 0"));
                }
            }
            ShiftModel::Ar1 { sigma, rho } => {
                if sigma.len() != self.n_sources || rho.len() != self.n_sources {
                    return Err(Error::invalid("one sigma and rho per source required"));
                }
                if sigma.iter().any(|s| !(*s >= 0.0)) {
                    return Err(Error::invalid("shift sigma must be >= 0"));
                }
                if rho.iter().any(|r| !(r.abs() < 1.0)) {
                    return Err(Error::invalid("AR(1) requires |rho| < 1"));
                }
            }
        }
        if let ScaleModel::Uniform { lo, hi } = self.scale_model {
            if !(lo > 0.5 && hi < 2.0 && lo <= hi) {
                return Err(Error::invalid(format!(
                    "scale range [{lo}, {hi}] must lie inside (0.5, 2.0)"
                )));
            }
        }
        if !(self.noise_tau >= 0.0) {
            return Err(Error::invalid("noise tau must be >= 0"));
        }
        Ok(())
    }
}

/// The realized draws behind one mixture set.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// True mixing weights, m x n.
    pub a: DMatrix<f64>,
    /// Realized shifts, m x n (zero when no shift model was active).
    pub xi: DMatrix<f64>,
    /// Realized per-source scale factors (all 1 when no scale model).
    pub scales: Vec<f64>,
    pub seed: u64,
}

/// Evaluate each source's peak list on the configured grid.
pub fn gen_sources(cfg: &SimConfig) -> Result<SourceLibrary> {
    cfg.validate()?;
    let mut sources = Vec::with_capacity(cfg.n_sources);
    for list in &cfg.peaks {
        let s = Spectrum::from_fn(cfg.grid, |nu| list.iter().map(|pk| pk.eval(nu)).sum())?;
        sources.push(s);
    }
    SourceLibrary::new(sources)
}

/// Assemble mixtures under the configured distortion models.
///
/// Draw order is fixed: weights row-major, then shifts (row-major for the
/// i.i.d. model, per-source recursions for AR(1)), then scales, then noise
/// row-major. Identical configs therefore produce bit-identical output.
pub fn gen_mixtures(lib: &SourceLibrary, cfg: &SimConfig) -> Result<(MixtureSet, GroundTruth)> {
    cfg.validate()?;
    if lib.n() != cfg.n_sources {
        return Err(Error::invalid(format!(
            "library has {} sources, config expects {}",
            lib.n(),
            cfg.n_sources
        )));
    }
    if !lib.grid().approx_eq(&cfg.grid) {
        return Err(Error::invalid("library grid differs from config grid"));
    }
    let (m, n, p) = (cfg.m_observations, cfg.n_sources, cfg.grid.count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let shift_limit = cfg.grid.span() / 4.0;

    let mut a = DMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let (lo, hi) = cfg.weight_ranges[j];
            a[(i, j)] = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        }
    }

    let mut xi = DMatrix::zeros(m, n);
    match &cfg.shift_model {
        ShiftModel::None => {}
        ShiftModel::Iid { sigma } => {
            for i in 0..m {
                for k in 0..n {
                    xi[(i, k)] = draw_bounded(&mut rng, &std_normal, sigma[k], 0.0, shift_limit)?;
                }
            }
        }
        ShiftModel::Ar1 { sigma, rho } => {
            // xi_0 = 0, so the first observation's shift is pure innovation.
            for k in 0..n {
                let mut prev = 0.0;
                for i in 0..m {
                    let x = draw_bounded(&mut rng, &std_normal, sigma[k], rho[k] * prev, shift_limit)?;
                    xi[(i, k)] = x;
                    prev = x;
                }
            }
        }
    }

    let mut scales = vec![1.0; n];
    if let ScaleModel::Uniform { lo, hi } = cfg.scale_model {
        for s in scales.iter_mut() {
            *s = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        }
    }

    // Distorted bases: scale first, then shift the scaled signal.
    let mut data = DMatrix::zeros(m, p);
    for i in 0..m {
        for j in 0..n {
            let base = if scales[j] != 1.0 {
                lib.source(j).scale_resample(scales[j])?
            } else {
                lib.source(j).clone()
            };
            let distorted = if xi[(i, j)] != 0.0 {
                base.shift_resample(xi[(i, j)])?
            } else {
                base
            };
            let w = a[(i, j)];
            for (col, v) in distorted.values().iter().enumerate() {
                data[(i, col)] += w * v;
            }
        }
    }
    if cfg.noise_tau > 0.0 {
        for i in 0..m {
            for col in 0..p {
                data[(i, col)] += cfg.noise_tau * std_normal.sample(&mut rng);
            }
        }
    }

    let mixtures = MixtureSet::new(cfg.grid, data)?;
    let truth = GroundTruth {
        a,
        xi,
        scales,
        seed: cfg.seed,
    };
    Ok((mixtures, truth))
}

/// Draw `mean + sigma * N(0,1)` rejecting values at or beyond the resampling
/// limit; aborts after [`MAX_SHIFT_ATTEMPTS`] rejections.
fn draw_bounded(
    rng: &mut ChaCha8Rng,
    std_normal: &Normal<f64>,
    sigma: f64,
    mean: f64,
    limit: f64,
) -> Result<f64> {
    for _ in 0..MAX_SHIFT_ATTEMPTS {
        let x = mean + sigma * std_normal.sample(rng);
        if x.abs() < limit {
            return Ok(x);
        }
    }
    Err(Error::invalid(format!(
        "shift draws kept exceeding {limit} after {MAX_SHIFT_ATTEMPTS} attempts; sigma {sigma} too large for this grid"
    )))
}
