//! Sampled spectra on uniform grids: derivatives and interpolating
//! shift/scale resampling.
//!
//! These are the forward nonlinear operations that the estimators
//! linearize. All values are immutable after construction, so everything
//! here is safe to share across threads.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative tolerance used when deciding whether two grids coincide.
pub const GRID_RTOL: f64 = 1e-9;

/// A uniform 1-D sampling grid. The abscissa may be wavelength, frequency,
/// wavenumber or time; shifts are always expressed in these units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    start: f64,
    step: f64,
    count: usize,
}

impl Grid {
    /// `step` must be positive and `count` at least 3 (central differences
    /// need interior points).
    pub fn new(start: f64, step: f64, count: usize) -> Result<Self> {
        if !start.is_finite() || !step.is_finite() {
            return Err(Error::invalid("grid start/step must be finite"));
        }
        if step <= 0.0 {
            return Err(Error::invalid(format!("grid step must be > 0, got {step}")));
        }
        if count < 3 {
            return Err(Error::invalid(format!(
                "grid count must be >= 3, got {count}"
            )));
        }
        Ok(Grid { start, step, count })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Abscissa of sample `j`.
    pub fn abscissa(&self, j: usize) -> f64 {
        self.start + self.step * j as f64
    }

    /// Length of the grid in abscissa units.
    pub fn span(&self) -> f64 {
        self.step * (self.count - 1) as f64
    }

    /// All abscissae in order.
    pub fn abscissae(&self) -> Vec<f64> {
        (0..self.count).map(|j| self.abscissa(j)).collect()
    }

    /// Grids match when counts are equal and start/step agree to a relative
    /// tolerance of [`GRID_RTOL`].
    pub fn approx_eq(&self, other: &Grid) -> bool {
        let tol = |a: f64, b: f64, scale: f64| (a - b).abs() <= GRID_RTOL * scale.abs().max(1e-300);
        self.count == other.count
            && tol(self.step, other.step, self.step)
            && tol(self.start, other.start, self.start.abs().max(self.step))
    }
}

/// A sampled signal on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    grid: Grid,
    values: Vec<f64>,
}

impl Spectrum {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.count() {
            return Err(Error::invalid(format!(
                "spectrum has {} values but grid has {} points",
                values.len(),
                grid.count()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "spectrum value at index {bad} is not finite"
            )));
        }
        Ok(Spectrum { grid, values })
    }

    /// Build by evaluating `f` at every abscissa.
    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = (0..grid.count()).map(|j| f(grid.abscissa(j))).collect();
        Spectrum::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// First derivative on the same grid: central differences at interior
    /// points, first-order one-sided differences at the two endpoints.
    pub fn derivative(&self) -> Spectrum {
        let p = self.values.len();
        let h = self.grid.step();
        let v = &self.values;
        let mut d = vec![0.0; p];
        d[0] = (v[1] - v[0]) / h;
        for j in 1..p - 1 {
            d[j] = (v[j + 1] - v[j - 1]) / (2.0 * h);
        }
        d[p - 1] = (v[p - 1] - v[p - 2]) / h;
        Spectrum {
            grid: self.grid,
            values: d,
        }
    }

    /// Linear interpolation at abscissa `x`, holding the boundary value
    /// outside the grid.
    pub fn sample_at(&self, x: f64) -> f64 {
        let t = (x - self.grid.start()) / self.grid.step();
        let last = (self.values.len() - 1) as f64;
        if t <= 0.0 {
            return self.values[0];
        }
        if t >= last {
            return self.values[self.values.len() - 1];
        }
        let j = t.floor() as usize;
        let frac = t - j as f64;
        self.values[j] * (1.0 - frac) + self.values[j + 1] * frac
    }

    /// Evaluate the spectrum at `nu + xi` on the original grid.
    ///
    /// Shifts must stay small relative to the signal length:
    /// `|xi| < span/4` is enforced.
    pub fn shift_resample(&self, xi: f64) -> Result<Spectrum> {
        if !xi.is_finite() {
            return Err(Error::invalid("shift must be finite"));
        }
        let limit = self.grid.span() / 4.0;
        if xi.abs() >= limit {
            return Err(Error::invalid(format!(
                "shift {xi} exceeds limit {limit} (span/4)"
            )));
        }
        let values = (0..self.grid.count())
            .map(|j| self.sample_at(self.grid.abscissa(j) + xi))
            .collect();
        Ok(Spectrum {
            grid: self.grid,
            values,
        })
    }

    /// Evaluate the spectrum at `v * nu` on the original grid.
    /// The compression/expansion factor must lie in (0.5, 2.0).
    pub fn scale_resample(&self, v: f64) -> Result<Spectrum> {
        if !v.is_finite() || v <= 0.5 || v >= 2.0 {
            return Err(Error::invalid(format!(
                "scale factor {v} out of range (0.5, 2.0)"
            )));
        }
        let values = (0..self.grid.count())
            .map(|j| self.sample_at(v * self.grid.abscissa(j)))
            .collect();
        Ok(Spectrum {
            grid: self.grid,
            values,
        })
    }
}

/// Ordered set of reference spectra on one shared grid, with cached first
/// derivatives.
#[derive(Debug, Clone)]
pub struct SourceLibrary {
    sources: Vec<Spectrum>,
    derivatives: Vec<Spectrum>,
}

impl SourceLibrary {
    /// All sources must share an identical grid. Derivatives are computed
    /// here so they always agree with [`Spectrum::derivative`].
    pub fn new(sources: Vec<Spectrum>) -> Result<Self> {
        let first = sources
            .first()
            .ok_or_else(|| Error::invalid("source library must contain at least one spectrum"))?;
        let grid = *first.grid();
        for (j, s) in sources.iter().enumerate() {
            if *s.grid() != grid {
                return Err(Error::invalid(format!(
                    "source {j} is on a different grid than source 0"
                )));
            }
        }
        let derivatives = sources.iter().map(|s| s.derivative()).collect();
        Ok(SourceLibrary {
            sources,
            derivatives,
        })
    }

    pub fn n(&self) -> usize {
        self.sources.len()
    }

    pub fn grid(&self) -> &Grid {
        self.sources[0].grid()
    }

    pub fn sources(&self) -> &[Spectrum] {
        &self.sources
    }

    pub fn derivatives(&self) -> &[Spectrum] {
        &self.derivatives
    }

    pub fn source(&self, j: usize) -> &Spectrum {
        &self.sources[j]
    }

    pub fn derivative(&self, j: usize) -> &Spectrum {
        &self.derivatives[j]
    }

    /// Source matrix with one spectrum per row (n x p).
    pub fn source_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.sources)
    }

    /// First-derivative matrix with one row per source (n x p).
    pub fn derivative_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.derivatives)
    }

    /// Second derivatives, built as derivative of the cached derivative.
    pub fn second_derivatives(&self) -> Vec<Spectrum> {
        self.derivatives.iter().map(|d| d.derivative()).collect()
    }
}

fn rows_to_matrix(rows: &[Spectrum]) -> DMatrix<f64> {
    let n = rows.len();
    let p = rows[0].len();
    DMatrix::from_fn(n, p, |i, j| rows[i].values()[j])
}

/// A set of observed mixtures: an m x p matrix whose rows live on `grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSet {
    grid: Grid,
    data: DMatrix<f64>,
}

impl MixtureSet {
    pub fn new(grid: Grid, data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() != grid.count() {
            return Err(Error::invalid(format!(
                "mixture matrix has {} columns but grid has {} points",
                data.ncols(),
                grid.count()
            )));
        }
        if data.nrows() == 0 {
            return Err(Error::invalid("mixture set must contain at least one row"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mixture matrix contains non-finite values"));
        }
        Ok(MixtureSet { grid, data })
    }

    pub fn m(&self) -> usize {
        self.data.nrows()
    }

    pub fn p(&self) -> usize {
        self.data.ncols()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }
}
