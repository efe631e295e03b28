//! Uniform grids on `[0, 1]` and piecewise-constant grid functions.
//!
//! Cell `i` of an `N`-cell grid is `[i/N, (i+1)/N)` with midpoint
//! `(i + 1/2)/N`. Grid functions store one value per cell, read either as a
//! cell average (densities) or as a midpoint sample; the quadrature rule is
//! the midpoint rule in both cases. The first cell owns the singularity of
//! the equilibrium profiles and is flagged accordingly by consumers.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// A uniform partition of `[0, 1]` into at least two cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    n: usize,
}

impl Grid {
    pub fn new(n_cells: usize) -> Result<Self> {
        if n_cells < 2 {
            return Err(Error::Invalid(format!(
                "grid needs at least 2 cells, got {n_cells}"
            )));
        }
        Ok(Self { n: n_cells })
    }

    #[inline]
    pub fn n_cells(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn width(&self) -> f64 {
        1.0 / self.n as f64
    }

    #[inline]
    pub fn lower(&self, i: usize) -> f64 {
        i as f64 / self.n as f64
    }

    #[inline]
    pub fn upper(&self, i: usize) -> f64 {
        (i + 1) as f64 / self.n as f64
    }

    #[inline]
    pub fn midpoint(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.n as f64
    }

    /// The cell containing `x`; `x = 1` belongs to the last cell.
    #[inline]
    pub fn cell_of(&self, x: f64) -> usize {
        debug_assert!((0.0..=1.0).contains(&x));
        ((x * self.n as f64) as usize).min(self.n - 1)
    }
}

/// Whether a grid function is a probability density or a signed function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridFnKind {
    /// Nonnegative with unit mass (validated at construction).
    Density,
    /// Arbitrary sign and mass.
    Signed,
}

/// Mass tolerance accepted when validating a probability density.
pub const DENSITY_MASS_TOL: f64 = 1e-10;

/// A piecewise-constant function on a [`Grid`].
#[derive(Debug, Clone)]
pub struct GridDensity {
    grid: Grid,
    kind: GridFnKind,
    values: Vec<f64>,
}

/// Compensated (Kahan) sum; long accumulations keep full precision.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = StreamingKahan::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Incremental form of [`kahan_sum`] for accumulations interleaved with
/// other per-step work.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct StreamingKahan {
    sum: f64,
    comp: f64,
}

impl StreamingKahan {
    #[inline]
    pub(crate) fn add(&mut self, v: f64) {
        let y = v - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum
    }
}

impl GridDensity {
    /// Wraps values as a probability density, checking nonnegativity and
    /// unit mass (within [`DENSITY_MASS_TOL`]).
    pub fn new_density(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::GridMismatch(format!(
                "{} values on a {}-cell grid",
                values.len(),
                grid.n_cells()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Invalid(format!("density value {v} is not >= 0")));
        }
        let out = Self {
            grid,
            kind: GridFnKind::Density,
            values,
        };
        let mass = out.integral();
        if (mass - 1.0).abs() > DENSITY_MASS_TOL {
            return Err(Error::Invalid(format!(
                "density mass {mass} differs from 1 by more than {DENSITY_MASS_TOL}"
            )));
        }
        Ok(out)
    }

    /// Wraps values whose density invariants hold by construction
    /// (row-stochastic pushes of a valid density, convergent fixed points).
    pub(crate) fn new_density_unchecked(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.n_cells());
        Self {
            grid,
            kind: GridFnKind::Density,
            values,
        }
    }

    /// Wraps values as a signed grid function (no mass constraint).
    pub fn new_signed(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::GridMismatch(format!(
                "{} values on a {}-cell grid",
                values.len(),
                grid.n_cells()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("grid value {v} is not finite")));
        }
        Ok(Self {
            grid,
            kind: GridFnKind::Signed,
            values,
        })
    }

    /// The uniform density (constant 1).
    pub fn uniform(grid: Grid) -> Self {
        Self {
            grid,
            kind: GridFnKind::Density,
            values: vec![1.0; grid.n_cells()],
        }
    }

    /// Samples `f` at cell midpoints.
    pub fn from_midpoints(grid: Grid, kind: GridFnKind, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = (0..grid.n_cells()).map(|i| f(grid.midpoint(i))).collect();
        match kind {
            GridFnKind::Density => Self::new_density(grid, values),
            GridFnKind::Signed => Self::new_signed(grid, values),
        }
    }

    /// Cell averages of a smooth `f` by 5-point Gauss–Legendre per cell.
    pub fn from_cell_averages(grid: Grid, kind: GridFnKind, f: impl Fn(f64) -> f64) -> Result<Self> {
        // Nodes/weights on [0, 1], exact through degree 9.
        const NODES: [f64; 5] = [
            0.046910077030668,
            0.230765344947158,
            0.5,
            0.769234655052842,
            0.953089922969332,
        ];
        const WEIGHTS: [f64; 5] = [
            0.118463442528095,
            0.239314335249683,
            0.284444444444444,
            0.239314335249683,
            0.118463442528095,
        ];
        let values = (0..grid.n_cells())
            .map(|i| {
                let (a, w) = (grid.lower(i), grid.width());
                NODES
                    .iter()
                    .zip(WEIGHTS)
                    .map(|(t, wt)| wt * f(a + t * w))
                    .sum()
            })
            .collect();
        match kind {
            GridFnKind::Density => Self::new_density(grid, values),
            GridFnKind::Signed => Self::new_signed(grid, values),
        }
    }

    /// Exact cell averages of the normalized power-law density
    /// `(1 - a) x^{-a}`; the mass telescopes to 1 exactly.
    pub fn power_law(grid: Grid, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
            return Err(Error::Domain {
                what: "power-law exponent alpha",
                value: alpha,
                expected: "0 < alpha < 1",
            });
        }
        let n = grid.n_cells();
        let boundary: Vec<f64> = (0..=n).map(|i| grid.lower(i).powf(1.0 - alpha)).collect();
        let values = (0..n)
            .map(|i| (boundary[i + 1] - boundary[i]) * n as f64)
            .collect();
        Self::new_density(grid, values)
    }

    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn kind(&self) -> GridFnKind {
        self.kind
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Midpoint-rule integral over `[0, 1]`.
    pub fn integral(&self) -> f64 {
        kahan_sum(self.values.iter().copied()) * self.grid.width()
    }

    /// `L^1` norm by the midpoint rule.
    pub fn l1_norm(&self) -> f64 {
        kahan_sum(self.values.iter().map(|v| v.abs())) * self.grid.width()
    }

    /// `L^p` norm by the midpoint rule (`p >= 1`).
    pub fn lp_norm(&self, p: f64) -> f64 {
        if p == 1.0 {
            return self.l1_norm();
        }
        (kahan_sum(self.values.iter().map(|v| v.abs().powf(p))) * self.grid.width()).powf(1.0 / p)
    }

    /// `int f g dm` by the midpoint rule; `g` must share the grid.
    pub fn inner(&self, other: &GridDensity) -> Result<f64> {
        if other.grid != self.grid {
            return Err(Error::GridMismatch(
                "inner product of functions on different grids".into(),
            ));
        }
        Ok(inner_product(&self.values, &other.values) * self.grid.width())
    }

    /// Rescales to unit mass; errors when the mass is not positive.
    pub fn normalize_mass(&mut self) -> Result<()> {
        let mass = self.integral();
        if mass <= 0.0 || !mass.is_finite() {
            return Err(Error::Numerical(format!(
                "cannot normalize mass {mass} to 1"
            )));
        }
        for v in &mut self.values {
            *v /= mass;
        }
        Ok(())
    }

    /// Piecewise-linear interpolation between midpoint values, clamped to the
    /// end values outside the first and last midpoints.
    pub fn interpolate(&self, x: f64) -> f64 {
        let n = self.grid.n_cells();
        let t = x * n as f64 - 0.5;
        if t <= 0.0 {
            return self.values[0];
        }
        if t >= (n - 1) as f64 {
            return self.values[n - 1];
        }
        let i = t as usize;
        let frac = t - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    /// Writes `midpoint,value` CSV rows (with header).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.values.len() * 24 + 16);
        out.push_str("midpoint,value\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{},{}", self.grid.midpoint(i), v);
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Kahan-compensated dot product of equal-length slices.
pub fn inner_product(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let v = x * y;
        let t = sum + (v - c);
        c = (t - sum) - (v - c);
        sum = t;
    }
    sum
}

/// Composite Simpson rule on `[a, b]` with `intervals` subintervals
/// (rounded up to even).
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals.max(2) + intervals % 2;
    let h = (b - a) / n as f64;
    let mut sum = f(a) + f(b);
    let mut c = 0.0f64;
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        let v = w * f(a + k as f64 * h);
        let t = sum + (v - c);
        c = (t - sum) - (v - c);
        sum = t;
    }
    sum * h / 3.0
}
