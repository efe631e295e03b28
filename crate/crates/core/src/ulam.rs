//! Ulam discretization of transfer operators.
//!
//! The Ulam matrix of a map `T` on an `N`-cell grid is the row-stochastic
//! matrix `M[i][j] = m(I_i intersect T^{-1} I_j) / m(I_i)`. Rows are built
//! exactly from the monotone branch inverses, never by sampling: each cell is
//! intersected with the two branch domains, the image interval of each piece
//! is cut at cell boundaries, and the cuts are pulled back through the branch
//! inverse. Interior cuts share one inverse evaluation between neighboring
//! columns, so each row telescopes and sums to 1 up to a final rounding.
//!
//! Acting on cell-average vectors from the right (`g = f M`) pushes a density
//! forward by one step and preserves mass exactly.

use crate::error::{Error, Result};
use crate::grid::{kahan_sum, Grid, GridDensity, GridFnKind};
use crate::maps::{MapParameter, MapSchedule};
use rayon::prelude::*;
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

/// Sparse row-stochastic Ulam matrix of one map on one grid.
#[derive(Debug, Clone)]
pub struct UlamMatrix {
    grid: Grid,
    alpha: f64,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl UlamMatrix {
    /// Builds the matrix exactly from branch inverses.
    pub fn build(p: MapParameter, grid: Grid) -> Self {
        let n = grid.n_cells();
        let rows: Vec<Vec<(u32, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| build_row(p, grid, i))
            .collect();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            grid,
            alpha: p.alpha(),
            row_ptr,
            cols,
            vals,
        }
    }

    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Sum of row `i`; 1 up to rounding by construction.
    pub fn row_sum(&self, i: usize) -> f64 {
        kahan_sum(self.vals[self.row_ptr[i]..self.row_ptr[i + 1]].iter().copied())
    }

    /// Row `i` as a dense probability vector over target cells.
    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.grid.n_cells()];
        for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
            row[self.cols[idx] as usize] += self.vals[idx];
        }
        row
    }

    /// One transfer step on raw cell values: `out[j] = sum_i f[i] M[i][j]`.
    /// `out` is overwritten.
    pub fn push_values(&self, f: &[f64], out: &mut [f64]) {
        debug_assert_eq!(f.len(), self.grid.n_cells());
        debug_assert_eq!(out.len(), self.grid.n_cells());
        out.fill(0.0);
        for i in 0..f.len() {
            let fi = f[i];
            if fi == 0.0 {
                continue;
            }
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[self.cols[idx] as usize] += fi * self.vals[idx];
            }
        }
    }

    /// Pushes a grid function forward one step, preserving kind and mass.
    pub fn push_density(&self, f: &GridDensity) -> Result<GridDensity> {
        if f.grid() != self.grid {
            return Err(Error::GridMismatch(
                "density pushed through a matrix on a different grid".into(),
            ));
        }
        let mut out = vec![0.0; f.values().len()];
        self.push_values(f.values(), &mut out);
        // Nonnegativity and mass are preserved by row stochasticity; skip
        // revalidation on this internal path.
        Ok(match f.kind() {
            GridFnKind::Density => GridDensity::new_density_unchecked(f.grid(), out),
            GridFnKind::Signed => GridDensity::new_signed(f.grid(), out)?,
        })
    }

    /// Power iteration from `start` until `||M h - h||_1 <= tol` or
    /// `max_iters` steps; returns the iterate, its residual, and the step
    /// count used.
    pub fn fixed_point(
        &self,
        start: &GridDensity,
        tol: f64,
        max_iters: usize,
    ) -> Result<(GridDensity, f64, usize)> {
        if start.grid() != self.grid {
            return Err(Error::GridMismatch("fixed point start on wrong grid".into()));
        }
        let n = self.grid.n_cells();
        let width = self.grid.width();
        let mut cur = start.values().to_vec();
        let mut next = vec![0.0; n];
        let mut residual = f64::INFINITY;
        let mut iters = 0;
        while iters < max_iters {
            self.push_values(&cur, &mut next);
            iters += 1;
            residual = kahan_sum(cur.iter().zip(&next).map(|(a, b)| (a - b).abs())) * width;
            std::mem::swap(&mut cur, &mut next);
            if residual <= tol {
                break;
            }
        }
        Ok((
            GridDensity::new_density_unchecked(self.grid, cur),
            residual,
            iters,
        ))
    }

    /// Serializes as `N: u64 | alpha: f64 | N*N row-major f64`, all
    /// little-endian. Dense on disk; meant for small grids.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let n = self.grid.n_cells();
        w.write_all(&(n as u64).to_le_bytes())?;
        w.write_all(&self.alpha.to_le_bytes())?;
        for i in 0..n {
            for v in self.dense_row(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the [`write_binary`](Self::write_binary) layout back.
    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let n = u64::from_le_bytes(buf8) as usize;
        r.read_exact(&mut buf8)?;
        let alpha = f64::from_le_bytes(buf8);
        let grid = Grid::new(n)?;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                r.read_exact(&mut buf8)?;
                let v = f64::from_le_bytes(buf8);
                if v != 0.0 {
                    cols.push(j as u32);
                    vals.push(v);
                    sum += v;
                }
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Numerical(format!(
                    "row {i} of deserialized matrix sums to {sum}"
                )));
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            grid,
            alpha,
            row_ptr,
            cols,
            vals,
        })
    }
}

/// Builds row `i`: intersect the cell with each branch domain, cut the image
/// at grid boundaries, and pull the cuts back through the branch inverse.
fn build_row(p: MapParameter, grid: Grid, i: usize) -> Vec<(u32, f64)> {
    let (lo, hi) = (grid.lower(i), grid.upper(i));
    let mut entries: Vec<(u32, f64)> = Vec::with_capacity(8);

    // Left branch on [0, 1/2]: value x + 2^a x^{1+a}, top value exactly 1.
    let ll = lo.min(0.5);
    let lh = hi.min(0.5);
    if lh > ll {
        let y = |x: f64| if x == 0.5 { 1.0 } else { p.eval(x.min(0.5)) };
        piece_entries(grid, ll, lh, y(ll), y(lh), |t| p.left_branch_inverse(t), &mut entries);
    }

    // Right branch on (1/2, 1]: value 2x - 1, affine inverse.
    let rl = lo.max(0.5);
    let rh = hi.max(0.5);
    if rh > rl {
        piece_entries(
            grid,
            rl,
            rh,
            2.0 * rl - 1.0,
            2.0 * rh - 1.0,
            |t| 0.5 * (t + 1.0),
            &mut entries,
        );
    }

    // Both branches can hit the same target cells: merge duplicates.
    entries.sort_unstable_by_key(|e| e.0);
    let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
    for (c, w) in entries {
        match merged.last_mut() {
            Some((lc, lw)) if *lc == c => *lw += w,
            _ => merged.push((c, w)),
        }
    }

    // Raw weights are x-space lengths totalling the cell width exactly
    // (interior cuts telescope); normalizing by the total makes the row
    // stochastic to within one rounding per entry.
    let total: f64 = merged.iter().map(|e| e.1).sum();
    if total > 0.0 {
        for e in &mut merged {
            e.1 /= total;
        }
    }
    merged
}

/// Covers `[lo, hi]` (monotone image `[y_lo, y_hi]`) with grid columns.
fn piece_entries(
    grid: Grid,
    lo: f64,
    hi: f64,
    y_lo: f64,
    y_hi: f64,
    inv: impl Fn(f64) -> f64,
    out: &mut Vec<(u32, f64)>,
) {
    let n = grid.n_cells();
    let mut j = grid.cell_of(y_lo.clamp(0.0, 1.0));
    let mut x_prev = lo;
    loop {
        let last = j + 1 >= n || grid.upper(j) >= y_hi;
        let x_next = if last {
            hi
        } else {
            inv(grid.upper(j)).clamp(x_prev, hi)
        };
        let w = x_next - x_prev;
        if w > 0.0 {
            out.push((j as u32, w));
        }
        if last {
            break;
        }
        x_prev = x_next;
        j += 1;
    }
}

/// Applies the first `n` schedule entries to `f` (`n = 0` returns a copy),
/// fetching per-step matrices through a [`ScheduleOperators`] driver.
pub fn apply_schedule(
    schedule: &MapSchedule,
    f: &GridDensity,
    n: usize,
    cache: &MatrixCache,
) -> Result<GridDensity> {
    schedule.require_len(n)?;
    let ops = ScheduleOperators::new(schedule, f.grid(), cache);
    let mut cur = f.clone();
    for step in 1..=n {
        cur = ops.matrix(step).push_density(&cur)?;
    }
    Ok(cur)
}

/// Schedules with more distinct exponents than this build their per-step
/// matrices transiently instead of filling the shared cache.
pub const SCHEDULE_CACHE_LIMIT: usize = 64;

/// Per-step operator source for one schedule on one grid.
///
/// Schedules drawn from a small parameter set (constant, finite random set)
/// share matrices through the cache; perturbed schedules with thousands of
/// distinct exponents would evict nothing and exhaust memory, so their
/// matrices are built, used, and dropped.
pub struct ScheduleOperators<'a> {
    schedule: &'a MapSchedule,
    grid: Grid,
    cache: &'a MatrixCache,
    reuse: bool,
}

impl<'a> ScheduleOperators<'a> {
    pub fn new(schedule: &'a MapSchedule, grid: Grid, cache: &'a MatrixCache) -> Self {
        let reuse = schedule.distinct_parameter_count() <= SCHEDULE_CACHE_LIMIT;
        Self {
            schedule,
            grid,
            cache,
            reuse,
        }
    }

    /// The operator of schedule step `step` (1-based): the matrix of the
    /// map applied `step`-th.
    pub fn matrix(&self, step: usize) -> Arc<UlamMatrix> {
        let p = self.schedule.params()[step - 1];
        if self.reuse {
            self.cache.get_or_build(p, self.grid)
        } else if let Some(m) = self.cache.get(p, self.grid) {
            m
        } else {
            Arc::new(UlamMatrix::build(p, self.grid))
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }
}

/// Concurrent cache of Ulam matrices keyed by `(alpha, N)`.
///
/// The exponent is keyed after rounding to 12 decimals: schedules that agree
/// to that precision share a matrix. Concurrent builders may race; the last
/// writer wins, which is sound because builds are deterministic.
pub struct MatrixCache {
    map: RwLock<HashMap<(i64, usize), Arc<UlamMatrix>>>,
}

impl Default for MatrixCache {
    fn default() -> Self {
        Self::new()
    }
}

impl MatrixCache {
    pub fn new() -> Self {
        Self {
            map: RwLock::new(HashMap::new()),
        }
    }

    fn key(p: MapParameter, grid: Grid) -> (i64, usize) {
        ((p.alpha() * 1e12).round() as i64, grid.n_cells())
    }

    /// Cache lookup without building on a miss.
    pub fn get(&self, p: MapParameter, grid: Grid) -> Option<Arc<UlamMatrix>> {
        self.map
            .read()
            .expect("cache lock")
            .get(&Self::key(p, grid))
            .cloned()
    }

    pub fn get_or_build(&self, p: MapParameter, grid: Grid) -> Arc<UlamMatrix> {
        let key = Self::key(p, grid);
        if let Some(m) = self.map.read().expect("cache lock").get(&key) {
            return Arc::clone(m);
        }
        let built = Arc::new(UlamMatrix::build(p, grid));
        self.map
            .write()
            .expect("cache lock")
            .insert(key, Arc::clone(&built));
        built
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
