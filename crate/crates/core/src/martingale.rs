//! Sequential centering, the conditional-expectation kernels `H_n`, the
//! reverse-martingale differences `psi_n`, and the variance of the centered
//! Birkhoff sums via three algebraically equivalent routes.
//!
//! Notation, with `u_k = P^k 1` the pushforward of Lebesgue measure and
//! `c_k = m(phi . T^k) = int phi u_k dm`:
//!
//! * centered observable `phibar_k = phi - c_k` for `k >= 1`, `phibar_0 = 0`
//!   identically by convention (the `k = 0` term never contributes);
//! * `H_n = (1 / u_n) sum_{k=1}^{n-1} P_{k+1}^{n-k}(phibar_k u_k)`, kept as
//!   the numerator `U_n = H_n u_n` which obeys the one-step recursion
//!   `U_{n+1} = P_{n+1}(phibar_n u_n + U_n)`, `U_1 = 0`;
//! * `psi_n = phibar_n + H_n - H_{n+1} o T_{n+1}`, the reverse-martingale
//!   increment.
//!
//! Identity computations stay inside one Ulam discretization and reduce
//! compositions by duality (`int (g o T) f dm = int g Pf dm`) instead of
//! interpolating `g` at image points: interpolation error near the neutral
//! fixed point is amplified like `x^{-alpha-1}` and would swamp residuals
//! that the duality-reduced form resolves at machine precision. The
//! pointwise [`MartingaleState::compute_psi`] sample keeps the interpolated
//! composition because there it is the observable object itself.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use crate::cone::{cone_check, ConeParams, DEFAULT_BOUNDARY_SKIP};
use crate::error::{Error, Result};
use crate::grid::{inner_product, kahan_sum, Grid, GridDensity};
use crate::maps::MapSchedule;
use crate::observable::Observable;
use crate::ulam::{MatrixCache, ScheduleOperators};

/// Floor under `P^n 1` below which the division `H_n = U_n / u_n` is
/// refused as a discretization failure.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Per-step caches along one schedule: densities `u_k`, means `c_k`, and
/// the kernel numerators `U_k = H_k u_k`.
pub struct MartingaleState {
    schedule: MapSchedule,
    observable: Observable,
    cone: ConeParams,
    grid: Grid,
    cache: Arc<MatrixCache>,
    phi_mid: Vec<f64>,
    /// `densities[k] = u_k`; `densities[0]` is the uniform density.
    densities: Vec<GridDensity>,
    /// `means[k] = c_k`; `means[0] = 0` by the `phibar_0 = 0` convention.
    means: Vec<f64>,
    /// `numerators[k] = U_k`; `U_0 = U_1 = 0`.
    numerators: Vec<GridDensity>,
}

impl MartingaleState {
    /// Starts a state at horizon 0. Densities are validated against the cone
    /// on every advance, so failures surface at the step that caused them.
    pub fn new(
        schedule: MapSchedule,
        observable: Observable,
        grid: Grid,
        cone: ConeParams,
        cache: Arc<MatrixCache>,
    ) -> Result<Self> {
        if schedule.alpha_max() > cone.alpha() + 1e-12 {
            return Err(Error::Cone(format!(
                "schedule exponent cap {} exceeds the cone exponent {}",
                schedule.alpha_max(),
                cone.alpha()
            )));
        }
        let phi_mid = observable.sample(grid);
        let uniform = GridDensity::uniform(grid);
        let zero = GridDensity::new_signed(grid, vec![0.0; grid.n_cells()])?;
        Ok(Self {
            schedule,
            observable,
            cone,
            grid,
            cache,
            phi_mid,
            densities: vec![uniform],
            means: vec![0.0],
            numerators: vec![zero],
        })
    }

    /// Largest `k` with `u_k`, `c_k`, `U_k` available.
    pub fn horizon(&self) -> usize {
        self.densities.len() - 1
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn observable(&self) -> &Observable {
        &self.observable
    }

    pub fn schedule(&self) -> &MapSchedule {
        &self.schedule
    }

    pub fn cone(&self) -> &ConeParams {
        &self.cone
    }

    pub(crate) fn ops(&self) -> ScheduleOperators<'_> {
        ScheduleOperators::new(&self.schedule, self.grid, &self.cache)
    }

    fn require_horizon(&self, n: usize) -> Result<()> {
        if n > self.horizon() {
            return Err(Error::Invalid(format!(
                "state built to horizon {}, requested {n}; call advance_to first",
                self.horizon()
            )));
        }
        Ok(())
    }

    /// Extends the caches to horizon `n`, one operator application per step.
    pub fn advance_to(&mut self, n: usize) -> Result<()> {
        self.schedule.require_len(n)?;
        let ops = ScheduleOperators::new(&self.schedule, self.grid, &self.cache);
        let width = self.grid.width();
        while self.horizon() < n {
            let k = self.horizon();
            let m = ops.matrix(k + 1);
            let u_next = m.push_density(&self.densities[k])?;
            let report = cone_check(&u_next, &self.cone, DEFAULT_BOUNDARY_SKIP);
            if !report.ok {
                return Err(Error::Cone(format!(
                    "pushforward density left the cone at step {}: {:?}",
                    k + 1,
                    report.violation
                )));
            }
            let c_next = inner_product(&self.phi_mid, u_next.values()) * width;
            // phibar_0 = 0 identically: the first numerator seed is empty.
            let w = if k == 0 {
                vec![0.0; self.grid.n_cells()]
            } else {
                let c_k = self.means[k];
                let u_k = self.densities[k].values();
                let big_u = self.numerators[k].values();
                self.phi_mid
                    .iter()
                    .zip(u_k)
                    .zip(big_u)
                    .map(|((&p, &u), &bu)| (p - c_k) * u + bu)
                    .collect()
            };
            let mut pushed = vec![0.0; self.grid.n_cells()];
            m.push_values(&w, &mut pushed);
            self.numerators
                .push(GridDensity::new_signed(self.grid, pushed)?);
            self.means.push(c_next);
            self.densities.push(u_next);
        }
        Ok(())
    }

    /// `u_k = P^k 1`.
    pub fn density(&self, k: usize) -> Result<&GridDensity> {
        self.require_horizon(k)?;
        Ok(&self.densities[k])
    }

    /// `c_k = int phi u_k dm`; `c_0 = 0` by convention.
    pub fn mean(&self, k: usize) -> Result<f64> {
        self.require_horizon(k)?;
        Ok(self.means[k])
    }

    /// Centering constants `c_1 .. c_n`.
    pub fn compute_means(&self, n: usize) -> Result<&[f64]> {
        self.require_horizon(n)?;
        Ok(&self.means[1..=n])
    }

    /// Kernel numerator `U_n = H_n u_n`.
    pub fn numerator(&self, n: usize) -> Result<&GridDensity> {
        self.require_horizon(n)?;
        Ok(&self.numerators[n])
    }

    /// `H_n = U_n / u_n`, refusing cells where `u_n` sits below
    /// [`DENSITY_FLOOR`]. `H_1` is identically zero.
    pub fn compute_hn(&self, n: usize) -> Result<GridDensity> {
        if n == 0 {
            return Err(Error::Invalid("H_n is defined for n >= 1".into()));
        }
        self.require_horizon(n)?;
        let u = self.densities[n].values();
        if let Some(i) = u.iter().position(|&v| v < DENSITY_FLOOR) {
            return Err(Error::Numerical(format!(
                "pushforward density fell below {DENSITY_FLOOR:e} in cell {i} at step {n}; \
                 the kernel division is not trustworthy on this grid"
            )));
        }
        let vals = self.numerators[n]
            .values()
            .iter()
            .zip(u)
            .map(|(&bu, &uu)| bu / uu)
            .collect();
        GridDensity::new_signed(self.grid, vals)
    }

    /// Pointwise grid sample of `psi_n = phibar_n + H_n - H_{n+1} o T_{n+1}`,
    /// with the composition evaluated at exact image points and `H_{n+1}`
    /// interpolated linearly between midpoints.
    ///
    /// This is the observable object; identity tests use the duality-reduced
    /// forms instead (see the module docs).
    pub fn compute_psi(&self, n: usize) -> Result<GridDensity> {
        if n == 0 {
            return Err(Error::Invalid("psi_n is defined for n >= 1".into()));
        }
        self.require_horizon(n + 1)?;
        let h_n = self.compute_hn(n)?;
        let h_next = self.compute_hn(n + 1)?;
        let t_next = self.schedule.params()[n];
        let c_n = self.means[n];
        let vals = (0..self.grid.n_cells())
            .map(|i| {
                let x = self.grid.midpoint(i);
                let image = t_next.eval(x);
                self.phi_mid[i] - c_n + h_n.values()[i] - h_next.interpolate(image)
            })
            .collect();
        GridDensity::new_signed(self.grid, vals)
    }

    /// `|| P_{n+1}(psi_n u_n) ||_1` with the composed term reduced by
    /// duality: `P_{n+1}((H_{n+1} o T_{n+1}) u_n) = H_{n+1} u_{n+1} = U_{n+1}`
    /// exactly, so the residual is `|| P_{n+1}((phibar_n + H_n) u_n) - U_{n+1} ||_1`.
    ///
    /// The pushed integrand is built from the guarded division `H_n`, not
    /// from `U_n` directly, so the residual genuinely exercises the identity
    /// rather than restating the recursion.
    pub fn martingale_residual(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::Invalid("the residual is defined for n >= 1".into()));
        }
        self.require_horizon(n + 1)?;
        let h_n = self.compute_hn(n)?;
        let c_n = self.means[n];
        let u_n = self.densities[n].values();
        let w: Vec<f64> = (0..self.grid.n_cells())
            .map(|i| (self.phi_mid[i] - c_n + h_n.values()[i]) * u_n[i])
            .collect();
        let m = self.ops().matrix(n + 1);
        let mut pushed = vec![0.0; self.grid.n_cells()];
        m.push_values(&w, &mut pushed);
        let diff = pushed
            .iter()
            .zip(self.numerators[n + 1].values())
            .map(|(&a, &b)| (a - b).abs());
        Ok(kahan_sum(diff) * self.grid.width())
    }

    /// `E[phibar_j^2 o T^j] = int phibar_j^2 u_j dm`.
    fn diag_term(&self, j: usize) -> f64 {
        let c = self.means[j];
        let u = self.densities[j].values();
        kahan_sum(
            self.phi_mid
                .iter()
                .zip(u)
                .map(|(&p, &u)| (p - c) * (p - c) * u),
        ) * self.grid.width()
    }

    /// `E[(H_j phibar_j) o T^j] = int phibar_j U_j dm`.
    fn kernel_cross_term(&self, j: usize) -> f64 {
        let c = self.means[j];
        let big_u = self.numerators[j].values();
        kahan_sum(self.phi_mid.iter().zip(big_u).map(|(&p, &u)| (p - c) * u))
            * self.grid.width()
    }

    /// Variance of `S_n` by expanding the square: diagonal second moments
    /// plus twice the lagged covariances
    /// `E[phibar_j o T^j . phibar_i o T^i] = int phibar_j P_{i+1}^{j-i}(phibar_i u_i) dm`.
    ///
    /// `lag_cap` truncates the covariance lag `j - i`; `None` keeps every
    /// term. Scans over thousands of steps use a cap sized from the measured
    /// covariance decay; identity tests run uncapped.
    pub fn sigma_sq_direct(&self, n: usize, lag_cap: Option<usize>) -> Result<f64> {
        self.require_horizon(n)?;
        let ops = self.ops();
        let width = self.grid.width();
        let ncells = self.grid.n_cells();
        let mut diag = 0.0f64;
        let mut cross = 0.0f64;
        let mut evolved: VecDeque<(usize, Vec<f64>)> = VecDeque::new();
        let mut scratch = vec![0.0; ncells];
        for j in 1..=n {
            if let Some(cap) = lag_cap {
                while evolved.front().is_some_and(|(i, _)| j - i > cap) {
                    evolved.pop_front();
                }
            }
            let m = ops.matrix(j);
            for (_, g) in evolved.iter_mut() {
                m.push_values(g, &mut scratch);
                std::mem::swap(g, &mut scratch);
            }
            let c_j = self.means[j];
            for (_, g) in &evolved {
                cross += kahan_sum(self.phi_mid.iter().zip(g).map(|(&p, &gv)| (p - c_j) * gv))
                    * width;
            }
            diag += self.diag_term(j);
            let u_j = self.densities[j].values();
            let seed: Vec<f64> = self
                .phi_mid
                .iter()
                .zip(u_j)
                .map(|(&p, &u)| (p - c_j) * u)
                .collect();
            evolved.push_back((j, seed));
        }
        Ok(diag + 2.0 * cross)
    }

    /// Variance via the increment expansion
    /// `sigma_n^2 = sum_i E[psi_i^2 o T^i] + E[H_{n+1}^2 o T^{n+1}]`,
    /// each `E[psi_i^2 o T^i]` expanded by duality into
    /// `int (phibar_i + H_i)^2 u_i - 2 int H_{i+1} P_{i+1}((phibar_i + H_i) u_i) + int H_{i+1}^2 u_{i+1}`.
    ///
    /// Needs the state advanced to `n + 1`.
    pub fn sigma_sq_identity_c(&self, n: usize) -> Result<f64> {
        self.require_horizon(n + 1)?;
        let ops = self.ops();
        let width = self.grid.width();
        let ncells = self.grid.n_cells();
        let mut total = 0.0f64;
        let mut h_next = self.compute_hn(1)?;
        for i in 1..=n {
            let h_i = h_next;
            h_next = self.compute_hn(i + 1)?;
            let c_i = self.means[i];
            let u_i = self.densities[i].values();
            let u_next = self.densities[i + 1].values();
            let combined: Vec<f64> = (0..ncells)
                .map(|t| self.phi_mid[t] - c_i + h_i.values()[t])
                .collect();
            let sq = kahan_sum(combined.iter().zip(u_i).map(|(&v, &u)| v * v * u)) * width;
            let w: Vec<f64> = combined.iter().zip(u_i).map(|(&v, &u)| v * u).collect();
            let mut pushed = vec![0.0; ncells];
            ops.matrix(i + 1).push_values(&w, &mut pushed);
            let mid = inner_product(h_next.values(), &pushed) * width;
            let tail = kahan_sum(
                h_next
                    .values()
                    .iter()
                    .zip(u_next)
                    .map(|(&h, &u)| h * h * u),
            ) * width;
            total += sq - 2.0 * mid + tail;
        }
        let u_last = self.densities[n + 1].values();
        total += kahan_sum(
            h_next
                .values()
                .iter()
                .zip(u_last)
                .map(|(&h, &u)| h * h * u),
        ) * width;
        Ok(total)
    }

    /// Variance via the kernel cross-term expansion
    /// `sigma_n^2 = sum_i E[phibar_i^2 o T^i] + 2 sum_i E[(H_i phibar_i) o T^i]`.
    pub fn sigma_sq_identity_e(&self, n: usize) -> Result<f64> {
        self.require_horizon(n)?;
        let mut total = 0.0f64;
        for i in 1..=n {
            total += self.diag_term(i) + 2.0 * self.kernel_cross_term(i);
        }
        Ok(total)
    }

    /// `sup_{x >= first cell} x^{alpha+1} |H_n(x)|` per requested `n`,
    /// the empirical stand-in for the pointwise kernel envelope.
    pub fn hn_pointwise_stat(&self, ns: &[usize]) -> Result<Vec<f64>> {
        let weights: Vec<f64> = (DEFAULT_BOUNDARY_SKIP..self.grid.n_cells())
            .map(|i| self.grid.midpoint(i).powf(self.cone.alpha() + 1.0))
            .collect();
        ns.iter()
            .map(|&n| {
                let h = self.compute_hn(n)?;
                Ok(h.values()[DEFAULT_BOUNDARY_SKIP..]
                    .iter()
                    .zip(&weights)
                    .fold(0.0f64, |m, (&h, &w)| m.max(w * h.abs())))
            })
            .collect()
    }

    /// `(||H_n||_q, ||H_n o T^n||_r)` per requested `n`, with the composed
    /// norm pulled back through the density:
    /// `int |H_n o T^n|^r dm = int |H_n|^r u_n dm`.
    pub fn hn_norms(&self, ns: &[usize], q: f64, r: f64) -> Result<Vec<(f64, f64)>> {
        let width = self.grid.width();
        ns.iter()
            .map(|&n| {
                let h = self.compute_hn(n)?;
                let lq = (kahan_sum(h.values().iter().map(|&v| v.abs().powf(q))) * width)
                    .powf(1.0 / q);
                let pulled = (kahan_sum(
                    h.values()
                        .iter()
                        .zip(self.densities[n].values())
                        .map(|(&v, &u)| v.abs().powf(r) * u),
                ) * width)
                    .powf(1.0 / r);
                Ok((lq, pulled))
            })
            .collect()
    }

    /// L1 norms of the evolved tail terms `P_{k+1}^{n-k}(phibar_k u_k)` for
    /// `n` over a ladder, by pushing the seed forward once per step.
    pub fn tail_norm_curve(&self, k: usize, ns: &[usize]) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(Error::Invalid("tail terms start at k = 1".into()));
        }
        self.require_horizon(k)?;
        let max_n = ns.iter().copied().max().unwrap_or(k);
        self.schedule.require_len(max_n)?;
        if ns.iter().any(|&n| n <= k) {
            return Err(Error::Invalid(
                "tail ladder entries must exceed the seed index k".into(),
            ));
        }
        let ops = self.ops();
        let width = self.grid.width();
        let c_k = self.means[k];
        let mut g: Vec<f64> = self
            .phi_mid
            .iter()
            .zip(self.densities[k].values())
            .map(|(&p, &u)| (p - c_k) * u)
            .collect();
        let mut scratch = vec![0.0; self.grid.n_cells()];
        let mut out = Vec::with_capacity(ns.len());
        let mut sorted = ns.to_vec();
        sorted.sort_unstable();
        let mut next = sorted.into_iter().peekable();
        for step in (k + 1)..=max_n {
            ops.matrix(step).push_values(&g, &mut scratch);
            std::mem::swap(&mut g, &mut scratch);
            while next.peek() == Some(&step) {
                next.next();
                out.push((step, kahan_sum(g.iter().map(|v| v.abs())) * width));
            }
        }
        Ok(out)
    }

    /// Writes the per-step table `n, mean, sigma_sq, hn_lq, hn_pulled_r,
    /// hn_pointwise` for `n = 1 ..= horizon` as CSV. The variance column is
    /// the kernel cross-term route, which prefix-sums in one pass.
    pub fn write_per_n_csv(&self, path: &Path, q: f64, r: f64) -> Result<()> {
        use std::fmt::Write as _;
        let horizon = self.horizon();
        let ns: Vec<usize> = (1..=horizon).collect();
        let norms = self.hn_norms(&ns, q, r)?;
        let stats = self.hn_pointwise_stat(&ns)?;
        let mut out = String::from("n,mean,sigma_sq,hn_lq,hn_pulled_r,hn_pointwise\n");
        let mut sigma = 0.0f64;
        for n in 1..=horizon {
            sigma += self.diag_term(n) + 2.0 * self.kernel_cross_term(n);
            writeln!(
                out,
                "{},{},{},{},{},{}",
                n,
                self.means[n],
                sigma,
                norms[n - 1].0,
                norms[n - 1].1,
                stats[n - 1]
            )
            .expect("write to string");
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Streaming centering constants `c_1 .. c_n` for long horizons: one density
/// buffer, no per-step history. Matrices for schedules with many distinct
/// exponents are built and dropped per step.
pub fn schedule_means(
    schedule: &MapSchedule,
    observable: &Observable,
    grid: Grid,
    n: usize,
    cache: &MatrixCache,
) -> Result<Vec<f64>> {
    schedule.require_len(n)?;
    let ops = ScheduleOperators::new(schedule, grid, cache);
    let phi_mid = observable.sample(grid);
    let width = grid.width();
    let mut u = GridDensity::uniform(grid);
    let mut means = Vec::with_capacity(n);
    for step in 1..=n {
        u = ops.matrix(step).push_density(&u)?;
        means.push(inner_product(&phi_mid, u.values()) * width);
    }
    Ok(means)
}

/// Streaming first and second centered moments per step:
/// `(c_k, int (phi - c_k)^2 u_k dm)` for `k = 1 ..= n`.
pub fn schedule_center_moments(
    schedule: &MapSchedule,
    observable: &Observable,
    grid: Grid,
    n: usize,
    cache: &MatrixCache,
) -> Result<Vec<(f64, f64)>> {
    schedule.require_len(n)?;
    let ops = ScheduleOperators::new(schedule, grid, cache);
    let phi_mid = observable.sample(grid);
    let width = grid.width();
    let mut u = GridDensity::uniform(grid);
    let mut out = Vec::with_capacity(n);
    for step in 1..=n {
        u = ops.matrix(step).push_density(&u)?;
        let c = inner_product(&phi_mid, u.values()) * width;
        let q = kahan_sum(
            phi_mid
                .iter()
                .zip(u.values())
                .map(|(&p, &uu)| (p - c) * (p - c) * uu),
        ) * width;
        out.push((c, q));
    }
    Ok(out)
}

/// Streaming variance ladder: `sigma_n^2` by the direct route at each
/// requested `n`, holding only the current density and a lag-capped window
/// of evolved covariance seeds.
pub fn sigma_sq_ladder(
    schedule: &MapSchedule,
    observable: &Observable,
    grid: Grid,
    ns: &[usize],
    lag_cap: usize,
    cache: &MatrixCache,
) -> Result<Vec<(usize, f64)>> {
    if ns.is_empty() {
        return Err(Error::Invalid("variance ladder needs entries".into()));
    }
    if lag_cap == 0 {
        return Err(Error::Invalid("variance ladder needs lag_cap >= 1".into()));
    }
    let max_n = *ns.iter().max().expect("nonempty");
    schedule.require_len(max_n)?;
    let ops = ScheduleOperators::new(schedule, grid, cache);
    let phi_mid = observable.sample(grid);
    let width = grid.width();
    let ncells = grid.n_cells();
    let mut u = GridDensity::uniform(grid);
    let mut evolved: VecDeque<(usize, Vec<f64>)> = VecDeque::new();
    let mut scratch = vec![0.0; ncells];
    let mut diag = 0.0f64;
    let mut cross = 0.0f64;
    let mut sorted = ns.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut next = sorted.into_iter().peekable();
    let mut out = Vec::with_capacity(ns.len());
    for j in 1..=max_n {
        while evolved.front().is_some_and(|(i, _)| j - i > lag_cap) {
            evolved.pop_front();
        }
        let m = ops.matrix(j);
        for (_, g) in evolved.iter_mut() {
            m.push_values(g, &mut scratch);
            std::mem::swap(g, &mut scratch);
        }
        u = m.push_density(&u)?;
        let c_j = inner_product(&phi_mid, u.values()) * width;
        for (_, g) in &evolved {
            cross += kahan_sum(phi_mid.iter().zip(g).map(|(&p, &gv)| (p - c_j) * gv)) * width;
        }
        diag += kahan_sum(
            phi_mid
                .iter()
                .zip(u.values())
                .map(|(&p, &uu)| (p - c_j) * (p - c_j) * uu),
        ) * width;
        let seed: Vec<f64> = phi_mid
            .iter()
            .zip(u.values())
            .map(|(&p, &uu)| (p - c_j) * uu)
            .collect();
        evolved.push_back((j, seed));
        while next.peek() == Some(&j) {
            next.next();
            out.push((j, diag + 2.0 * cross));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::MapParameter;
    use crate::observable::Observable;
    use crate::transfer::transfer_exact;
    use crate::ulam::UlamMatrix;
    use approx::assert_relative_eq;

    fn state_with_len(
        alpha: f64,
        phi: Observable,
        n_cells: usize,
        horizon: usize,
        schedule_len: usize,
    ) -> MartingaleState {
        let p = MapParameter::new(alpha).unwrap();
        let schedule = MapSchedule::constant(p, schedule_len).unwrap();
        let grid = Grid::new(n_cells).unwrap();
        let cone = ConeParams::with_default_constant(alpha).unwrap();
        let mut st =
            MartingaleState::new(schedule, phi, grid, cone, Arc::new(MatrixCache::new()))
                .unwrap();
        st.advance_to(horizon).unwrap();
        st
    }

    fn state_for(
        alpha: f64,
        phi: Observable,
        n_cells: usize,
        horizon: usize,
    ) -> MartingaleState {
        state_with_len(alpha, phi, n_cells, horizon, horizon + 4)
    }

    #[test]
    fn constant_observable_degenerates() {
        let st = state_for(0.3, Observable::polynomial(vec![2.5]), 512, 12);
        for n in 1..=10 {
            let h = st.compute_hn(n).unwrap();
            let sup = h.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(sup < 1e-12, "H_{n} sup {sup}");
            assert_relative_eq!(st.mean(n).unwrap(), 2.5, max_relative = 1e-12);
        }
        let psi = st.compute_psi(5).unwrap();
        assert!(psi.values().iter().all(|v| v.abs() < 1e-12));
        assert!(st.sigma_sq_direct(10, None).unwrap().abs() < 1e-18);
        assert!(st.sigma_sq_identity_e(10).unwrap().abs() < 1e-18);
        assert!(st.sigma_sq_identity_c(10).unwrap().abs() < 1e-18);
    }

    #[test]
    fn unit_mass_observable_has_unit_means() {
        let st = state_for(0.45, Observable::polynomial(vec![1.0]), 256, 8);
        for &c in st.compute_means(8).unwrap() {
            assert_relative_eq!(c, 1.0, max_relative = 1e-12);
        }
        assert_eq!(st.mean(0).unwrap(), 0.0);
    }

    #[test]
    fn h1_is_zero_and_centering_is_exact() {
        let st = state_for(0.25, Observable::identity(), 1024, 30);
        let h1 = st.compute_hn(1).unwrap();
        assert!(h1.values().iter().all(|&v| v == 0.0));
        // int phibar_k u_k dm = 0 by the definition of c_k; verifies the
        // quadrature pipeline is self-consistent.
        let width = st.grid().width();
        for k in 1..=30 {
            let c = st.mean(k).unwrap();
            let resid = kahan_sum(
                st.phi_mid
                    .iter()
                    .zip(st.density(k).unwrap().values())
                    .map(|(&p, &u)| (p - c) * u),
            ) * width;
            assert!(resid.abs() < 1e-10, "k={k}: {resid:e}");
        }
    }

    #[test]
    fn means_converge_to_stationary_value() {
        // Constant schedule: c_k approaches the fixed-point mean of phi and
        // successive differences shrink.
        let alpha = 0.5;
        let st = state_for(alpha, Observable::identity(), 4096, 60);
        let p = MapParameter::new(alpha).unwrap();
        let grid = Grid::new(4096).unwrap();
        let m = UlamMatrix::build(p, grid);
        let (h, residual, _) = m
            .fixed_point(&GridDensity::uniform(grid), 1e-8, 30_000)
            .unwrap();
        assert!(residual <= 1e-8);
        let target = Observable::identity().mean_against(grid, h.values()).unwrap();
        let c = st.compute_means(60).unwrap();
        // Convergence of c_k is only polynomial at alpha = 0.5; assert the
        // approach, not a tight limit.
        assert!(
            (c[59] - target).abs() < (c[4] - target).abs(),
            "c_60 = {}, c_5 = {}, stationary mean = {}",
            c[59],
            c[4],
            target
        );
        assert!((c[59] - target).abs() < 0.05);
        let d_early = (c[10] - c[9]).abs();
        let d_late = (c[59] - c[58]).abs();
        assert!(d_late < d_early, "{d_late} !< {d_early}");
    }

    #[test]
    fn h2_matches_exact_transfer_oracle() {
        // Oracle: H_2 = P_2(phibar_1 P 1) / P^2 1 with every factor
        // evaluated through exact branch preimages and Simpson quadrature,
        // fully independent of the Ulam discretization.
        let alpha = 0.3;
        let p = MapParameter::new(alpha).unwrap();
        let phi = Observable::cosine();
        let one = |_: f64| 1.0;
        let u1 = |x: f64| transfer_exact(p, &one, x);
        let c1 = crate::grid::simpson(|x| phi.value(x) * u1(x), 0.0, 1.0, 1 << 16);
        let w = |y: f64| (phi.value(y) - c1) * u1(y);
        let n_cells = 1 << 12;
        let st = state_for(alpha, phi.clone(), n_cells, 2);
        assert_relative_eq!(st.mean(1).unwrap(), c1, epsilon = 1e-4);
        let h2 = st.compute_hn(2).unwrap();
        let grid = st.grid();
        // Skip the first cells: the pushforward density is singular there
        // and cell averages diverge from midpoint values.
        let mut max_err = 0.0f64;
        let mut l1_err = 0.0f64;
        for i in 8..n_cells {
            let x = grid.midpoint(i);
            let oracle = transfer_exact(p, &w, x) / transfer_exact(p, &u1, x);
            let err = (h2.values()[i] - oracle).abs();
            max_err = max_err.max(err);
            l1_err += err * grid.width();
        }
        assert!(max_err < 5e-3, "max pointwise error {max_err}");
        assert!(l1_err < 5e-4, "L1 error {l1_err}");
    }

    #[test]
    fn martingale_residual_vanishes_in_consistent_discretization() {
        let st = state_for(0.3, Observable::cosine(), 1 << 10, 41);
        for n in [1usize, 2, 5, 10, 20, 40] {
            let r = st.martingale_residual(n).unwrap();
            assert!(r <= 1e-8, "n={n}: residual {r:e}");
        }
    }

    #[test]
    fn three_variance_routes_agree() {
        for (alpha, phi) in [
            (0.1, Observable::identity()),
            (0.3, Observable::cosine()),
        ] {
            let st = state_for(alpha, phi, 1 << 10, 31);
            let n = 30;
            let direct = st.sigma_sq_direct(n, None).unwrap();
            let via_c = st.sigma_sq_identity_c(n).unwrap();
            let via_e = st.sigma_sq_identity_e(n).unwrap();
            let scale = direct.abs().max(1e-30);
            assert!(
                ((direct - via_c) / scale).abs() < 1e-6,
                "alpha={alpha}: direct {direct} vs c {via_c}"
            );
            assert!(
                ((direct - via_e) / scale).abs() < 1e-6,
                "alpha={alpha}: direct {direct} vs e {via_e}"
            );
            assert!(direct > 0.0);
        }
    }

    #[test]
    fn single_step_variance_is_the_second_moment() {
        let st = state_for(0.2, Observable::identity(), 512, 3);
        let direct = st.sigma_sq_direct(1, None).unwrap();
        assert_relative_eq!(direct, st.diag_term(1), max_relative = 1e-14);
        let via_e = st.sigma_sq_identity_e(1).unwrap();
        assert_relative_eq!(direct, via_e, max_relative = 1e-14);
    }

    #[test]
    fn lag_cap_matches_full_sum() {
        // At alpha = 0.1 the covariance lag decays like l^{-9}, so a cap of
        // 64 truncates far below the identity tolerances. Scans at small
        // base exponents rely on exactly this margin.
        let st = state_for(0.1, Observable::cosine(), 512, 120);
        let full = st.sigma_sq_direct(120, None).unwrap();
        let capped = st.sigma_sq_direct(120, Some(64)).unwrap();
        assert!(
            ((full - capped) / full).abs() < 1e-9,
            "full {full} vs capped {capped}"
        );
    }

    #[test]
    fn streaming_ladder_matches_state_variance() {
        let p = MapParameter::new(0.3).unwrap();
        let schedule = MapSchedule::constant(p, 130).unwrap();
        let grid = Grid::new(512).unwrap();
        let cache = MatrixCache::new();
        let ladder = sigma_sq_ladder(
            &schedule,
            &Observable::cosine(),
            grid,
            &[40, 120],
            64,
            &cache,
        )
        .unwrap();
        let st = state_for(0.3, Observable::cosine(), 512, 121);
        for (n, v) in ladder {
            let reference = st.sigma_sq_direct(n, Some(64)).unwrap();
            assert_relative_eq!(v, reference, max_relative = 1e-10);
        }
    }

    #[test]
    fn streaming_means_match_state_means() {
        let p = MapParameter::new(0.25).unwrap();
        let schedule = MapSchedule::constant(p, 25).unwrap();
        let grid = Grid::new(512).unwrap();
        let cache = MatrixCache::new();
        let means = schedule_means(&schedule, &Observable::cosine(), grid, 25, &cache).unwrap();
        let st = state_for(0.25, Observable::cosine(), 512, 25);
        for (k, &c) in means.iter().enumerate() {
            assert_relative_eq!(c, st.mean(k + 1).unwrap(), max_relative = 1e-13);
        }
        let moments =
            schedule_center_moments(&schedule, &Observable::cosine(), grid, 25, &cache).unwrap();
        for (k, &(c, q)) in moments.iter().enumerate() {
            assert_relative_eq!(c, means[k], max_relative = 1e-13);
            assert!(q > 0.0);
        }
    }

    #[test]
    fn tail_terms_decay_with_unit_log_slope() {
        let st = state_with_len(0.4, Observable::cosine(), 1 << 12, 1, 520);
        let ns: Vec<usize> = (4..=9).map(|e| (1usize << e) + 1).collect();
        let curve = st.tail_norm_curve(1, &ns).unwrap();
        let xs: Vec<f64> = curve.iter().map(|(n, _)| ((n - 1) as f64).ln()).collect();
        let ys: Vec<f64> = curve.iter().map(|(_, v)| v.ln()).collect();
        let fit = crate::stats::linear_fit(&xs, &ys).unwrap();
        assert!(fit.slope <= -1.0, "tail slope {}", fit.slope);
        for w in curve.windows(2) {
            assert!(w[1].1 <= w[0].1 * 1.0001, "tail norms not decreasing");
        }
    }

    #[test]
    fn hn_pointwise_stat_stabilizes() {
        let st = state_for(0.3, Observable::cosine(), 1 << 12, 200);
        let ns: Vec<usize> = (1..=200).collect();
        let stats = st.hn_pointwise_stat(&ns).unwrap();
        let early = stats[..100].iter().fold(0.0f64, |m, &v| m.max(v));
        let late = stats[100..].iter().fold(0.0f64, |m, &v| m.max(v));
        assert!(
            late <= 1.5 * early,
            "late window {late} vs early window {early}"
        );
    }

    #[test]
    fn hn_pointwise_stat_stable_under_refinement() {
        let coarse = state_for(0.3, Observable::cosine(), 1 << 12, 60);
        let fine = state_for(0.3, Observable::cosine(), 1 << 13, 60);
        let ns = [60usize];
        let a = coarse.hn_pointwise_stat(&ns).unwrap()[0];
        let b = fine.hn_pointwise_stat(&ns).unwrap()[0];
        assert!(
            ((a - b) / a).abs() < 0.05,
            "stat moved {a} -> {b} under refinement"
        );
    }

    #[test]
    fn hn_l2_bounded_in_admissible_range() {
        // q = 2 < 1/(2 alpha) = 5 at alpha = 0.1: uniform boundedness holds.
        let st = state_for(0.1, Observable::cosine(), 1 << 11, 200);
        let ns: Vec<usize> = (1..=200).collect();
        let norms = st.hn_norms(&ns, 2.0, 1.0).unwrap();
        let mut lq: Vec<f64> = norms.iter().map(|&(a, _)| a).collect();
        let max = lq.iter().fold(0.0f64, |m, &v| m.max(v));
        lq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = lq[lq.len() / 2];
        assert!(max / median <= 2.0, "max {max} vs median {median}");

        // alpha = 0.4 puts q = 2 outside the guaranteed range; values are
        // only required to be finite (observational).
        let st_out = state_for(0.4, Observable::cosine(), 1 << 11, 50);
        let out = st_out.hn_norms(&[50], 2.0, 1.0).unwrap();
        assert!(out[0].0.is_finite() && out[0].1.is_finite());
    }

    #[test]
    fn psi_reduces_when_h1_vanishes() {
        let st = state_for(0.3, Observable::cosine(), 1 << 10, 3);
        let psi1 = st.compute_psi(1).unwrap();
        let h2 = st.compute_hn(2).unwrap();
        let c1 = st.mean(1).unwrap();
        let t2 = st.schedule().params()[1];
        let grid = st.grid();
        for i in [0usize, 100, 511, 1023] {
            let x = grid.midpoint(i);
            let expected = st.observable().value(x) - c1 - h2.interpolate(t2.eval(x));
            assert_relative_eq!(psi1.values()[i], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn per_n_csv_is_written() {
        let st = state_for(0.3, Observable::cosine(), 256, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("per_n.csv");
        st.write_per_n_csv(&path, 2.0, 1.0).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "n,mean,sigma_sq,hn_lq,hn_pulled_r,hn_pointwise"
        );
        assert_eq!(lines.count(), 6);
    }
}
