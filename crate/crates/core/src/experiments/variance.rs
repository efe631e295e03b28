//! Variance growth along nearby-map schedules and the summed-autocorrelation
//! variance of a single map, with a one-sided coboundary verdict.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{inner_product, kahan_sum, Grid, GridDensity};
use crate::maps::{MapParameter, MapSchedule};
use crate::martingale::sigma_sq_ladder;
use crate::observable::Observable;
use crate::stats::linear_fit;
use crate::ulam::MatrixCache;

use super::decay::validate_ladder;

/// Default truncation of the correlation series.
pub const GREEN_KUBO_K_MAX: usize = 10_000;

/// Early stop: the partial sum moved less than this since the previous
/// decade checkpoint.
const DECADE_STALL_TOL: f64 = 1e-10;

/// Lag-0 terms below this (relative to the observable's scale) count as
/// numerically zero.
const DEGENERATE_TOL: f64 = 1e-13;

/// Invariant-density power iteration backing the correlation terms.
const FIXED_POINT_TOL: f64 = 1e-10;
const FIXED_POINT_MAX_ITERS: usize = 50_000;

/// A fixed point whose residual exceeds this cannot certify a verdict.
const CERTIFICATION_RESIDUAL: f64 = 1e-6;

/// Variances below this are too small for log-log exponent fits.
const SIGMA_SQ_LOG_FLOOR: f64 = 1e-12;

/// One-sided verdicts: a variance clearly above the truncation-tail noise
/// certifies "not a coboundary"; small variance is never promoted to "is a
/// coboundary", because that direction is not decidable numerically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoboundaryVerdict {
    /// The summed variance exceeds ten times the tail estimate.
    NotCoboundary,
    /// Unresolved: consistent with a coboundary, or the series or the
    /// invariant density did not converge well enough to certify.
    Inconclusive,
    /// The centered observable is numerically zero.
    Degenerate,
}

/// The summed-autocorrelation variance of one map and its convergence data.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct GreenKuboReport {
    /// `int phihat^2 h dm + 2 sum_k int phihat (phihat o T^k) h dm`,
    /// clamped at 0 against cancellation noise.
    pub sigma_sq: f64,
    /// The lag-0 term alone.
    pub diagonal: f64,
    /// Correlation lags actually summed.
    pub terms_used: usize,
    /// Sum of |term| since the previous decade checkpoint; the tail
    /// estimate the verdict compares against.
    pub tail_abs_sum: f64,
    /// Whether the series stalled below tolerance before `k_max`.
    pub converged: bool,
    pub verdict: CoboundaryVerdict,
    /// L^1 residual of the power iteration that produced the invariant
    /// density.
    pub fixed_point_residual: f64,
}

/// One perturbed schedule's variance ladder and fitted growth exponent.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ScheduleVariance {
    /// Seed the schedule's exponents were drawn from.
    pub seed: u64,
    /// `(n, sigma_n^2)` over the requested ladder.
    pub points: Vec<(usize, f64)>,
    /// Log-log slope of `sigma_n^2` against `n`; `None` when a ladder value
    /// is too small to take logs.
    pub beta_hat: Option<f64>,
}

/// A scan of variance growth across schedules drawn near one base map.
#[derive(Debug, Clone, serde::Serialize)]
pub struct VarianceScan {
    pub per_schedule: Vec<ScheduleVariance>,
    pub min_beta_hat: Option<f64>,
    pub median_beta_hat: Option<f64>,
    /// Relative width `(max - min) / midpoint` of `sigma_n^2 / n`, pooled
    /// over all schedules at ladder points in the top octave
    /// `[n_max / 2, n_max]`.
    pub band_rel_width: Option<f64>,
    /// Green-Kubo report for the base map.
    pub base_report: GreenKuboReport,
    /// The base observable failed the not-a-coboundary certificate; the
    /// scan still runs, but linear growth is not guaranteed.
    pub coboundary_warning: bool,
    /// The base variance is numerically zero.
    pub degenerate: bool,
}

/// Sums the stationary autocorrelations of `phi` under one map:
/// `sigma^2 = int phihat^2 h dm + 2 sum_{k=1}^{K} int phihat P^k(phihat h) dm`
/// with `phihat = phi - int phi h dm` and `h` the Ulam invariant density.
///
/// Partial sums are checkpointed at decades `k = 10, 100, ...`; the series
/// stops early once a checkpoint moves less than `1e-10`. The verdict is
/// one-sided: "not a coboundary" only when the series converged, the fixed
/// point did, and `sigma^2` exceeds ten times the tail estimate.
pub fn green_kubo_variance(
    beta: MapParameter,
    phi: &Observable,
    k_max: usize,
    grid: Grid,
    cache: &MatrixCache,
) -> Result<GreenKuboReport> {
    if k_max == 0 {
        return Err(Error::Invalid("correlation series needs k_max >= 1".into()));
    }
    let matrix = cache.get_or_build(beta, grid);
    let start = GridDensity::uniform(grid);
    let (h, fixed_point_residual, _) =
        matrix.fixed_point(&start, FIXED_POINT_TOL, FIXED_POINT_MAX_ITERS)?;
    let width = grid.width();
    let phi_mid = phi.sample(grid);
    let mean = inner_product(&phi_mid, h.values()) * width;
    let phi_hat: Vec<f64> = phi_mid.iter().map(|v| v - mean).collect();
    let diagonal =
        kahan_sum(phi_hat.iter().zip(h.values()).map(|(&a, &hv)| a * a * hv)) * width;

    let mut g: Vec<f64> = phi_hat
        .iter()
        .zip(h.values())
        .map(|(&a, &hv)| a * hv)
        .collect();
    let mut scratch = vec![0.0; grid.n_cells()];
    let mut terms: Vec<f64> = Vec::new();
    let mut prev_partial = 0.0f64;
    let mut prev_len = 0usize;
    let mut tail_abs_sum = 0.0f64;
    let mut converged = false;
    let mut boundary = 10usize.min(k_max);
    for k in 1..=k_max {
        matrix.push_values(&g, &mut scratch);
        std::mem::swap(&mut g, &mut scratch);
        terms.push(kahan_sum(phi_hat.iter().zip(&g).map(|(&a, &gv)| a * gv)) * width);
        if k == boundary {
            let partial = kahan_sum(terms.iter().copied());
            tail_abs_sum = kahan_sum(terms[prev_len..].iter().map(|t| t.abs()));
            if (partial - prev_partial).abs() < DECADE_STALL_TOL {
                converged = true;
                break;
            }
            prev_partial = partial;
            prev_len = terms.len();
            boundary = (boundary * 10).min(k_max);
        }
    }

    let series = kahan_sum(terms.iter().copied());
    let sigma_sq = (diagonal + 2.0 * series).max(0.0);
    let scale = 1.0 + phi.sup_norm() * phi.sup_norm();
    let verdict = if diagonal < DEGENERATE_TOL * scale {
        CoboundaryVerdict::Degenerate
    } else if !converged || fixed_point_residual > CERTIFICATION_RESIDUAL {
        CoboundaryVerdict::Inconclusive
    } else if sigma_sq > 10.0 * tail_abs_sum {
        CoboundaryVerdict::NotCoboundary
    } else {
        CoboundaryVerdict::Inconclusive
    };
    Ok(GreenKuboReport {
        sigma_sq,
        diagonal,
        terms_used: terms.len(),
        tail_abs_sum,
        converged,
        verdict,
        fixed_point_residual,
    })
}

/// Draws `n_schedules` perturbed schedules with exponents in
/// `(base - epsilon, base + epsilon)`, computes `sigma_n^2` over the ladder
/// for each, and fits a growth exponent per schedule.
///
/// Correlation lags beyond `lag_cap` are dropped; the omitted covariances
/// decay like `l^{1 - 1/alpha}`, so the cap is accurate for small exponents
/// and must grow as `base + epsilon` approaches 1. Schedule `j` draws from
/// `seed + j`, so the scan is reproducible and each schedule is independent
/// of the worker count.
pub fn variance_growth_scan(
    base: f64,
    epsilon: f64,
    phi: &Observable,
    ladder: &[usize],
    n_schedules: usize,
    lag_cap: usize,
    grid: Grid,
    seed: u64,
    cache: &MatrixCache,
) -> Result<VarianceScan> {
    validate_ladder(ladder)?;
    if ladder.len() < 2 {
        return Err(Error::Invalid(
            "variance scan needs at least 2 ladder entries for exponent fits".into(),
        ));
    }
    if n_schedules == 0 {
        return Err(Error::Invalid("variance scan needs n_schedules >= 1".into()));
    }
    if lag_cap == 0 {
        return Err(Error::Invalid("variance scan needs lag_cap >= 1".into()));
    }
    let max_n = *ladder.last().expect("nonempty ladder");
    let schedules: Vec<(u64, MapSchedule)> = (0..n_schedules)
        .map(|j| {
            let s = seed.wrapping_add(j as u64);
            Ok((s, MapSchedule::perturbed(base, epsilon, max_n, s)?))
        })
        .collect::<Result<_>>()?;

    let base_report =
        green_kubo_variance(MapParameter::new(base)?, phi, GREEN_KUBO_K_MAX, grid, cache)?;
    let degenerate = base_report.verdict == CoboundaryVerdict::Degenerate;
    let coboundary_warning = base_report.verdict != CoboundaryVerdict::NotCoboundary;

    let per_schedule: Vec<ScheduleVariance> = schedules
        .par_iter()
        .map(|(sched_seed, schedule)| -> Result<ScheduleVariance> {
            let points = sigma_sq_ladder(schedule, phi, grid, ladder, lag_cap, cache)?;
            let beta_hat = if points.iter().all(|&(_, v)| v > SIGMA_SQ_LOG_FLOOR) {
                let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
                let ys: Vec<f64> = points.iter().map(|&(_, v)| v.ln()).collect();
                Some(linear_fit(&xs, &ys)?.slope)
            } else {
                None
            };
            Ok(ScheduleVariance {
                seed: *sched_seed,
                points,
                beta_hat,
            })
        })
        .collect::<Result<_>>()?;

    let mut hats: Vec<f64> = per_schedule.iter().filter_map(|s| s.beta_hat).collect();
    hats.sort_by(|a, b| a.total_cmp(b));
    let min_beta_hat = hats.first().copied();
    let median_beta_hat = if hats.is_empty() {
        None
    } else {
        let mid = hats.len() / 2;
        Some(if hats.len() % 2 == 1 {
            hats[mid]
        } else {
            0.5 * (hats[mid - 1] + hats[mid])
        })
    };

    let mut ratios: Vec<f64> = Vec::new();
    for s in &per_schedule {
        for &(n, v) in &s.points {
            if n * 2 >= max_n {
                ratios.push(v / n as f64);
            }
        }
    }
    let band_rel_width = if !ratios.is_empty() && ratios.iter().all(|r| *r > SIGMA_SQ_LOG_FLOOR) {
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some((hi - lo) / (0.5 * (hi + lo)))
    } else {
        None
    };

    Ok(VarianceScan {
        per_schedule,
        min_beta_hat,
        median_beta_hat,
        band_rel_width,
        base_report,
        coboundary_warning,
        degenerate,
    })
}
