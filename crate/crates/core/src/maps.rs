//! The intermittent map family and composition schedules.
//!
//! Each map is `T_a(x) = x + 2^a x^{1+a}` on `[0, 1/2]` and `2x - 1` on
//! `(1/2, 1]`, for an exponent `0 < a < 1`. The fixed point at the origin is
//! neutral (`T_a'(0) = 1`), which is what makes compositions mix only
//! polynomially. With the endpoints of `[0, 1]` identified the map is
//! continuous; we adopt the convention that the branch point `x = 1/2` maps
//! to `1` exactly and carries the left-branch derivative.

use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream};
use rand::Rng;

/// Absolute tolerance of the left-branch inverse solver.
pub const INVERSE_TOL: f64 = 1e-14;

const MAX_NEWTON_ITERS: usize = 80;

/// Exponent of one intermittent map, restricted to `(0, 1)`.
///
/// Branch evaluations are hot paths of every orbit ensemble, so the
/// constants `2^a`, `1 + a` and `2^a (1 + a)` are precomputed here.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapParameter {
    alpha: f64,
    two_pow_alpha: f64,
    exponent: f64,
    deriv_coeff: f64,
}

impl MapParameter {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
            return Err(Error::Domain {
                what: "map exponent alpha",
                value: alpha,
                expected: "0 < alpha < 1",
            });
        }
        let two_pow_alpha = 2f64.powf(alpha);
        Ok(Self {
            alpha,
            two_pow_alpha,
            exponent: 1.0 + alpha,
            deriv_coeff: two_pow_alpha * (1.0 + alpha),
        })
    }

    /// Branch formulas without the exponent range check, so tests can pin
    /// closed-form values at the boundary exponent `a = 1`.
    #[cfg(test)]
    pub(crate) fn unchecked(alpha: f64) -> Self {
        let two_pow_alpha = 2f64.powf(alpha);
        Self {
            alpha,
            two_pow_alpha,
            exponent: 1.0 + alpha,
            deriv_coeff: two_pow_alpha * (1.0 + alpha),
        }
    }

    #[inline]
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Applies the map. The branch point `x = 1/2` returns `1` exactly.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&x), "map argument {x} outside [0,1]");
        if x < 0.5 {
            // x (1 + 2^a x^a) < 1 holds analytically; the min guards rounding.
            (x + self.two_pow_alpha * x.powf(self.exponent)).min(1.0)
        } else if x == 0.5 {
            1.0
        } else {
            2.0 * x - 1.0
        }
    }

    /// Derivative of the map; `x = 1/2` carries the left-branch value.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&x), "map argument {x} outside [0,1]");
        if x <= 0.5 {
            1.0 + self.deriv_coeff * x.powf(self.alpha)
        } else {
            2.0
        }
    }

    /// Inverse of the left branch on `[0, 1/2]`, accurate to [`INVERSE_TOL`].
    ///
    /// Uses Newton iteration safeguarded by bisection; the branch derivative
    /// is at least 1, so the residual bounds the error in `x` directly.
    pub fn left_branch_inverse(&self, y: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&y), "inverse argument {y} outside [0,1]");
        if y <= 0.0 {
            return 0.0;
        }
        if y >= 1.0 {
            return 0.5;
        }
        let (mut lo, mut hi) = (0.0f64, 0.5f64);
        let mut x = 0.5 * y;
        for _ in 0..MAX_NEWTON_ITERS {
            let fx = x + self.two_pow_alpha * x.powf(self.exponent) - y;
            if fx.abs() < 0.1 * INVERSE_TOL {
                break;
            }
            if fx > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let dfx = 1.0 + self.deriv_coeff * x.powf(self.alpha);
            let next = x - fx / dfx;
            x = if next > lo && next < hi {
                next
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo < 1e-17 {
                break;
            }
        }
        x
    }

    /// Inverse of the right branch: `(y + 1) / 2`, valued in `[1/2, 1]`.
    #[inline]
    pub fn right_branch_inverse(&self, y: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&y), "inverse argument {y} outside [0,1]");
        0.5 * (y + 1.0)
    }
}

/// How a schedule was generated; kept for reporting.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    Constant { alpha: f64 },
    Perturbed { base: f64, epsilon: f64, seed: u64 },
    Explicit,
    Realization { seed: u64, index: u64 },
}

/// A finite sequence of map exponents `b_1, b_2, ...` applied left to right:
/// step `k` of an orbit applies `T_{b_k}`.
///
/// Entries are materialized at construction, so reading an entry twice always
/// agrees, and every entry obeys `0 < b_k <= alpha_max < 1` for the declared
/// cap `alpha_max`.
#[derive(Debug, Clone)]
pub struct MapSchedule {
    kind: ScheduleKind,
    params: Vec<MapParameter>,
    alpha_max: f64,
}

impl MapSchedule {
    /// The same map at every step.
    pub fn constant(param: MapParameter, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Schedule("schedule length must be positive".into()));
        }
        Ok(Self {
            kind: ScheduleKind::Constant { alpha: param.alpha() },
            params: vec![param; len],
            alpha_max: param.alpha(),
        })
    }

    /// Exponents drawn uniformly from `(base - epsilon, base + epsilon)`,
    /// deterministically from `seed`. Requires `0 < base - epsilon` and
    /// `base + epsilon < 1`.
    pub fn perturbed(base: f64, epsilon: f64, len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Schedule("schedule length must be positive".into()));
        }
        if !(epsilon >= 0.0) || !(base - epsilon > 0.0) || !(base + epsilon < 1.0) {
            return Err(Error::Schedule(format!(
                "perturbation window ({} - {eps}, {} + {eps}) must stay inside (0, 1)",
                base,
                base,
                eps = epsilon
            )));
        }
        let mut rng = derive_rng(seed, 0, stream::SCHEDULE);
        let params = (0..len)
            .map(|_| {
                let beta = if epsilon == 0.0 {
                    base
                } else {
                    base + rng.random_range(-epsilon..epsilon)
                };
                MapParameter::new(beta)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: ScheduleKind::Perturbed { base, epsilon, seed },
            params,
            alpha_max: if epsilon == 0.0 { base } else { base + epsilon },
        })
    }

    /// An explicitly listed sequence of exponents.
    pub fn explicit(params: Vec<MapParameter>) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::Schedule("schedule length must be positive".into()));
        }
        let alpha_max = params.iter().map(|p| p.alpha()).fold(0.0, f64::max);
        Ok(Self {
            kind: ScheduleKind::Explicit,
            params,
            alpha_max,
        })
    }

    /// A sequence of draws from a finite map set, `symbols[k]` indexing into
    /// `set`. Used by random (quenched) composition realizations.
    pub fn from_symbols(
        set: &[MapParameter],
        symbols: &[u32],
        seed: u64,
        index: u64,
    ) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Schedule("schedule length must be positive".into()));
        }
        let params = symbols
            .iter()
            .map(|&s| {
                set.get(s as usize).copied().ok_or_else(|| {
                    Error::Schedule(format!("symbol {s} outside map set of size {}", set.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let alpha_max = params.iter().map(|p| p.alpha()).fold(0.0, f64::max);
        Ok(Self {
            kind: ScheduleKind::Realization { seed, index },
            params,
            alpha_max,
        })
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    /// The entries; step `k` (1-based) applies `params()[k - 1]`.
    pub fn params(&self) -> &[MapParameter] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Declared cap on the exponents; strictly below 1.
    pub fn alpha_max(&self) -> f64 {
        self.alpha_max
    }

    /// Number of distinct exponents, keyed at 12-decimal resolution (the
    /// same key the matrix cache uses). Drives the cache-or-build-transient
    /// decision for per-step operators.
    pub fn distinct_parameter_count(&self) -> usize {
        let mut keys: Vec<i64> = self
            .params
            .iter()
            .map(|p| (p.alpha() * 1e12).round() as i64)
            .collect();
        keys.sort_unstable();
        keys.dedup();
        keys.len()
    }

    /// Requires the schedule to cover at least `n` steps.
    pub fn require_len(&self, n: usize) -> Result<()> {
        if n > self.params.len() {
            Err(Error::Schedule(format!(
                "schedule of length {} cannot cover {n} steps",
                self.params.len()
            )))
        } else {
            Ok(())
        }
    }
}

/// Iterates `x0` through the first `n` schedule entries, returning the full
/// orbit `x_0, x_1, ..., x_n` (`n + 1` values).
pub fn iterate_orbit(schedule: &MapSchedule, x0: f64, n: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&x0) {
        return Err(Error::Domain {
            what: "initial condition x0",
            value: x0,
            expected: "0 <= x0 <= 1",
        });
    }
    schedule.require_len(n)?;
    let mut orbit = Vec::with_capacity(n + 1);
    orbit.push(x0);
    let mut x = x0;
    for p in &schedule.params()[..n] {
        x = p.eval(x);
        orbit.push(x);
    }
    Ok(orbit)
}
