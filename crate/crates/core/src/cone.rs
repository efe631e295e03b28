//! The invariant cone of admissible densities and its uses.
//!
//! For an exponent cap `alpha` and a constant `a > 1`, the cone consists of
//! nonnegative, nonincreasing `f` with `x^{alpha+1} f(x)` nondecreasing and
//! `f(x) <= a x^{-alpha} m(f)`. Transfer operators of maps with exponent at
//! most `alpha` preserve the cone once `a` is large enough, which is what
//! makes equal-mass cone pairs contract in `L^1` at a polynomial rate.
//!
//! [`cone_split`] decomposes `phi h - m(phi h)` (smooth `phi`, cone `h`) as a
//! difference `F - G` of two cone elements with equal mass, by choosing
//! constants `(lambda, nu, delta)` so that `(phi + lambda X + nu) h + delta`
//! and its `phi`-free counterpart are both admissible.

use crate::error::{Error, Result};
use crate::grid::GridDensity;
use crate::observable::Observable;

/// Cells skipped at the origin in cone checks: the first cell owns the
/// density singularity and midpoint sampling misrepresents it there.
pub const DEFAULT_BOUNDARY_SKIP: usize = 1;

/// Relative tolerance of the pointwise cone comparisons.
const CHECK_REL_TOL: f64 = 1e-9;

/// Cone constant and exponent cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeParams {
    a: f64,
    alpha: f64,
}

/// Default cone constant: generous enough for every exponent cap in (0, 1)
/// exercised by the experiments, as verified by the schedule-invariance tests.
pub const DEFAULT_CONE_CONSTANT: f64 = 25.0;

impl ConeParams {
    pub fn new(a: f64, alpha: f64) -> Result<Self> {
        if !(a > 1.0) || !a.is_finite() {
            return Err(Error::Domain {
                what: "cone constant a",
                value: a,
                expected: "a > 1",
            });
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Domain {
                what: "cone exponent cap alpha",
                value: alpha,
                expected: "0 < alpha < 1",
            });
        }
        Ok(Self { a, alpha })
    }

    /// The default constant [`DEFAULT_CONE_CONSTANT`] for a given cap.
    pub fn with_default_constant(alpha: f64) -> Result<Self> {
        Self::new(DEFAULT_CONE_CONSTANT, alpha)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Which cone condition failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeCondition {
    /// `f >= 0`.
    NonNegative,
    /// `f` nonincreasing.
    NonIncreasing,
    /// `x^{alpha+1} f` nondecreasing.
    WeightedNonDecreasing,
    /// `f(x) <= a x^{-alpha} m(f)`.
    SingularityBound,
}

/// First failed comparison of a cone check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeViolation {
    pub condition: ConeCondition,
    pub cell: usize,
    pub lhs: f64,
    pub rhs: f64,
}

/// Outcome of a cone membership check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeReport {
    pub ok: bool,
    pub mass: f64,
    pub violation: Option<ConeViolation>,
}

/// Checks the four cone conditions on grid midpoints, skipping the first
/// `skip` cells, and reports the first violation.
///
/// Comparisons carry a relative tolerance of `1e-9` scaled by the sup of the
/// sampled values, so exact ties and rounding noise do not fail.
pub fn cone_check(f: &GridDensity, cone: &ConeParams, skip: usize) -> ConeReport {
    let grid = f.grid();
    let n = grid.n_cells();
    let vals = f.values();
    let mass = f.integral();
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = CHECK_REL_TOL * scale + f64::MIN_POSITIVE;
    let start = skip.min(n.saturating_sub(1));

    let fail = |condition, cell, lhs, rhs| ConeReport {
        ok: false,
        mass,
        violation: Some(ConeViolation {
            condition,
            cell,
            lhs,
            rhs,
        }),
    };

    for i in start..n {
        let x = grid.midpoint(i);
        let v = vals[i];
        if v < -tol {
            return fail(ConeCondition::NonNegative, i, v, 0.0);
        }
        if v > cone.a * mass * x.powf(-cone.alpha) + tol {
            return fail(
                ConeCondition::SingularityBound,
                i,
                v,
                cone.a * mass * x.powf(-cone.alpha),
            );
        }
        if i + 1 < n {
            let w = vals[i + 1];
            if w > v + tol {
                return fail(ConeCondition::NonIncreasing, i + 1, w, v);
            }
            let xw = grid.midpoint(i + 1);
            let (wv, wv_next) = (x.powf(cone.alpha + 1.0) * v, xw.powf(cone.alpha + 1.0) * w);
            if wv_next < wv - tol {
                return fail(ConeCondition::WeightedNonDecreasing, i + 1, wv_next, wv);
            }
        }
    }
    ConeReport {
        ok: true,
        mass,
        violation: None,
    }
}

/// The splitting `phi h - m(phi h) = F - G` into equal-mass cone elements.
#[derive(Debug, Clone)]
pub struct ConeSplit {
    pub lambda: f64,
    pub nu: f64,
    pub delta: f64,
    /// `(phi + lambda X + nu) h + delta`.
    pub f: GridDensity,
    /// `(lambda X + nu) h + delta + m(phi h)`.
    pub g: GridDensity,
    /// `m(phi h)` by grid quadrature.
    pub phi_h_mean: f64,
    /// Whether the first-choice constants had to be enlarged.
    pub escalated: bool,
}

/// Splits `phi h - m(phi h)` into a difference of cone elements.
///
/// First choice of constants: `lambda = -|phi'|_inf`,
/// `nu = |phi + lambda X|_inf`, and
/// `delta = max( a/(alpha+1) (|phi'|_inf + |lambda|) m(h),
///               a/(a-1) |phi + lambda X + nu|_inf m(h) )`.
/// Both summands are then verified with [`cone_check`]; if either fails, the
/// constants are enlarged once (`nu` to cover `|lambda|`, `delta` to cover
/// the `phi`-free summand shifted by `m(phi h)`) before giving up.
pub fn cone_split(phi: &Observable, h: &GridDensity, cone: &ConeParams) -> Result<ConeSplit> {
    let report = cone_check(h, cone, DEFAULT_BOUNDARY_SKIP);
    if !report.ok {
        return Err(Error::Cone(format!(
            "cone_split weight h is not in the cone: {:?}",
            report.violation
        )));
    }
    let grid = h.grid();
    let (a, alpha) = (cone.a(), cone.alpha());
    let m_h = report.mass;
    let phi_mid = phi.sample(grid);
    let phi_h_mean = crate::grid::inner_product(&phi_mid, h.values()) * grid.width();

    let lambda = -phi.deriv_sup();
    // phi + lambda X is nonincreasing, so its sup norm sits at an endpoint.
    let v0 = phi.value(0.0);
    let v1 = phi.value(1.0) + lambda;
    let nu0 = v0.abs().max(v1.abs());

    let delta_for = |nu: f64, with_g_terms: bool| -> f64 {
        let w_sup = v0 + nu; // sup of (phi + lambda X + nu), attained at 0
        let mut d = (a / (alpha + 1.0) * (phi.deriv_sup() + lambda.abs()) * m_h)
            .max(a / (a - 1.0) * w_sup * m_h);
        if with_g_terms {
            d = d
                .max(a / (alpha + 1.0) * lambda.abs() * m_h - phi_h_mean)
                .max(a / (a - 1.0) * nu * m_h - phi_h_mean);
        }
        d
    };

    let build = |nu: f64, delta: f64, escalated: bool| -> Result<ConeSplit> {
        let n = grid.n_cells();
        let mut fv = Vec::with_capacity(n);
        let mut gv = Vec::with_capacity(n);
        for i in 0..n {
            let x = grid.midpoint(i);
            let base = (lambda * x + nu) * h.values()[i];
            fv.push(base + phi_mid[i] * h.values()[i] + delta);
            gv.push(base + delta + phi_h_mean);
        }
        Ok(ConeSplit {
            lambda,
            nu,
            delta,
            f: GridDensity::new_signed(grid, fv)?,
            g: GridDensity::new_signed(grid, gv)?,
            phi_h_mean,
            escalated,
        })
    };

    let mut split = build(nu0, delta_for(nu0, false), false)?;
    let ok = |s: &ConeSplit| {
        cone_check(&s.f, cone, DEFAULT_BOUNDARY_SKIP).ok
            && cone_check(&s.g, cone, DEFAULT_BOUNDARY_SKIP).ok
    };
    if !ok(&split) {
        let nu = nu0.max(lambda.abs());
        split = build(nu, delta_for(nu, true), true)?;
        if !ok(&split) {
            let f_rep = cone_check(&split.f, cone, DEFAULT_BOUNDARY_SKIP);
            let g_rep = cone_check(&split.g, cone, DEFAULT_BOUNDARY_SKIP);
            return Err(Error::Cone(format!(
                "cone_split summands stay outside the cone even after enlarging \
                 constants (F: {:?}, G: {:?})",
                f_rep.violation, g_rep.violation
            )));
        }
    }
    Ok(split)
}

/// Upper bound on `||f||_p` for `f` with `||f||_1 = l1` and
/// `|f(x)| <= K x^{-alpha}`, valid when `alpha p < 1`.
///
/// Splitting the integral of `|f|^p` at `x*` gives
/// `G(x*) = A x*^{-alpha (p-1)} + B x*^{1 - alpha p}` with
/// `A = K^{p-1} l1` and `B = K^p / (1 - alpha p)`; the bound is
/// `G(x*)^{1/p}` at the closed-form minimizer, clamped into `(0, 1]`.
pub fn lp_norm_bound(l1: f64, k_env: f64, alpha: f64, p: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain {
            what: "envelope exponent alpha",
            value: alpha,
            expected: "0 < alpha < 1",
        });
    }
    if !(p >= 1.0) {
        return Err(Error::Domain {
            what: "norm exponent p",
            value: p,
            expected: "p >= 1",
        });
    }
    if l1 < 0.0 || k_env < 0.0 {
        return Err(Error::Invalid(format!(
            "norms must be nonnegative (l1 = {l1}, K = {k_env})"
        )));
    }
    if p == 1.0 {
        return Ok(l1);
    }
    if alpha * p >= 1.0 {
        return Err(Error::Domain {
            what: "alpha * p",
            value: alpha * p,
            expected: "alpha p < 1 for p > 1",
        });
    }
    if l1 == 0.0 || k_env == 0.0 {
        return Ok(0.0);
    }
    let a_coef = k_env.powf(p - 1.0) * l1;
    let b_coef = k_env.powf(p) / (1.0 - alpha * p);
    // Stationarity: x*^{alpha - 1} = B (1 - alpha p) / (A alpha (p - 1)).
    let x_star = (k_env / (l1 * alpha * (p - 1.0))).powf(1.0 / (alpha - 1.0));
    let x_used = x_star.min(1.0);
    let g = a_coef * x_used.powf(-alpha * (p - 1.0)) + b_coef * x_used.powf(1.0 - alpha * p);
    Ok(g.powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{simpson, Grid, GridFnKind};
    use crate::observable::Observable;
    use approx::assert_relative_eq;

    fn cone(a: f64, alpha: f64) -> ConeParams {
        ConeParams::new(a, alpha).unwrap()
    }

    /// Graded quadrature of an integrand with an integrable singularity at 0.
    fn graded_integral(f: impl Fn(f64) -> f64 + Copy, upper: f64) -> f64 {
        (0..60)
            .map(|k| {
                let hi = upper * 0.5f64.powi(k);
                simpson(f, hi / 2.0, hi, 64)
            })
            .sum()
    }

    #[test]
    fn cone_params_validate_their_ranges() {
        assert!(ConeParams::new(1.0, 0.5).is_err());
        assert!(ConeParams::new(0.5, 0.5).is_err());
        assert!(ConeParams::new(2.0, 0.0).is_err());
        assert!(ConeParams::new(2.0, 1.0).is_err());
        let c = ConeParams::with_default_constant(0.3).unwrap();
        assert_eq!(c.a(), DEFAULT_CONE_CONSTANT);
        assert_eq!(c.alpha(), 0.3);
    }

    #[test]
    fn uniform_and_power_law_densities_sit_in_the_cone() {
        let grid = Grid::new(256).unwrap();
        let u = GridDensity::uniform(grid);
        assert!(cone_check(&u, &cone(2.0, 0.5), 0).ok);
        for alpha in [0.1, 0.3, 0.5] {
            let d = GridDensity::power_law(grid, alpha).unwrap();
            let report = cone_check(&d, &ConeParams::with_default_constant(alpha).unwrap(), 1);
            assert!(report.ok, "alpha={alpha}: {:?}", report.violation);
            assert_relative_eq!(report.mass, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn violations_are_reported_by_kind_and_cell() {
        let grid = Grid::new(64).unwrap();

        let mut vals = vec![1.0; 64];
        vals[0] = -0.5;
        let f = GridDensity::new_signed(grid, vals).unwrap();
        let r = cone_check(&f, &cone(2.0, 0.5), 0);
        assert_eq!(r.violation.unwrap().condition, ConeCondition::NonNegative);
        assert_eq!(r.violation.unwrap().cell, 0);

        let mut vals = vec![0.0; 64];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = 2.0 - i as f64 / 64.0;
        }
        vals[10] = 2.5;
        let f = GridDensity::new_signed(grid, vals).unwrap();
        let r = cone_check(&f, &cone(25.0, 0.5), 1);
        let v = r.violation.unwrap();
        assert_eq!(v.condition, ConeCondition::NonIncreasing);
        assert_eq!(v.cell, 10);

        // Steeper blowup than the cone envelope allows.
        let f = GridDensity::power_law(grid, 0.9).unwrap();
        let r = cone_check(&f, &cone(1.2, 0.2), 1);
        assert_eq!(r.violation.unwrap().condition, ConeCondition::SingularityBound);

        // Decays too fast: x^{1.2} e^{-20x} turns down past x = 0.06.
        let mut vals: Vec<f64> = (0..64).map(|i| (-20.0 * grid.midpoint(i)).exp()).collect();
        let mass: f64 = vals.iter().sum::<f64>() / 64.0;
        vals.iter_mut().for_each(|v| *v /= mass);
        let f = GridDensity::new_density(grid, vals).unwrap();
        let r = cone_check(&f, &cone(25.0, 0.2), 1);
        let v = r.violation.unwrap();
        assert_eq!(v.condition, ConeCondition::WeightedNonDecreasing);
        assert!(v.cell >= 3, "turnover reported at cell {}", v.cell);
    }

    #[test]
    fn the_first_cell_is_exempt_by_default() {
        let grid = Grid::new(64).unwrap();
        let mut vals = vec![1.0; 64];
        vals[0] = 101.0;
        let f = GridDensity::new_signed(grid, vals).unwrap();
        let flagged = cone_check(&f, &cone(2.0, 0.5), 0);
        assert_eq!(
            flagged.violation.unwrap().condition,
            ConeCondition::SingularityBound
        );
        assert_eq!(flagged.violation.unwrap().cell, 0);
        assert!(cone_check(&f, &cone(2.0, 0.5), DEFAULT_BOUNDARY_SKIP).ok);
    }

    #[test]
    fn splitting_the_identity_observable_over_the_uniform_density() {
        let grid = Grid::new(1024).unwrap();
        let h = GridDensity::uniform(grid);
        let split = cone_split(&Observable::identity(), &h, &cone(2.0, 0.5)).unwrap();
        assert_relative_eq!(split.lambda, -1.0, max_relative = 1e-6);
        assert!(split.nu.abs() <= 1e-6);
        assert_relative_eq!(split.delta, 8.0 / 3.0, max_relative = 1e-6);
        assert_relative_eq!(split.phi_h_mean, 0.5, epsilon = 1e-12);
        assert!(!split.escalated);

        // F is the constant 8/3 and G is 19/6 - x.
        for i in [0usize, 100, 511, 1023] {
            let x = grid.midpoint(i);
            assert_relative_eq!(split.f.values()[i], 8.0 / 3.0, max_relative = 1e-8);
            assert_relative_eq!(split.g.values()[i], 19.0 / 6.0 - x, max_relative = 1e-8);
        }
        assert!(cone_check(&split.f, &cone(2.0, 0.5), DEFAULT_BOUNDARY_SKIP).ok);
        assert!(cone_check(&split.g, &cone(2.0, 0.5), DEFAULT_BOUNDARY_SKIP).ok);
    }

    #[test]
    fn splits_reconstruct_the_centered_product() {
        let grid = Grid::new(512).unwrap();
        let cases = [
            (Observable::identity(), GridDensity::uniform(grid)),
            (Observable::cosine(), GridDensity::power_law(grid, 0.3).unwrap()),
            (Observable::polynomial(vec![0.7]), GridDensity::power_law(grid, 0.3).unwrap()),
        ];
        let c = cone(25.0, 0.3);
        for (phi, h) in &cases {
            let split = cone_split(phi, h, &c).unwrap();
            assert!(cone_check(&split.f, &c, DEFAULT_BOUNDARY_SKIP).ok, "{}", phi.name());
            assert!(cone_check(&split.g, &c, DEFAULT_BOUNDARY_SKIP).ok, "{}", phi.name());
            // F - G = phi h - m(phi h) cell by cell, so the masses agree.
            let mut worst = 0.0f64;
            for i in 0..512 {
                let phi_h = phi.value(grid.midpoint(i)) * h.values()[i];
                let gap = (split.f.values()[i] - split.g.values()[i])
                    - (phi_h - split.phi_h_mean);
                worst = worst.max(gap.abs());
            }
            assert!(worst <= 1e-10, "{}: reconstruction off by {worst:e}", phi.name());
            assert!((split.f.integral() - split.g.integral()).abs() <= 1e-10);
        }
    }

    #[test]
    fn splitting_requires_a_cone_density() {
        let grid = Grid::new(128).unwrap();
        let rising =
            GridDensity::from_midpoints(grid, GridFnKind::Density, |x| 0.5 + x).unwrap();
        assert!(cone_split(&Observable::identity(), &rising, &cone(2.0, 0.5)).is_err());
    }

    #[test]
    fn lp_bound_domain_and_degenerate_cases() {
        assert_eq!(lp_norm_bound(0.25, 3.0, 0.3, 1.0).unwrap(), 0.25);
        assert_eq!(lp_norm_bound(0.0, 1.0, 0.3, 2.0).unwrap(), 0.0);
        assert!(lp_norm_bound(0.1, 1.0, 0.0, 2.0).is_err());
        assert!(lp_norm_bound(0.1, 1.0, 0.5, 2.0).is_err());
        assert!(lp_norm_bound(0.1, 1.0, 0.3, 0.5).is_err());
        assert!(lp_norm_bound(-0.1, 1.0, 0.3, 2.0).is_err());
    }

    #[test]
    fn lp_bound_dominates_extremal_profiles() {
        // alpha = 0.3, p = 2, |f|_1 = 0.01, K = 1.
        let bound = lp_norm_bound(0.01, 1.0, 0.3, 2.0).unwrap();
        assert_relative_eq!(bound, 0.4593417264, max_relative = 1e-8);

        // Hard truncation x^{-0.3} on [0, b] with mass 0.01.
        let b = 0.007f64.powf(1.0 / 0.7);
        let mass = graded_integral(|x| x.powf(-0.3), b);
        assert_relative_eq!(mass, 0.01, max_relative = 1e-9);
        let l2 = graded_integral(|x| x.powf(-0.6), b).sqrt();
        assert_relative_eq!(l2, 0.3830749293, max_relative = 1e-6);
        assert!(l2 <= bound);

        // Capped profiles min(x^{-0.3}, c), rescaled to mass 0.01.
        for cap in [2.0f64, 10.0, 100.0] {
            let f = |x: f64| x.powf(-0.3).min(cap);
            let mass = graded_integral(f, 1.0);
            let scale = 0.01 / mass;
            let l2 = scale * graded_integral(|x| f(x) * f(x), 1.0).sqrt();
            assert!(l2 <= bound, "cap {cap}: {l2} > {bound}");
        }
    }

    #[test]
    fn closed_form_minimizer_matches_a_grid_search() {
        let cases = [
            (0.01, 1.0, 0.3, 2.0),
            (0.05, 2.0, 0.15, 3.0),
            // Large l1 pushes the stationary point past 1; clamped case.
            (5.0, 1.0, 0.3, 2.0),
        ];
        for (l1, k_env, alpha, p) in cases {
            let bound = lp_norm_bound(l1, k_env, alpha, p).unwrap();
            let a_coef = k_env.powf(p - 1.0) * l1;
            let b_coef = k_env.powf(p) / (1.0 - alpha * p);
            let mut best = f64::INFINITY;
            for i in 1..=1_000_000 {
                let x = i as f64 / 1e6;
                let g = a_coef * x.powf(-alpha * (p - 1.0)) + b_coef * x.powf(1.0 - alpha * p);
                best = best.min(g);
            }
            assert_relative_eq!(bound.powf(p), best, max_relative = 1e-6);
        }
    }
}
