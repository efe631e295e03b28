//! TOML experiment configs: schema, defaults, cross-field validation, and
//! regime warnings.
//!
//! A config is one TOML document. `kind` picks the experiment; shared tables
//! (`[schedule]`, `[observable]`) and one kind-specific table carry the rest.
//! Unknown keys are rejected. `resolve` fills every default in place so the
//! serialized echo of a resolved config reproduces the run exactly.

use std::path::PathBuf;

use pmlab::cone::ConeParams;
use pmlab::experiments::GREEN_KUBO_K_MAX;
use pmlab::montecarlo::{CltThresholds, RandomScheme};
use pmlab::{Grid, GridDensity, MapParameter, MapSchedule, Observable};
use serde::{Deserialize, Serialize};

/// The runnable experiment kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Decay,
    LpDecay,
    CompositeDecay,
    MartingaleIdentities,
    VarianceScan,
    GreenKubo,
    Clt,
    QuenchedClt,
    Sbc,
    Slln,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 10] = [
        ExperimentKind::Decay,
        ExperimentKind::LpDecay,
        ExperimentKind::CompositeDecay,
        ExperimentKind::MartingaleIdentities,
        ExperimentKind::VarianceScan,
        ExperimentKind::GreenKubo,
        ExperimentKind::Clt,
        ExperimentKind::QuenchedClt,
        ExperimentKind::Sbc,
        ExperimentKind::Slln,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Decay => "decay",
            ExperimentKind::LpDecay => "lp-decay",
            ExperimentKind::CompositeDecay => "composite-decay",
            ExperimentKind::MartingaleIdentities => "martingale-identities",
            ExperimentKind::VarianceScan => "variance-scan",
            ExperimentKind::GreenKubo => "green-kubo",
            ExperimentKind::Clt => "clt",
            ExperimentKind::QuenchedClt => "quenched-clt",
            ExperimentKind::Sbc => "sbc",
            ExperimentKind::Slln => "slln",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            ExperimentKind::Decay => {
                "L1 loss-of-memory curve for an equal-mean pair under a schedule, with a rate fit"
            }
            ExperimentKind::LpDecay => "L^p (p > 1) loss-of-memory curve and rate fit",
            ExperimentKind::CompositeDecay => {
                "decay of the composite remainder seeded at step i, with a rate fit"
            }
            ExperimentKind::MartingaleIdentities => {
                "reverse-martingale residuals, three-way variance agreement, and the weighted H_n statistic"
            }
            ExperimentKind::VarianceScan => {
                "variance growth exponents across schedules drawn near one base map"
            }
            ExperimentKind::GreenKubo => {
                "summed-autocorrelation variance of one map with a one-sided coboundary verdict"
            }
            ExperimentKind::Clt => "self-normed normality tests of ensemble sums over master seeds",
            ExperimentKind::QuenchedClt => {
                "per-realization normality suite for Bernoulli random compositions"
            }
            ExperimentKind::Sbc => "Borel-Cantelli discrepancy envelopes along trajectories",
            ExperimentKind::Slln => "strong-law envelope |S_n| = O(n^eta) over sampled sequences",
        }
    }

    fn section(self) -> &'static str {
        match self {
            ExperimentKind::Decay | ExperimentKind::LpDecay => "decay",
            ExperimentKind::CompositeDecay => "composite",
            ExperimentKind::MartingaleIdentities => "identities",
            ExperimentKind::VarianceScan => "scan",
            ExperimentKind::GreenKubo => "green-kubo",
            ExperimentKind::Clt => "clt",
            ExperimentKind::QuenchedClt => "quenched",
            ExperimentKind::Sbc => "sbc",
            ExperimentKind::Slln => "slln",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKindSpec {
    Constant,
    Perturbed,
    Explicit,
}

/// The `[schedule]` table.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ScheduleSpec {
    pub kind: ScheduleKindSpec,
    /// Constant schedules: the single exponent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Perturbed schedules: exponents drawn uniformly from
    /// `(base - epsilon, base + epsilon)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Explicit schedules: the full exponent list, applied in order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    /// Composition length; filled from the experiment's horizon when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub len: Option<usize>,
    /// Seed for perturbed draws; defaults to the top-level seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ScheduleSpec {
    /// Smallest composition length the experiment needs.
    fn fill_len(&mut self, needed: usize) -> Result<(), String> {
        match self.kind {
            ScheduleKindSpec::Explicit => {
                let have = self.alphas.as_ref().map_or(0, Vec::len);
                if have < needed {
                    return Err(format!(
                        "schedule: explicit alphas list has {have} entries, the experiment needs {needed}"
                    ));
                }
            }
            _ => {
                let len = *self.len.get_or_insert(needed);
                if len < needed {
                    return Err(format!(
                        "schedule: len = {len} is shorter than the experiment horizon {needed}"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self, default_seed: u64) -> Result<MapSchedule, String> {
        let seed = self.seed.unwrap_or(default_seed);
        let err = |e: pmlab::Error| e.to_string();
        match self.kind {
            ScheduleKindSpec::Constant => {
                let a = self.alpha.ok_or("schedule: constant kind needs `alpha`")?;
                let len = self.len.ok_or("schedule: constant kind needs `len`")?;
                let p = MapParameter::new(a).map_err(err)?;
                MapSchedule::constant(p, len).map_err(err)
            }
            ScheduleKindSpec::Perturbed => {
                let base = self.base.ok_or("schedule: perturbed kind needs `base`")?;
                let eps = self.epsilon.ok_or("schedule: perturbed kind needs `epsilon`")?;
                let len = self.len.ok_or("schedule: perturbed kind needs `len`")?;
                MapSchedule::perturbed(base, eps, len, seed).map_err(err)
            }
            ScheduleKindSpec::Explicit => {
                let alphas = self
                    .alphas
                    .as_ref()
                    .ok_or("schedule: explicit kind needs `alphas`")?;
                let params = alphas
                    .iter()
                    .map(|&a| MapParameter::new(a))
                    .collect::<pmlab::Result<Vec<_>>>()
                    .map_err(err)?;
                MapSchedule::explicit(params).map_err(err)
            }
        }
    }

    fn reject_unused(&self) -> Result<(), String> {
        let complain = |field: &str| {
            Err(format!(
                "schedule: `{field}` does not apply to kind {:?}",
                self.kind
            ))
        };
        match self.kind {
            ScheduleKindSpec::Constant => {
                if self.base.is_some() || self.epsilon.is_some() {
                    return complain("base/epsilon");
                }
                if self.alphas.is_some() {
                    return complain("alphas");
                }
            }
            ScheduleKindSpec::Perturbed => {
                if self.alpha.is_some() {
                    return complain("alpha");
                }
                if self.alphas.is_some() {
                    return complain("alphas");
                }
            }
            ScheduleKindSpec::Explicit => {
                if self.alpha.is_some() || self.base.is_some() || self.epsilon.is_some() {
                    return complain("alpha/base/epsilon");
                }
                if self.len.is_some() {
                    return complain("len");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservableKind {
    Identity,
    Cosine,
    Polynomial,
}

/// An `[observable]` table or inline observable value.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ObservableSpec {
    pub kind: ObservableKind,
    /// Polynomial coefficients, lowest degree first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<f64>>,
}

impl ObservableSpec {
    pub fn build(&self) -> Result<Observable, String> {
        match self.kind {
            ObservableKind::Identity => {
                self.no_coefficients()?;
                Ok(Observable::identity())
            }
            ObservableKind::Cosine => {
                self.no_coefficients()?;
                Ok(Observable::cosine())
            }
            ObservableKind::Polynomial => {
                let c = self
                    .coefficients
                    .clone()
                    .ok_or("observable: polynomial kind needs `coefficients`")?;
                if c.is_empty() || c.iter().any(|v| !v.is_finite()) {
                    return Err("observable: coefficients must be nonempty and finite".into());
                }
                Ok(Observable::polynomial(c))
            }
        }
    }

    fn no_coefficients(&self) -> Result<(), String> {
        if self.coefficients.is_some() {
            return Err(format!(
                "observable: `coefficients` only applies to polynomial, not {:?}",
                self.kind
            ));
        }
        Ok(())
    }
}

/// Density choice for a loss-of-memory input: exponent 0 is the uniform
/// density, anything else the normalized power law `x^{-e}`.
fn build_density(grid: Grid, exponent: f64) -> Result<GridDensity, String> {
    if exponent == 0.0 {
        Ok(GridDensity::uniform(grid))
    } else {
        GridDensity::power_law(grid, exponent).map_err(|e| e.to_string())
    }
}

/// The `[decay]` table, shared by `decay` and `lp-decay`.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct DecaySection {
    /// Norm index; fixed at 1 for `decay`, must exceed 1 for `lp-decay`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// Power-law exponent of the first cone input (0 = uniform).
    #[serde(default)]
    pub phi_exponent: f64,
    /// Power-law exponent of the second cone input (0 = uniform).
    #[serde(default)]
    pub psi_exponent: f64,
    /// Smooth inputs override the cone pair when both are present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_observable: Option<ObservableSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_observable: Option<ObservableSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_window: Option<(usize, usize)>,
    /// Divide out the `(log n)^{1/alpha}` factor before fitting.
    #[serde(default)]
    pub log_correction: bool,
    /// Gate: fitted slope must not exceed this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_max: Option<f64>,
    /// Gate: fitted slope must lie inside this closed interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_range: Option<(f64, f64)>,
}

/// The `[composite]` table.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CompositeSection {
    /// Seeding step of the composite remainder.
    pub i: usize,
    #[serde(default = "one")]
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_window: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_max: Option<f64>,
}

/// The `[identities]` table.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct IdentitiesSection {
    #[serde(default = "fifty")]
    pub n_max: usize,
    /// Gate: max L1 residual of the reverse-martingale identity.
    #[serde(default = "tol_1e8")]
    pub residual_tol: f64,
    /// Gate: max relative spread between the three variance routes.
    #[serde(default = "tol_1e6")]
    pub sigma_rel_tol: f64,
    /// Lag cap for the direct variance route; `None` keeps every lag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lag_cap: Option<usize>,
    /// Ladder for the weighted sup statistic of H_n; omitted = skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hn_ladder: Option<Vec<usize>>,
    /// Gate on the weighted H_n statistic: late-window max over early-window
    /// max (ladder split at its midpoint).
    #[serde(default = "ratio_3_2")]
    pub hn_ratio_max: f64,
}

/// The `[scan]` table.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ScanSection {
    /// Base exponent the schedules are drawn around.
    pub base: f64,
    /// Half-width of the draw; 0 reproduces the stationary map.
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<Vec<usize>>,
    #[serde(default = "ten")]
    pub n_schedules: usize,
    #[serde(default = "sixty_four")]
    pub lag_cap: usize,
    /// Gate: every fitted growth exponent lies in this closed interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_hat_range: Option<(f64, f64)>,
    /// Gate: relative width of the pooled sigma_n^2 / n band.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_max: Option<f64>,
    /// Gate (epsilon = 0 only): median sigma_n^2 / n at the ladder top must
    /// match the base map's summed-autocorrelation variance this closely.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub green_kubo_rel_tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictSpec {
    NotCoboundary,
    Inconclusive,
    Degenerate,
}

/// The `[green-kubo]` table.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct GreenKuboSection {
    pub beta: f64,
    #[serde(default = "gk_k_max")]
    pub k_max: usize,
    /// Gate: the report's verdict must equal this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub require_verdict: Option<VerdictSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaSpec {
    Empirical,
    Operator,
}

/// The `[clt]` table.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CltSection {
    /// Horizon of each centered sum.
    pub n: usize,
    /// Ensemble size per master seed.
    pub samples: usize,
    /// Master seeds; filled as `seed, seed+1, ...` over `n-seeds` when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "one_usize")]
    pub n_seeds: usize,
    /// Gate: at least this many seeds must pass; defaults to all of them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_passes: Option<usize>,
    #[serde(default = "p_min_default")]
    pub p_min: f64,
    #[serde(default = "skew_default")]
    pub skew_max: f64,
    #[serde(default = "kurt_default")]
    pub kurt_tol: f64,
    #[serde(default = "sigma_default")]
    pub sigma: SigmaSpec,
    /// Lag cap for the operator-variance route.
    #[serde(default = "sixty_four")]
    pub lag_cap: usize,
    /// Recording points; defaults to the horizon alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<usize>>,
    /// Also write the raw per-checkpoint sums (size-guarded).
    #[serde(default)]
    pub dump_samples: bool,
}

/// The `[quenched]` table.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct QuenchedSection {
    /// Exponents of the map set drawn from.
    pub alphas: Vec<f64>,
    /// Draw probabilities; must sum to 1.
    pub probabilities: Vec<f64>,
    pub n: usize,
    pub samples: usize,
    #[serde(default = "ten")]
    pub n_omega: usize,
    /// Gate: at least this many realizations must pass; defaults to all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_passes: Option<usize>,
    /// Gate: common band width of sigma_n^2 / n across realizations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_max: Option<f64>,
    #[serde(default = "p_min_default")]
    pub p_min: f64,
    #[serde(default = "skew_default")]
    pub skew_max: f64,
    #[serde(default = "kurt_default")]
    pub kurt_tol: f64,
}

/// The `[sbc]` table.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SbcSection {
    pub n_max: usize,
    #[serde(default = "hundred")]
    pub trajectories: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<Vec<usize>>,
    /// Gate: the weighted part-(a) envelope is non-increasing on ladder
    /// points in the last `part-a-decades` decades of the ladder.
    #[serde(default)]
    pub part_a_nonincreasing: bool,
    #[serde(default = "two_f64")]
    pub part_a_decades: f64,
    /// Gate: part-(a) at every later ladder point stays at or below its
    /// value at this n.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_a_bound_at: Option<usize>,
    /// Gate: part-(b) at the ladder top over part-(b) at the ladder bottom.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_b_ratio_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SllnSource {
    CoinFlips,
    Orbit,
}

/// The `[slln]` table.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SllnSection {
    #[serde(default = "coin_flips")]
    pub source: SllnSource,
    /// Declared variance growth exponent, `Var(S_n) <= C n^gamma`, `gamma < 2`.
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "hundred")]
    pub n_sequences: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<Vec<usize>>,
}

fn one() -> f64 {
    1.0
}
fn coin_flips() -> SllnSource {
    SllnSource::CoinFlips
}
fn one_usize() -> usize {
    1
}
fn ten() -> usize {
    10
}
fn fifty() -> usize {
    50
}
fn sixty_four() -> usize {
    64
}
fn hundred() -> usize {
    100
}
fn two_f64() -> f64 {
    2.0
}
fn tol_1e8() -> f64 {
    1e-8
}
fn tol_1e6() -> f64 {
    1e-6
}
fn ratio_3_2() -> f64 {
    1.5
}
fn gk_k_max() -> usize {
    GREEN_KUBO_K_MAX
}
fn p_min_default() -> f64 {
    0.01
}
fn skew_default() -> f64 {
    0.1
}
fn kurt_default() -> f64 {
    0.2
}
fn sigma_default() -> SigmaSpec {
    SigmaSpec::Empirical
}
fn default_grid() -> usize {
    4096
}
fn default_cone_a() -> f64 {
    25.0
}

/// One experiment, fully specified.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Config {
    pub kind: ExperimentKind,
    /// Master seed every derived stream hangs off.
    #[serde(default)]
    pub seed: u64,
    /// Grid cells for every operator-route computation.
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Cone constant `a` in the envelope `f <= a m(f) x^{-alpha}`.
    #[serde(default = "default_cone_a")]
    pub cone_a: f64,
    /// Cone exponent; defaults to the largest map exponent in play.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cone_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable: Option<ObservableSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecaySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composite: Option<CompositeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identities: Option<IdentitiesSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub green_kubo: Option<GreenKuboSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clt: Option<CltSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quenched: Option<QuenchedSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sbc: Option<SbcSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slln: Option<SllnSection>,
}

/// Upper exponent bound of the self-normed normality regime.
pub const CLT_ALPHA_CAP: f64 = 1.0 / 9.0;

fn geometric_ladder(from: usize, to: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut n = from;
    while n < to {
        out.push(n);
        n *= 2;
    }
    out.push(to);
    out
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("resolved config serializes")
    }

    /// Fills every default in place, validates cross-field requirements, and
    /// returns regime warnings. Hard errors are config errors.
    pub fn resolve(&mut self) -> Result<Vec<String>, String> {
        let mut warnings = Vec::new();
        Grid::new(self.grid).map_err(|e| e.to_string())?;
        self.check_sections()?;

        if let Some(s) = &self.schedule {
            s.reject_unused()?;
        }

        match self.kind {
            ExperimentKind::Decay | ExperimentKind::LpDecay => self.resolve_decay()?,
            ExperimentKind::CompositeDecay => self.resolve_composite()?,
            ExperimentKind::MartingaleIdentities => self.resolve_identities()?,
            ExperimentKind::VarianceScan => self.resolve_scan()?,
            ExperimentKind::GreenKubo => self.resolve_green_kubo()?,
            ExperimentKind::Clt => self.resolve_clt(&mut warnings)?,
            ExperimentKind::QuenchedClt => self.resolve_quenched(&mut warnings)?,
            ExperimentKind::Sbc => self.resolve_sbc(&mut warnings)?,
            ExperimentKind::Slln => self.resolve_slln()?,
        }

        // Building the live objects surfaces every remaining domain error
        // (exponents outside (0,1), malformed probability vectors, ...).
        if let Some(s) = &self.schedule {
            let schedule = s.build(self.seed)?;
            let alpha = self.cone_alpha.unwrap_or_else(|| schedule.alpha_max());
            self.cone_alpha = Some(alpha);
            self.build_cone()?;
        }
        if let Some(o) = &self.observable {
            o.build()?;
        }
        Ok(warnings)
    }

    fn check_sections(&self) -> Result<(), String> {
        let sections: [(&str, bool); 8] = [
            ("decay", self.decay.is_some()),
            ("composite", self.composite.is_some()),
            ("identities", self.identities.is_some()),
            ("scan", self.scan.is_some()),
            ("green-kubo", self.green_kubo.is_some()),
            ("clt", self.clt.is_some()),
            ("quenched", self.quenched.is_some()),
            ("sbc", self.sbc.is_some()),
        ];
        let own = self.kind.section();
        for (name, present) in sections {
            if present && name != own {
                return Err(format!(
                    "section [{name}] does not apply to kind {}",
                    self.kind.name()
                ));
            }
        }
        if self.slln.is_some() && own != "slln" {
            return Err(format!(
                "section [slln] does not apply to kind {}",
                self.kind.name()
            ));
        }

        let needs_schedule = matches!(
            self.kind,
            ExperimentKind::Decay
                | ExperimentKind::LpDecay
                | ExperimentKind::CompositeDecay
                | ExperimentKind::MartingaleIdentities
                | ExperimentKind::Clt
                | ExperimentKind::Sbc
        ) || (self.kind == ExperimentKind::Slln
            && self.slln.as_ref().is_some_and(|s| s.source == SllnSource::Orbit));
        if needs_schedule && self.schedule.is_none() {
            return Err(format!("kind {} needs a [schedule] table", self.kind.name()));
        }
        if !needs_schedule && self.schedule.is_some() {
            return Err(format!(
                "kind {} does not take a [schedule] table",
                self.kind.name()
            ));
        }

        let needs_observable = matches!(
            self.kind,
            ExperimentKind::CompositeDecay
                | ExperimentKind::MartingaleIdentities
                | ExperimentKind::VarianceScan
                | ExperimentKind::GreenKubo
                | ExperimentKind::Clt
                | ExperimentKind::QuenchedClt
                | ExperimentKind::Sbc
        ) || (self.kind == ExperimentKind::Slln
            && self.slln.as_ref().is_some_and(|s| s.source == SllnSource::Orbit));
        if needs_observable && self.observable.is_none() {
            return Err(format!(
                "kind {} needs an [observable] table",
                self.kind.name()
            ));
        }
        if !needs_observable && self.observable.is_some() {
            return Err(format!(
                "kind {} does not take an [observable] table",
                self.kind.name()
            ));
        }
        Ok(())
    }

    pub fn build_cone(&self) -> Result<ConeParams, String> {
        let alpha = self
            .cone_alpha
            .ok_or("internal: cone alpha unresolved")?;
        ConeParams::new(self.cone_a, alpha).map_err(|e| e.to_string())
    }

    fn section_missing(&self) -> String {
        format!(
            "kind {} needs a [{}] table",
            self.kind.name(),
            self.kind.section()
        )
    }

    fn resolve_decay(&mut self) -> Result<(), String> {
        let kind = self.kind;
        let grid = Grid::new(self.grid).map_err(|e| e.to_string())?;
        let missing = self.section_missing();
        let d = self.decay.as_mut().ok_or(missing)?;
        let p = *d.p.get_or_insert(if kind == ExperimentKind::Decay { 1.0 } else { 2.0 });
        if kind == ExperimentKind::Decay && p != 1.0 {
            return Err(format!("decay: p = {p}; use kind = \"lp-decay\" for p > 1"));
        }
        if kind == ExperimentKind::LpDecay && p <= 1.0 {
            return Err(format!("decay: lp-decay needs p > 1, got {p}"));
        }
        let ladder = d
            .ladder
            .get_or_insert_with(|| geometric_ladder(8, 1024))
            .clone();
        let top = *ladder.last().ok_or("decay: ladder must be nonempty")?;
        d.fit_window.get_or_insert((ladder[0].max(16), top));

        let smooth = match (&d.phi_observable, &d.psi_observable) {
            (Some(a), Some(b)) => {
                a.build()?;
                b.build()?;
                true
            }
            (None, None) => false,
            _ => {
                return Err(
                    "decay: smooth inputs need both phi-observable and psi-observable".into(),
                )
            }
        };
        if !smooth {
            build_density(grid, d.phi_exponent)?;
            build_density(grid, d.psi_exponent)?;
        } else if d.phi_exponent != 0.0 || d.psi_exponent != 0.0 {
            return Err("decay: exponents and smooth observables are mutually exclusive".into());
        }

        self.schedule
            .as_mut()
            .expect("checked in sections")
            .fill_len(top)?;

        // The envelope integrability requirement for p > 1.
        if kind == ExperimentKind::LpDecay {
            let schedule = self.schedule.as_ref().expect("checked").build(self.seed)?;
            let alpha = self.cone_alpha.unwrap_or_else(|| schedule.alpha_max());
            if alpha * p >= 1.0 {
                return Err(format!(
                    "lp-decay: cone alpha = {alpha} with p = {p} breaks the requirement alpha * p < 1"
                ));
            }
        }
        Ok(())
    }

    fn resolve_composite(&mut self) -> Result<(), String> {
        let missing = self.section_missing();
        let c = self.composite.as_mut().ok_or(missing)?;
        if c.i == 0 {
            return Err("composite: i must be at least 1".into());
        }
        let ladder = c
            .ladder
            .get_or_insert_with(|| geometric_ladder(16, 512))
            .clone();
        let top = *ladder.last().ok_or("composite: ladder must be nonempty")?;
        c.fit_window.get_or_insert((ladder[0].max(16), top));
        if c.p < 1.0 {
            return Err(format!("composite: p must be at least 1, got {}", c.p));
        }
        let horizon = c.i + top + 1;
        let p = c.p;
        self.schedule
            .as_mut()
            .expect("checked in sections")
            .fill_len(horizon)?;
        let schedule = self.schedule.as_ref().expect("checked").build(self.seed)?;
        let alpha = self.cone_alpha.unwrap_or_else(|| schedule.alpha_max());
        if alpha * p >= 1.0 {
            return Err(format!(
                "composite: cone alpha = {alpha} with p = {p} breaks the requirement alpha * p < 1"
            ));
        }
        Ok(())
    }

    fn resolve_identities(&mut self) -> Result<(), String> {
        let missing = self.section_missing();
        let id = self.identities.as_mut().ok_or(missing)?;
        if id.n_max == 0 {
            return Err("identities: n-max must be at least 1".into());
        }
        if let Some(ns) = &id.hn_ladder {
            if ns.len() < 2 || ns.windows(2).any(|w| w[1] <= w[0]) {
                return Err(
                    "identities: hn-ladder needs at least 2 strictly increasing entries".into(),
                );
            }
        }
        let horizon = id.n_max.max(id.hn_ladder.as_ref().and_then(|l| l.last().copied()).unwrap_or(0)) + 1;
        self.schedule
            .as_mut()
            .expect("checked in sections")
            .fill_len(horizon)?;
        Ok(())
    }

    fn resolve_scan(&mut self) -> Result<(), String> {
        let missing = self.section_missing();
        let s = self.scan.as_mut().ok_or(missing)?;
        s.ladder
            .get_or_insert_with(|| vec![250, 500, 1000, 2000, 4000]);
        if s.n_schedules == 0 {
            return Err("scan: n-schedules must be at least 1".into());
        }
        if s.green_kubo_rel_tol.is_some() && s.epsilon != 0.0 {
            return Err(
                "scan: green-kubo-rel-tol compares against the stationary map and needs epsilon = 0"
                    .into(),
            );
        }
        // Surface base/epsilon domain errors now.
        MapSchedule::perturbed(s.base, s.epsilon, 1, self.seed).map_err(|e| e.to_string())?;
        Ok(())
    }

    fn resolve_green_kubo(&mut self) -> Result<(), String> {
        let missing = self.section_missing();
        let g = self.green_kubo.as_mut().ok_or(missing)?;
        MapParameter::new(g.beta).map_err(|e| e.to_string())?;
        if g.k_max == 0 {
            return Err("green-kubo: k-max must be at least 1".into());
        }
        Ok(())
    }

    fn resolve_clt(&mut self, warnings: &mut Vec<String>) -> Result<(), String> {
        let seed = self.seed;
        let missing = self.section_missing();
        let c = self.clt.as_mut().ok_or(missing)?;
        if c.n == 0 || c.samples == 0 {
            return Err("clt: n and samples must be at least 1".into());
        }
        if c.seeds.is_some() && c.n_seeds != 1 {
            return Err("clt: give either seeds or n-seeds, not both".into());
        }
        let seeds = c
            .seeds
            .get_or_insert_with(|| (0..c.n_seeds as u64).map(|j| seed.wrapping_add(j)).collect());
        if seeds.is_empty() {
            return Err("clt: needs at least one master seed".into());
        }
        c.n_seeds = seeds.len();
        let min = *c.min_passes.get_or_insert(seeds.len());
        if min > seeds.len() {
            return Err(format!(
                "clt: min-passes = {min} exceeds the {} seeds",
                seeds.len()
            ));
        }
        let checkpoints = c.checkpoints.get_or_insert_with(|| vec![c.n]);
        if checkpoints.last() != Some(&c.n) {
            return Err("clt: the final checkpoint must be the horizon n".into());
        }
        if c.dump_samples && c.samples.saturating_mul(checkpoints.len()) > 20_000_000 {
            return Err("clt: dump-samples would exceed the 2e7-row size guard".into());
        }
        let n = c.n;
        self.schedule
            .as_mut()
            .expect("checked in sections")
            .fill_len(n)?;
        let schedule = self.schedule.as_ref().expect("checked").build(self.seed)?;
        if schedule.alpha_max() >= CLT_ALPHA_CAP {
            warnings.push(format!(
                "alpha_max = {:.4} is outside the self-normed normality regime 0 < alpha < 1/9; \
                 the KS and moment gates may fail",
                schedule.alpha_max()
            ));
        }
        Ok(())
    }

    fn resolve_quenched(&mut self, warnings: &mut Vec<String>) -> Result<(), String> {
        let seed = self.seed;
        let missing = self.section_missing();
        let q = self.quenched.as_mut().ok_or(missing)?;
        if q.n == 0 || q.samples < 2 || q.n_omega == 0 {
            return Err("quenched: n >= 1, samples >= 2 and n-omega >= 1 required".into());
        }
        let min = *q.min_passes.get_or_insert(q.n_omega);
        if min > q.n_omega {
            return Err(format!(
                "quenched: min-passes = {min} exceeds n-omega = {}",
                q.n_omega
            ));
        }
        let scheme = build_scheme(q, seed)?;
        if scheme.alpha_max() >= CLT_ALPHA_CAP {
            warnings.push(format!(
                "alpha_max = {:.4} is outside the quenched normality regime 0 < alpha < 1/9; \
                 per-realization gates may fail",
                scheme.alpha_max()
            ));
        }
        Ok(())
    }

    fn resolve_sbc(&mut self, warnings: &mut Vec<String>) -> Result<(), String> {
        let missing = self.section_missing();
        let s = self.sbc.as_mut().ok_or(missing)?;
        if s.n_max < 100 {
            return Err("sbc: n-max must be at least 100".into());
        }
        if s.trajectories == 0 {
            return Err("sbc: trajectories must be at least 1".into());
        }
        let ladder = s
            .ladder
            .get_or_insert_with(|| geometric_ladder(100, s.n_max))
            .clone();
        if ladder.last() != Some(&s.n_max) {
            return Err("sbc: the ladder must end at n-max".into());
        }
        if let Some(at) = s.part_a_bound_at {
            if !ladder.contains(&at) {
                return Err(format!("sbc: part-a-bound-at = {at} is not a ladder point"));
            }
        }
        let n_max = s.n_max;
        self.schedule
            .as_mut()
            .expect("checked in sections")
            .fill_len(n_max)?;
        let schedule = self.schedule.as_ref().expect("checked").build(self.seed)?;
        let part_a_gated = s.part_a_nonincreasing || s.part_a_bound_at.is_some();
        if part_a_gated && schedule.alpha_max() >= 0.5 {
            warnings.push(format!(
                "the weighted part-(a) envelope assumes alpha < 1/2; alpha_max = {:.4} supports \
                 only the part-(b) ratio check",
                schedule.alpha_max()
            ));
        }
        Ok(())
    }

    fn resolve_slln(&mut self) -> Result<(), String> {
        let missing = self.section_missing();
        let s = self.slln.as_mut().ok_or(missing)?;
        if !s.gamma.is_finite() || s.gamma >= 2.0 {
            return Err(format!(
                "slln: the envelope needs gamma < 2, got {}",
                s.gamma
            ));
        }
        if s.n_sequences == 0 {
            return Err("slln: n-sequences must be at least 1".into());
        }
        let ladder = s
            .ladder
            .get_or_insert_with(|| geometric_ladder(128, 1 << 20))
            .clone();
        let top = *ladder.last().ok_or("slln: ladder must be nonempty")?;
        if s.source == SllnSource::Orbit {
            self.schedule
                .as_mut()
                .expect("checked in sections")
                .fill_len(top)?;
        }
        Ok(())
    }
}

pub fn build_scheme(q: &QuenchedSection, omega_seed: u64) -> Result<RandomScheme, String> {
    let maps = q
        .alphas
        .iter()
        .map(|&a| MapParameter::new(a))
        .collect::<pmlab::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    RandomScheme::new(maps, q.probabilities.clone(), omega_seed).map_err(|e| e.to_string())
}

pub fn clt_thresholds(p_min: f64, skew_max: f64, kurt_tol: f64) -> CltThresholds {
    CltThresholds {
        p_min,
        skew_max,
        kurt_tol,
    }
}
