//! Loss-of-memory curves, decay-rate fits, composite decay checks, and
//! variance growth scans built on the schedule/operator layer.

mod decay;
mod variance;

pub(crate) use decay::validate_ladder;

pub use decay::{
    composite_decay_check, fit_decay_rate, loss_of_memory_curve, DecayCurve, DecayInputs,
    RateFit, MASS_MATCH_TOL, RATE_FIT_BURN_IN,
};
pub use variance::{
    green_kubo_variance, variance_growth_scan, CoboundaryVerdict, GreenKuboReport,
    ScheduleVariance, VarianceScan, GREEN_KUBO_K_MAX,
};
