//! Orbit ensembles for the centered sums, self-normed normality tests,
//! almost-sure growth envelopes, and the Bernoulli random-composition suite.

mod ensemble;
mod envelopes;
mod normality;
mod quenched;

pub use ensemble::{sample_sn_ensemble, EnsembleConfig, SnEnsemble};
pub use envelopes::{
    sbc_check, slln_envelope_check, SbcRow, SbcTable, SllnReport, SBC_LOG_LOG_EXPONENT,
};
pub use normality::{
    self_normed_clt_test, CltThresholds, SigmaSource, SigmaSourceKind, StatReport,
};
pub use quenched::{
    quenched_clt_suite, quenched_realization, BlockFrequency, OmegaOutcome, OmegaRun,
    QuenchedRealization, QuenchedSuite, RandomScheme, PROBABILITY_SUM_TOL, QUENCHED_ALPHA_CAP,
};
