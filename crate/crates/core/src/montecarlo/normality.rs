//! Self-normed normality verdicts: Kolmogorov-Smirnov against the standard
//! normal plus moment gates, judged against declared thresholds.

use std::time::Instant;

use serde::Serialize;

use crate::stats::{ks_normal, Moments};

/// Gates a [`StatReport`] is judged against.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CltThresholds {
    /// KS p-value must exceed this.
    pub p_min: f64,
    /// |skewness| must stay below this.
    pub skew_max: f64,
    /// |excess kurtosis| must stay below this.
    pub kurt_tol: f64,
}

impl Default for CltThresholds {
    fn default() -> Self {
        Self {
            p_min: 0.01,
            skew_max: 0.1,
            kurt_tol: 0.2,
        }
    }
}

/// Where the normalization scale comes from.
#[derive(Debug, Clone, Copy)]
pub enum SigmaSource {
    /// Sample standard deviation of the inputs (self-norming).
    Empirical,
    /// Externally computed standard deviation, e.g. an operator-route
    /// `sigma_n`.
    Operator(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SigmaSourceKind {
    Empirical,
    Operator,
}

/// Outcome of one normality test. Moments and the KS comparison refer to the
/// normalized samples `S / sigma_hat`. A degenerate report (zero or unusable
/// `sigma_hat`, or fewer than 2 samples) carries raw-sample mean and variance
/// and pins the distribution fields at the rejecting extreme.
#[derive(Debug, Clone, Serialize)]
pub struct StatReport {
    pub sample_size: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub sigma_hat: f64,
    pub sigma_source: SigmaSourceKind,
    pub pass: bool,
    pub degenerate: bool,
    pub runtime_s: f64,
    pub seed: u64,
}

/// Tests `samples` of a centered sum against the standard normal after
/// dividing by `sigma_hat`. No mean is subtracted: the sums are centered by
/// construction, and the test should see any drift they retain.
pub fn self_normed_clt_test(
    samples: &[f64],
    sigma: SigmaSource,
    thresholds: &CltThresholds,
    seed: u64,
) -> StatReport {
    let t0 = Instant::now();
    let source = match sigma {
        SigmaSource::Empirical => SigmaSourceKind::Empirical,
        SigmaSource::Operator(_) => SigmaSourceKind::Operator,
    };
    let raw = Moments::from_samples(samples).ok();
    let sigma_hat = match (sigma, &raw) {
        (SigmaSource::Empirical, Some(m)) => m.variance.sqrt(),
        (SigmaSource::Empirical, None) => 0.0,
        (SigmaSource::Operator(s), _) => s,
    };
    if !(sigma_hat.is_finite() && sigma_hat > 0.0) || raw.is_none() {
        let (mean, variance) = raw.map_or((0.0, 0.0), |m| (m.mean, m.variance));
        return StatReport {
            sample_size: samples.len(),
            mean,
            variance,
            skewness: 0.0,
            excess_kurtosis: 0.0,
            ks_statistic: 1.0,
            ks_p_value: 0.0,
            sigma_hat: sigma_hat.max(0.0),
            sigma_source: source,
            pass: false,
            degenerate: true,
            runtime_s: t0.elapsed().as_secs_f64(),
            seed,
        };
    }
    let z: Vec<f64> = samples.iter().map(|&v| v / sigma_hat).collect();
    let m = Moments::from_samples(&z).expect("at least 2 samples");
    match ks_normal(&z) {
        Ok(ks) => {
            let pass = ks.p_value > thresholds.p_min
                && m.skewness.abs() < thresholds.skew_max
                && m.excess_kurtosis.abs() < thresholds.kurt_tol;
            StatReport {
                sample_size: samples.len(),
                mean: m.mean,
                variance: m.variance,
                skewness: m.skewness,
                excess_kurtosis: m.excess_kurtosis,
                ks_statistic: ks.statistic,
                ks_p_value: ks.p_value,
                sigma_hat,
                sigma_source: source,
                pass,
                degenerate: false,
                runtime_s: t0.elapsed().as_secs_f64(),
                seed,
            }
        }
        Err(_) => StatReport {
            sample_size: samples.len(),
            mean: m.mean,
            variance: m.variance,
            skewness: m.skewness,
            excess_kurtosis: m.excess_kurtosis,
            ks_statistic: 1.0,
            ks_p_value: 0.0,
            sigma_hat,
            sigma_source: source,
            pass: false,
            degenerate: true,
            runtime_s: t0.elapsed().as_secs_f64(),
            seed,
        },
    }
}
