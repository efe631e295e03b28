//! Sample statistics, normality diagnostics, and least-squares fits.

use crate::error::{Error, Result};
use crate::grid::kahan_sum;

/// Standard normal distribution function via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// First four standardized sample moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

impl Moments {
    /// Computes moments with central sums about the sample mean.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Invalid(format!(
                "moments need at least 2 samples, got {n}"
            )));
        }
        let nf = n as f64;
        let mean = kahan_sum(samples.iter().copied()) / nf;
        let m2 = kahan_sum(samples.iter().map(|&x| (x - mean).powi(2))) / nf;
        let m3 = kahan_sum(samples.iter().map(|&x| (x - mean).powi(3))) / nf;
        let m4 = kahan_sum(samples.iter().map(|&x| (x - mean).powi(4))) / nf;
        let variance = m2 * nf / (nf - 1.0);
        let (skewness, excess_kurtosis) = if m2 > 0.0 {
            (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
        } else {
            (0.0, 0.0)
        };
        Ok(Self {
            count: n,
            mean,
            variance,
            skewness,
            excess_kurtosis,
        })
    }
}

/// Kolmogorov-Smirnov comparison against the standard normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    /// Sup distance between the empirical CDF and the normal CDF.
    pub statistic: f64,
    /// Asymptotic p-value with the Stephens finite-sample correction.
    pub p_value: f64,
}

/// One-sample KS test of `samples` against N(0, 1).
///
/// The p-value uses the Kolmogorov series at
/// `z = D (sqrt(M) + 0.12 + 0.11 / sqrt(M))`.
pub fn ks_normal(samples: &[f64]) -> Result<KsResult> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Invalid("KS test needs samples".into()));
    }
    let mut sorted = samples.to_vec();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("KS test saw a non-finite sample".into()));
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let nf = n as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = normal_cdf(x);
        let lo = i as f64 / nf;
        let hi = (i + 1) as f64 / nf;
        d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
    }
    let z = d * (nf.sqrt() + 0.12 + 0.11 / nf.sqrt());
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_tail(z),
    })
}

/// `P(K > z)` for the Kolmogorov distribution, as an alternating series.
fn kolmogorov_tail(z: f64) -> f64 {
    if z <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0f64;
    for k in 1..=100u32 {
        let term = (-2.0 * (k as f64).powi(2) * z * z).exp();
        let signed = if k % 2 == 1 { term } else { -term };
        sum += signed;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Ordinary least-squares line `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit.
    pub rms_residual: f64,
}

/// Least-squares fit of `(x, y)` pairs.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() {
        return Err(Error::Invalid(format!(
            "linear_fit got {} x values and {} y values",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "linear_fit needs at least 2 points, got {n}"
        )));
    }
    let nf = n as f64;
    let mx = kahan_sum(xs.iter().copied()) / nf;
    let my = kahan_sum(ys.iter().copied()) / nf;
    let sxx = kahan_sum(xs.iter().map(|&x| (x - mx) * (x - mx)));
    let sxy = kahan_sum(xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)));
    if sxx <= 0.0 {
        return Err(Error::Numerical(
            "linear_fit abscissae are all identical".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss = kahan_sum(
        xs.iter()
            .zip(ys)
            .map(|(&x, &y)| (y - slope * x - intercept).powi(2)),
    );
    Ok(LineFit {
        slope,
        intercept,
        rms_residual: (ss / nf).sqrt(),
    })
}
