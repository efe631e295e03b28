//! Smooth test observables with cached supremum norms.
//!
//! The cone-splitting construction and the loss-of-memory bounds consume
//! `|phi|_inf` and `|phi'|_inf`; both are cached at construction so repeated
//! experiment gates never resample them.

use crate::error::Result;
use crate::grid::Grid;
use crate::maps::MapParameter;
use std::f64::consts::TAU;

#[derive(Debug, Clone)]
enum Kernel {
    Identity,
    Cosine,
    Polynomial(Vec<f64>),
    /// `T_a(x) - x`: a coboundary of the identity under the single map `T_a`
    /// (piecewise C^1; used to exercise degenerate-variance detection).
    MapCoboundary(MapParameter),
}

/// A real observable on `[0, 1]` with an evaluator, a derivative evaluator,
/// and cached sup norms of both.
#[derive(Debug, Clone)]
pub struct Observable {
    kernel: Kernel,
    name: String,
    sup_norm: f64,
    deriv_sup: f64,
}

impl Observable {
    /// `phi(x) = x`.
    pub fn identity() -> Self {
        Self {
            kernel: Kernel::Identity,
            name: "identity".into(),
            sup_norm: 1.0,
            deriv_sup: 1.0,
        }
    }

    /// `phi(x) = cos(2 pi x)`.
    pub fn cosine() -> Self {
        Self {
            kernel: Kernel::Cosine,
            name: "cos2pi".into(),
            sup_norm: 1.0,
            deriv_sup: TAU,
        }
    }

    /// `phi(x) = c_0 + c_1 x + ...`; sup norms from a dense sample with a
    /// safety margin, so they upper-bound any coarser sample.
    pub fn polynomial(coeffs: Vec<f64>) -> Self {
        let eval = |x: f64| horner(&coeffs, x);
        let deriv_coeffs: Vec<f64> = coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, c)| k as f64 * c)
            .collect();
        let deriv = |x: f64| horner(&deriv_coeffs, x);
        let sup_norm = dense_sup(eval);
        let deriv_sup = dense_sup(deriv);
        Self {
            kernel: Kernel::Polynomial(coeffs),
            name: "polynomial".into(),
            sup_norm,
            deriv_sup,
        }
    }

    /// `phi(x) = T_a(x) - x` for a fixed map.
    pub fn map_coboundary(param: MapParameter) -> Self {
        Self {
            kernel: Kernel::MapCoboundary(param),
            name: format!("coboundary(alpha={})", param.alpha()),
            // Left branch: 2^a x^{1+a} <= 1/2; right branch: |x - 1| <= 1/2.
            sup_norm: margin(0.5),
            // Left branch derivative of T - x peaks at 1 + a; right gives 1.
            // The margin keeps the cached value above rounded evaluations of
            // 2^a (1+a) x^a near the branch point.
            deriv_sup: margin(1.0 + param.alpha()),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match &self.kernel {
            Kernel::Identity => x,
            Kernel::Cosine => (TAU * x).cos(),
            Kernel::Polynomial(c) => horner(c, x),
            Kernel::MapCoboundary(p) => p.eval(x) - x,
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match &self.kernel {
            Kernel::Identity => 1.0,
            Kernel::Cosine => -TAU * (TAU * x).sin(),
            Kernel::Polynomial(c) => {
                let mut acc = 0.0;
                for (k, ck) in c.iter().enumerate().skip(1).rev() {
                    acc = acc * x + k as f64 * ck;
                }
                acc
            }
            Kernel::MapCoboundary(p) => p.derivative(x) - 1.0,
        }
    }

    /// Cached `|phi|_inf` over `[0, 1]`.
    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    /// Cached `|phi'|_inf` over `[0, 1]`.
    pub fn deriv_sup(&self) -> f64 {
        self.deriv_sup
    }

    /// Midpoint samples on a grid.
    pub fn sample(&self, grid: Grid) -> Vec<f64> {
        (0..grid.n_cells())
            .map(|i| self.value(grid.midpoint(i)))
            .collect()
    }

    /// Mean against a weight vector of midpoint density values.
    pub fn mean_against(&self, grid: Grid, weights: &[f64]) -> Result<f64> {
        debug_assert_eq!(weights.len(), grid.n_cells());
        let mut sum = 0.0;
        let mut c = 0.0;
        for (i, w) in weights.iter().enumerate() {
            let v = self.value(grid.midpoint(i)) * w;
            let t = sum + (v - c);
            c = (t - sum) - (v - c);
            sum = t;
        }
        Ok(sum * grid.width())
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn dense_sup(f: impl Fn(f64) -> f64) -> f64 {
    const SAMPLES: usize = 100_001;
    let mut max = 0.0f64;
    for i in 0..SAMPLES {
        let x = i as f64 / (SAMPLES - 1) as f64;
        max = max.max(f(x).abs());
    }
    margin(max)
}

/// Safety margin that keeps a cached norm above every rounded evaluation.
fn margin(x: f64) -> f64 {
    x * (1.0 + 1e-9) + 1e-12
}
