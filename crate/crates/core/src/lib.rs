//! Numerical laboratory for sequential and random compositions of
//! Pomeau–Manneville intermittent interval maps.
//!
//! The crate provides, in dependency order:
//!
//! * [`maps`]: the map family `T_a(x) = x + 2^a x^{1+a}` on `[0, 1/2]`,
//!   `2x - 1` on `(1/2, 1]`, with branch inverses and composition schedules;
//! * [`grid`] / [`observable`]: uniform grids, piecewise-constant grid
//!   functions, quadrature, and smooth test observables;
//! * [`transfer`] / [`ulam`]: the transfer (Perron–Frobenius) operator,
//!   evaluated exactly via branch preimages and discretized by the Ulam
//!   cell-overlap method;
//! * [`cone`]: the invariant cone of decreasing densities with controlled
//!   singularity at the origin, membership checks, and the splitting of a
//!   smooth observable times a cone density into a difference of cone
//!   elements;
//! * [`martingale`]: sequential centering, the conditional-expectation
//!   kernels `H_n`, reverse-martingale increments, and variance identities;
//! * [`experiments`]: polynomial loss-of-memory curves, rate fits, and
//!   variance-growth / Green–Kubo scans;
//! * [`montecarlo`]: orbit ensembles, self-normed normality tests, strong
//!   Borel–Cantelli and strong-law envelope checks, and quenched (random
//!   composition) suites.
//!
//! All randomized components derive their generators from explicit seeds via
//! [`rng`], so every result is reproducible bit-for-bit at any worker count.

pub mod cone;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod maps;
pub mod martingale;
pub mod montecarlo;
pub mod observable;
pub mod rng;
pub mod stats;
pub mod transfer;
pub mod ulam;

/// Crate version, for run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use grid::{Grid, GridDensity, GridFnKind};
pub use maps::{iterate_orbit, MapParameter, MapSchedule};
pub use observable::Observable;
pub use ulam::{MatrixCache, UlamMatrix};
