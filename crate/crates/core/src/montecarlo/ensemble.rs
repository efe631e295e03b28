//! Seed-reproducible orbit ensembles for the centered sums
//! `S_n = sum_{k<=n} (phi(T_k ... T_1 x) - c_k)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::StreamingKahan;
use crate::maps::MapSchedule;
use crate::observable::Observable;
use crate::rng::{derive_rng, stream};

/// Ensemble settings: `samples` orbits over `horizon` steps, recorded at the
/// checkpoints, with initial points drawn uniformly from `[0, 1]`.
#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    samples: usize,
    horizon: usize,
    checkpoints: Vec<usize>,
    master_seed: u64,
}

impl EnsembleConfig {
    /// Checkpoints must be strictly increasing within `[1, horizon]`.
    pub fn new(
        samples: usize,
        horizon: usize,
        checkpoints: Vec<usize>,
        master_seed: u64,
    ) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Invalid("ensemble needs at least one sample".into()));
        }
        if horizon == 0 {
            return Err(Error::Invalid("ensemble needs a positive horizon".into()));
        }
        if checkpoints.is_empty() {
            return Err(Error::Invalid("ensemble needs at least one checkpoint".into()));
        }
        if checkpoints[0] == 0 || *checkpoints.last().expect("nonempty") > horizon {
            return Err(Error::Invalid(format!(
                "checkpoints must lie in [1, {horizon}]"
            )));
        }
        if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(
                "checkpoints must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            samples,
            horizon,
            checkpoints,
            master_seed,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }
}

/// Centered sums recorded per checkpoint: `values[c][j]` is `S_{k_c}` of
/// sample `j`.
#[derive(Debug, Clone)]
pub struct SnEnsemble {
    checkpoints: Vec<usize>,
    values: Vec<Vec<f64>>,
    master_seed: u64,
}

impl SnEnsemble {
    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    /// Samples of `S_n` for checkpoint `n`, if recorded.
    pub fn at(&self, n: usize) -> Option<&[f64]> {
        let c = self.checkpoints.iter().position(|&k| k == n)?;
        Some(&self.values[c])
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Tidy CSV with header `n,sample,s_n`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "n,sample,s_n")?;
        for (c, &n) in self.checkpoints.iter().enumerate() {
            for (j, v) in self.values[c].iter().enumerate() {
                writeln!(w, "{n},{j},{v}")?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the ensemble: sample `j` draws its initial point from a generator
/// derived from `(master_seed, j)`, walks the schedule once, and accumulates
/// `S_k` with compensated summation. The partitioning across workers never
/// touches the draws, so output is identical at any worker count.
///
/// `means` must hold the centering constants `c_1 ..= c_horizon` for this
/// exact schedule (`means[k - 1] = m(phi o T_k ... T_1)`, the layout
/// `martingale::schedule_means` produces).
pub fn sample_sn_ensemble(
    schedule: &MapSchedule,
    observable: &Observable,
    means: &[f64],
    cfg: &EnsembleConfig,
) -> Result<SnEnsemble> {
    schedule.require_len(cfg.horizon)?;
    if means.len() < cfg.horizon {
        return Err(Error::Invalid(format!(
            "centering constants cover {} steps, horizon is {}",
            means.len(),
            cfg.horizon
        )));
    }
    let params = schedule.params();
    let per_sample: Vec<Vec<f64>> = (0..cfg.samples)
        .into_par_iter()
        .map(|j| {
            let mut rng = derive_rng(cfg.master_seed, j as u64, stream::INITIAL_X);
            let mut x: f64 = rng.random();
            let mut acc = StreamingKahan::default();
            let mut out = Vec::with_capacity(cfg.checkpoints.len());
            let mut next = cfg.checkpoints.iter().copied().peekable();
            for k in 1..=cfg.horizon {
                x = params[k - 1].eval(x);
                acc.add(observable.value(x) - means[k - 1]);
                if next.peek() == Some(&k) {
                    out.push(acc.value());
                    next.next();
                    if next.peek().is_none() {
                        break;
                    }
                }
            }
            out
        })
        .collect();
    let mut values = vec![Vec::with_capacity(cfg.samples); cfg.checkpoints.len()];
    for row in &per_sample {
        for (c, &v) in row.iter().enumerate() {
            values[c].push(v);
        }
    }
    Ok(SnEnsemble {
        checkpoints: cfg.checkpoints.clone(),
        values,
        master_seed: cfg.master_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::maps::MapParameter;
    use crate::martingale::schedule_means;
    use crate::stats::Moments;
    use crate::ulam::MatrixCache;
    use approx::assert_abs_diff_eq;

    #[test]
    fn config_rejects_malformed_checkpoints() {
        assert!(EnsembleConfig::new(0, 10, vec![10], 1).is_err());
        assert!(EnsembleConfig::new(5, 0, vec![1], 1).is_err());
        assert!(EnsembleConfig::new(5, 10, vec![], 1).is_err());
        assert!(EnsembleConfig::new(5, 10, vec![0, 5], 1).is_err());
        assert!(EnsembleConfig::new(5, 10, vec![5, 11], 1).is_err());
        assert!(EnsembleConfig::new(5, 10, vec![5, 5], 1).is_err());
        assert!(EnsembleConfig::new(5, 10, vec![8, 5], 1).is_err());
        assert!(EnsembleConfig::new(5, 10, vec![1, 5, 10], 1).is_ok());
    }

    #[test]
    fn constant_observables_sum_to_zero() {
        let grid = Grid::new(256).unwrap();
        let cache = MatrixCache::new();
        let schedule = MapSchedule::constant(MapParameter::new(0.3).unwrap(), 64).unwrap();
        let phi = Observable::polynomial(vec![0.7]);
        let means = schedule_means(&schedule, &phi, grid, 64, &cache).unwrap();
        let cfg = EnsembleConfig::new(40, 64, vec![1, 16, 64], 0x5eed).unwrap();
        let ens = sample_sn_ensemble(&schedule, &phi, &means, &cfg).unwrap();
        // Centering constants equal the observable up to quadrature rounding,
        // so every sum collapses to accumulated rounding noise.
        for &n in ens.checkpoints() {
            for &v in ens.at(n).unwrap() {
                assert_abs_diff_eq!(v, 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn single_step_sum_is_the_defining_term() {
        let grid = Grid::new(128).unwrap();
        let cache = MatrixCache::new();
        let p = MapParameter::new(0.4).unwrap();
        let schedule = MapSchedule::constant(p, 1).unwrap();
        let phi = Observable::cosine();
        let means = schedule_means(&schedule, &phi, grid, 1, &cache).unwrap();
        let cfg = EnsembleConfig::new(1, 1, vec![1], 0xabcd).unwrap();
        let ens = sample_sn_ensemble(&schedule, &phi, &means, &cfg).unwrap();

        let x0: f64 = derive_rng(0xabcd, 0, stream::INITIAL_X).random();
        assert_eq!(ens.at(1).unwrap()[0], phi.value(p.eval(x0)) - means[0]);
    }

    #[test]
    fn ensemble_mean_is_centered_and_runs_reproduce_bitwise() {
        let grid = Grid::new(1024).unwrap();
        let cache = MatrixCache::new();
        let n = 200;
        let schedule = MapSchedule::constant(MapParameter::new(0.25).unwrap(), n).unwrap();
        let phi = Observable::cosine();
        let means = schedule_means(&schedule, &phi, grid, n, &cache).unwrap();
        let cfg = EnsembleConfig::new(5000, n, vec![n], 0xcafe).unwrap();
        let ens = sample_sn_ensemble(&schedule, &phi, &means, &cfg).unwrap();
        let sn = ens.at(n).unwrap();
        let m = Moments::from_samples(sn).unwrap();
        let se = (m.variance / sn.len() as f64).sqrt();
        assert!(
            m.mean.abs() <= 3.0 * se,
            "ensemble mean {} exceeds 3 standard errors {}",
            m.mean,
            3.0 * se
        );

        let again = sample_sn_ensemble(&schedule, &phi, &means, &cfg).unwrap();
        assert_eq!(sn, again.at(n).unwrap());

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let threaded =
            pool.install(|| sample_sn_ensemble(&schedule, &phi, &means, &cfg).unwrap());
        assert_eq!(sn, threaded.at(n).unwrap());
    }

    #[test]
    fn means_shorter_than_the_horizon_are_rejected() {
        let schedule = MapSchedule::constant(MapParameter::new(0.3).unwrap(), 4).unwrap();
        let phi = Observable::identity();
        let cfg = EnsembleConfig::new(2, 4, vec![4], 9).unwrap();
        let err = sample_sn_ensemble(&schedule, &phi, &[0.5, 0.5], &cfg).unwrap_err();
        assert!(err.to_string().contains("centering"));
    }
}
