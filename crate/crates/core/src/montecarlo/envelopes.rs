//! Almost-sure growth envelopes: the strong Borel-Cantelli discrepancy
//! table and the SLLN exponent check for bounded mean-zero sequences.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::validate_ladder;
use crate::grid::{Grid, StreamingKahan};
use crate::maps::MapSchedule;
use crate::martingale::schedule_means;
use crate::observable::Observable;
use crate::rng::{derive_rng, stream};
use crate::ulam::MatrixCache;

/// Weight exponent on `log log n` in the part-(a) envelope; above the
/// theoretical 3/2 to leave slack.
pub const SBC_LOG_LOG_EXPONENT: f64 = 1.6;

/// Worst discrepancy over the trajectories at one ladder point, with both
/// envelope normalizations.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SbcRow {
    pub n: usize,
    /// `max_x |sum_{j<=n} phi(T_j ... T_1 x) - sum_{j<=n} c_j|`.
    pub max_discrepancy: f64,
    /// Discrepancy over `n^{1/2} (log log n)^{1.6}`.
    pub part_a: f64,
    /// Discrepancy over `n`.
    pub part_b: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SbcTable {
    pub rows: Vec<SbcRow>,
    pub trajectories: usize,
    pub seed: u64,
}

impl SbcTable {
    /// CSV with header `n,max_discrepancy,part_a,part_b`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "n,max_discrepancy,part_a,part_b")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.n, r.max_discrepancy, r.part_a, r.part_b)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tracks `D_n = |sum phi(orbit) - sum c_j|` at the ladder points, maximized
/// over trajectories with uniformly drawn starts. Ladder entries start at 3
/// so `log log n` stays positive.
pub fn sbc_check(
    schedule: &MapSchedule,
    observable: &Observable,
    ladder: &[usize],
    trajectories: usize,
    seed: u64,
    grid: Grid,
    cache: &MatrixCache,
) -> Result<SbcTable> {
    validate_ladder(ladder)?;
    if ladder[0] < 3 {
        return Err(Error::Invalid(
            "the part-(a) weight needs ladder entries >= 3".into(),
        ));
    }
    if trajectories == 0 {
        return Err(Error::Invalid("need at least one trajectory".into()));
    }
    let n_max = *ladder.last().expect("nonempty ladder");
    schedule.require_len(n_max)?;
    let means = schedule_means(schedule, observable, grid, n_max, cache)?;
    let params = schedule.params();

    let zero = || vec![0.0f64; ladder.len()];
    let max_d: Vec<f64> = (0..trajectories)
        .into_par_iter()
        .map(|t| {
            let mut rng = derive_rng(seed, t as u64, stream::INITIAL_X);
            let mut x: f64 = rng.random();
            let mut acc = StreamingKahan::default();
            let mut out = Vec::with_capacity(ladder.len());
            let mut next = ladder.iter().copied().peekable();
            for k in 1..=n_max {
                x = params[k - 1].eval(x);
                acc.add(observable.value(x) - means[k - 1]);
                if next.peek() == Some(&k) {
                    out.push(acc.value().abs());
                    next.next();
                }
            }
            out
        })
        .reduce(zero, |mut a, b| {
            for (av, bv) in a.iter_mut().zip(b) {
                *av = av.max(bv);
            }
            a
        });

    let rows = ladder
        .iter()
        .zip(max_d)
        .map(|(&n, d)| {
            let nf = n as f64;
            let weight = nf.sqrt() * nf.ln().ln().powf(SBC_LOG_LOG_EXPONENT);
            SbcRow {
                n,
                max_discrepancy: d,
                part_a: d / weight,
                part_b: d / nf,
            }
        })
        .collect();
    Ok(SbcTable {
        rows,
        trajectories,
        seed,
    })
}

/// Result of the SLLN envelope check `S_n = O(n^eta)` with
/// `eta = (gamma + 1) / 3 + 0.1`.
#[derive(Debug, Clone, Serialize)]
pub struct SllnReport {
    pub gamma: f64,
    pub eta: f64,
    /// `(n, max over sequences of |S_n| / n^eta)` along the ladder.
    pub rows: Vec<(usize, f64)>,
    /// The envelope constant seen over the final decade never exceeds the
    /// one set earlier.
    pub pass: bool,
}

/// Checks the envelope along a geometric ladder for `n_sequences` streamed
/// sequences. `make_sequence(j)` must yield at least `ladder.last()` terms
/// of a bounded mean-zero sequence with `Var(S_n) <= C n^gamma`; the caller
/// owns those hypotheses. The ladder must span at least one decade so the
/// late envelope constant has an earlier one to compare against.
pub fn slln_envelope_check<F, I>(
    n_sequences: usize,
    gamma: f64,
    ladder: &[usize],
    make_sequence: F,
) -> Result<SllnReport>
where
    F: Fn(u64) -> I + Sync,
    I: Iterator<Item = f64>,
{
    if !gamma.is_finite() || gamma >= 2.0 {
        return Err(Error::Domain {
            what: "SLLN variance growth exponent gamma",
            value: gamma,
            expected: "finite gamma < 2",
        });
    }
    validate_ladder(ladder)?;
    let n_max = *ladder.last().expect("nonempty ladder");
    if n_max < 10 * ladder[0] {
        return Err(Error::Invalid(
            "the envelope ladder must span at least one decade".into(),
        ));
    }
    if n_sequences == 0 {
        return Err(Error::Invalid("need at least one sequence".into()));
    }
    let eta = (gamma + 1.0) / 3.0 + 0.1;

    let per_seq: Vec<Vec<f64>> = (0..n_sequences as u64)
        .into_par_iter()
        .map(|j| {
            let mut it = make_sequence(j);
            let mut acc = StreamingKahan::default();
            let mut out = Vec::with_capacity(ladder.len());
            let mut next = ladder.iter().copied().peekable();
            for k in 1..=n_max {
                let v = it.next().ok_or_else(|| {
                    Error::Invalid(format!(
                        "sequence {j} ended at {} of {n_max} terms",
                        k - 1
                    ))
                })?;
                acc.add(v);
                if next.peek() == Some(&k) {
                    out.push(acc.value().abs() / (k as f64).powf(eta));
                    next.next();
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<(usize, f64)> = ladder.iter().map(|&n| (n, 0.0)).collect();
    for seq in &per_seq {
        for (row, &r) in rows.iter_mut().zip(seq) {
            row.1 = row.1.max(r);
        }
    }

    let mut early = 0.0f64;
    let mut late = 0.0f64;
    for &(n, r) in &rows {
        if n * 10 > n_max {
            late = late.max(r);
        } else {
            early = early.max(r);
        }
    }
    Ok(SllnReport {
        gamma,
        eta,
        rows,
        pass: late <= early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::MapParameter;
    use approx::assert_relative_eq;

    #[test]
    fn constant_observables_have_zero_discrepancy() {
        let grid = Grid::new(256).unwrap();
        let cache = MatrixCache::new();
        let schedule = MapSchedule::constant(MapParameter::new(0.4).unwrap(), 512).unwrap();
        let phi = Observable::polynomial(vec![2.5]);
        let table = sbc_check(&schedule, &phi, &[8, 64, 512], 10, 7, grid, &cache).unwrap();
        for row in &table.rows {
            assert!(
                row.max_discrepancy < 1e-9,
                "constant observable drifted: {row:?}"
            );
        }
    }

    #[test]
    fn sbc_part_b_ratio_decays_along_the_orbit() {
        let grid = Grid::new(1024).unwrap();
        let cache = MatrixCache::new();
        let schedule =
            MapSchedule::constant(MapParameter::new(0.3).unwrap(), 10_000).unwrap();
        let phi = Observable::identity();
        let ladder = [100, 400, 1600, 6400, 10_000];
        let table = sbc_check(&schedule, &phi, &ladder, 20, 0x5bc, grid, &cache).unwrap();
        let first = table.rows.first().unwrap();
        let last = table.rows.last().unwrap();
        assert!(first.part_b > 0.0);
        assert!(
            last.part_b < 0.5 * first.part_b,
            "D_n/n should shrink: {} vs {}",
            last.part_b,
            first.part_b
        );
        for row in &table.rows {
            assert_relative_eq!(
                row.part_a * (row.n as f64).sqrt()
                    * (row.n as f64).ln().ln().powf(SBC_LOG_LOG_EXPONENT),
                row.max_discrepancy,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn sbc_inputs_are_validated() {
        let grid = Grid::new(64).unwrap();
        let cache = MatrixCache::new();
        let schedule = MapSchedule::constant(MapParameter::new(0.3).unwrap(), 64).unwrap();
        let phi = Observable::identity();
        assert!(sbc_check(&schedule, &phi, &[2, 64], 5, 0, grid, &cache).is_err());
        assert!(sbc_check(&schedule, &phi, &[8, 64], 0, 0, grid, &cache).is_err());
        assert!(sbc_check(&schedule, &phi, &[8, 128], 5, 0, grid, &cache).is_err());
        assert!(sbc_check(&schedule, &phi, &[], 5, 0, grid, &cache).is_err());
    }

    #[test]
    fn coin_flips_respect_the_envelope_across_seeds() {
        // i.i.d. +-1 flips have Var(S_n) = n, so gamma = 1 and eta = 0.7667;
        // the true growth n^{1/2 + o(1)} sets the envelope constant early.
        let ladder: Vec<usize> = (7..=20).map(|k| 1usize << k).collect();
        let report = slln_envelope_check(100, 1.0, &ladder, |j| {
            let mut rng = derive_rng(0xf11b, j, stream::SYNTHETIC);
            std::iter::repeat_with(move || if rng.random::<bool>() { 1.0 } else { -1.0 })
        })
        .unwrap();
        assert_relative_eq!(report.eta, 2.0 / 3.0 + 0.1, max_relative = 1e-15);
        assert!(report.pass, "rows: {:?}", report.rows);
    }

    #[test]
    fn degenerate_sequences_pass_trivially() {
        let ladder = [10, 100, 1000];
        let zeros = slln_envelope_check(3, 1.0, &ladder, |_| std::iter::repeat(0.0)).unwrap();
        assert!(zeros.pass);
        assert!(zeros.rows.iter().all(|&(_, r)| r == 0.0));

        // Alternating signs keep S_n in {-1, 0}: bounded, gamma = 0.
        let alternating = slln_envelope_check(1, 0.0, &ladder, |_| {
            (1..).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 })
        })
        .unwrap();
        assert!(alternating.pass);
    }

    #[test]
    fn envelope_checks_reject_bad_inputs_and_catch_growth() {
        let ladder = [10, 100, 1000];
        assert!(slln_envelope_check(1, 2.0, &ladder, |_| std::iter::repeat(0.0)).is_err());
        assert!(slln_envelope_check(0, 1.0, &ladder, |_| std::iter::repeat(0.0)).is_err());
        assert!(slln_envelope_check(1, 1.0, &[10, 50], |_| std::iter::repeat(0.0)).is_err());
        // A sequence that ends too early is an input error.
        assert!(
            slln_envelope_check(1, 1.0, &ladder, |_| std::iter::repeat(0.0).take(5)).is_err()
        );
        // Linear drift violates every sublinear envelope.
        let drift = slln_envelope_check(1, 1.0, &ladder, |_| std::iter::repeat(1.0)).unwrap();
        assert!(!drift.pass);
    }
}
