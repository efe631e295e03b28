//! Experiment pipelines: build core objects from a resolved config, run the
//! computation, write artifacts, and judge gates.
//!
//! Every artifact is written with `{}` float formatting (shortest exact
//! decimal), and every random stream derives from the manifest's seeds, so a
//! rerun reproduces each output file byte for byte at any worker count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use pmlab::cone::ConeParams;
use pmlab::experiments::{
    composite_decay_check, fit_decay_rate, green_kubo_variance, loss_of_memory_curve,
    variance_growth_scan, CoboundaryVerdict, DecayInputs, RateFit,
};
use pmlab::martingale::{schedule_means, sigma_sq_ladder, MartingaleState};
use pmlab::montecarlo::{
    sample_sn_ensemble, sbc_check, self_normed_clt_test, slln_envelope_check, EnsembleConfig,
    OmegaOutcome, SigmaSource, StatReport,
};
use pmlab::rng::{derive_rng, stream};
use pmlab::stats::{linear_fit, normal_cdf};
use pmlab::{Grid, GridDensity, MapParameter, MapSchedule, MatrixCache, Observable};
use rand::Rng;
use serde_json::json;

use crate::config::{
    build_scheme, clt_thresholds, Config, ExperimentKind, SigmaSpec, SllnSource, VerdictSpec,
};
use crate::manifest::Gate;

pub struct RunOutput {
    pub gates: Vec<Gate>,
    pub artifacts: Vec<String>,
    pub results: serde_json::Value,
}

/// Writes a whitespace-separated `.dat` twin of a CSV artifact for plotting;
/// the header becomes a `#` comment line.
fn plot_twin(dir: &Path, csv_name: &str, artifacts: &mut Vec<String>) -> pmlab::Result<()> {
    let text = fs::read_to_string(dir.join(csv_name))?;
    let mut out = String::with_capacity(text.len() + 2);
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            out.push_str("# ");
        }
        out.push_str(&line.replace(',', " "));
        out.push('\n');
    }
    let dat_name = csv_name.replace(".csv", ".dat");
    fs::write(dir.join(&dat_name), out)?;
    artifacts.push(dat_name);
    Ok(())
}

fn write_artifact(
    dir: &Path,
    name: &str,
    text: String,
    artifacts: &mut Vec<String>,
) -> pmlab::Result<()> {
    fs::write(dir.join(name), text)?;
    artifacts.push(name.to_string());
    Ok(())
}

fn grid_of(config: &Config) -> pmlab::Result<Grid> {
    Grid::new(config.grid)
}

fn cone_of(config: &Config) -> pmlab::Result<ConeParams> {
    config
        .build_cone()
        .map_err(pmlab::Error::Invalid)
}

fn schedule_of(config: &Config) -> pmlab::Result<MapSchedule> {
    config
        .schedule
        .as_ref()
        .expect("resolve checked the schedule table")
        .build(config.seed)
        .map_err(pmlab::Error::Invalid)
}

fn observable_of(config: &Config) -> pmlab::Result<Observable> {
    config
        .observable
        .as_ref()
        .expect("resolve checked the observable table")
        .build()
        .map_err(pmlab::Error::Invalid)
}

pub fn execute(config: &Config, dir: &Path) -> pmlab::Result<RunOutput> {
    match config.kind {
        ExperimentKind::Decay | ExperimentKind::LpDecay => run_decay(config, dir),
        ExperimentKind::CompositeDecay => run_composite(config, dir),
        ExperimentKind::MartingaleIdentities => run_identities(config, dir),
        ExperimentKind::VarianceScan => run_scan(config, dir),
        ExperimentKind::GreenKubo => run_green_kubo(config, dir),
        ExperimentKind::Clt => run_clt(config, dir),
        ExperimentKind::QuenchedClt => run_quenched(config, dir),
        ExperimentKind::Sbc => run_sbc(config, dir),
        ExperimentKind::Slln => run_slln(config, dir),
    }
}

fn fit_gates(fit: &RateFit, slope_max: Option<f64>, slope_range: Option<(f64, f64)>) -> Vec<Gate> {
    let mut gates = Vec::new();
    if let Some(cap) = slope_max {
        gates.push(Gate::at_most("slope-max", fit.slope, cap));
    }
    if let Some((lo, hi)) = slope_range {
        gates.push(Gate::in_range("slope-range", fit.slope, lo, hi));
    }
    gates
}

fn run_decay(config: &Config, dir: &Path) -> pmlab::Result<RunOutput> {
    let d = config.decay.as_ref().expect("resolved");
    let grid = grid_of(config)?;
    let cone = cone_of(config)?;
    let cache = MatrixCache::new();
    let schedule = schedule_of(config)?;
    let ladder = d.ladder.as_ref().expect("resolved").clone();
    let p = d.p.expect("resolved");

    let smooth: Option<(Observable, Observable)> = match (&d.phi_observable, &d.psi_observable) {
        (Some(a), Some(b)) => Some((
            a.build().map_err(pmlab::Error::Invalid)?,
            b.build().map_err(pmlab::Error::Invalid)?,
        )),
        _ => None,
    };
    let cone_pair: Option<(GridDensity, GridDensity)> = if smooth.is_none() {
        let density = |e: f64| -> pmlab::Result<GridDensity> {
            if e == 0.0 {
                Ok(GridDensity::uniform(grid))
            } else {
                GridDensity::power_law(grid, e)
            }
        };
        Some((density(d.phi_exponent)?, density(d.psi_exponent)?))
    } else {
        None
    };
    let inputs = match (&smooth, &cone_pair) {
        (Some((a, b)), _) => DecayInputs::SmoothPair(a, b),
        (_, Some((f, g))) => DecayInputs::ConePair(f, g),
        _ => unreachable!("resolve picked a mode"),
    };

    let curve = loss_of_memory_curve(&schedule, inputs, p, &ladder, grid, &cone, &cache)?;
    let correction = d.log_correction.then(|| schedule.alpha_max());
    let fit = fit_decay_rate(&curve, d.fit_window.expect("resolved"), correction)?;

    let mut artifacts = Vec::new();
    curve.write_csv(&dir.join("decay_curve.csv"))?;
    artifacts.push("decay_curve.csv".into());
    plot_twin(dir, "decay_curve.csv", &mut artifacts)?;

    let gates = fit_gates(&fit, d.slope_max, d.slope_range);
    let results = json!({
        "curve_label": curve.label,
        "discretization_floor": curve.discretization_floor(),
        "fit": fit,
    });
    Ok(RunOutput {
        gates,
        artifacts,
        results,
    })
}

fn run_composite(config: &Config, dir: &Path) -> pmlab::Result<RunOutput> {
    let c = config.composite.as_ref().expect("resolved");
    let grid = grid_of(config)?;
    let cone = cone_of(config)?;
    let cache = Arc::new(MatrixCache::new());
    let schedule = schedule_of(config)?;
    let observable = observable_of(config)?;
    let ladder = c.ladder.as_ref().expect("resolved").clone();

    let mut state = MartingaleState::new(schedule, observable, grid, cone, cache)?;
    let (curve, c_env) = composite_decay_check(&mut state, c.i, &ladder, c.p)?;
    let fit = fit_decay_rate(&curve, c.fit_window.expect("resolved"), None)?;

    let mut artifacts = Vec::new();
    curve.write_csv(&dir.join("composite_curve.csv"))?;
    artifacts.push("composite_curve.csv".into());
    plot_twin(dir, "composite_curve.csv", &mut artifacts)?;

    let gates = fit_gates(&fit, c.slope_max, None);
    let results = json!({
        "seed_step": c.i,
        "envelope_constant": c_env,
        "discretization_floor": curve.discretization_floor(),
        "fit": fit,
    });
    Ok(RunOutput {
        gates,
        artifacts,
        results,
    })
}

fn run_identities(config: &Config, dir: &Path) -> pmlab::Result<RunOutput> {
    let id = config.identities.as_ref().expect("resolved");
    let grid = grid_of(config)?;
    let cone = cone_of(config)?;
    let cache = Arc::new(MatrixCache::new());
    let schedule = schedule_of(config)?;
    let observable = observable_of(config)?;

    let mut state = MartingaleState::new(schedule, observable, grid, cone, cache)?;
    let hn_top = id.hn_ladder.as_ref().and_then(|l| l.last().copied());
    state.advance_to(id.n_max.max(hn_top.unwrap_or(0)))?;

    let mut max_residual = 0.0f64;
    let mut max_spread = 0.0f64;
    let mut table = String::from("n,residual,sigma_direct,sigma_identity_c,sigma_identity_e,rel_spread\n");
    for n in 1..=id.n_max {
        let residual = state.martingale_residual(n)?;
        let direct = state.sigma_sq_direct(n, id.lag_cap)?;
        let c = state.sigma_sq_identity_c(n)?;
        let e = state.sigma_sq_identity_e(n)?;
        let hi = direct.max(c).max(e);
        let lo = direct.min(c).min(e);
        let spread = (hi - lo) / hi.abs().max(f64::EPSILON);
        max_residual = max_residual.max(residual);
        max_spread = max_spread.max(spread);
        let _ = writeln!(table, "{n},{residual},{direct},{c},{e},{spread}");
    }
    let mut artifacts = Vec::new();
    write_artifact(dir, "identities.csv", table, &mut artifacts)?;
    plot_twin(dir, "identities.csv", &mut artifacts)?;
    state.write_per_n_csv(&dir.join("per_n.csv"), 2.0, 2.0)?;
    artifacts.push("per_n.csv".into());

    let mut gates = vec![
        Gate::at_most("martingale-residual", max_residual, id.residual_tol),
        Gate::at_most("variance-agreement", max_spread, id.sigma_rel_tol),
    ];
    let mut hn_result = serde_json::Value::Null;
    if let Some(ladder) = &id.hn_ladder {
        let stats = state.hn_pointwise_stat(ladder)?;
        let mid = ladder.len() / 2;
        let early = stats[..mid].iter().cloned().fold(f64::MIN, f64::max);
        let late = stats[mid..].iter().cloned().fold(f64::MIN, f64::max);
        let ratio = late / early.abs().max(f64::EPSILON);
        gates.push(Gate::at_most("hn-stat-ratio", ratio, id.hn_ratio_max));
        let mut hn_csv = String::from("n,weighted_sup\n");
        for (&n, &s) in ladder.iter().zip(&stats) {
            let _ = writeln!(hn_csv, "{n},{s}");
        }
        write_artifact(dir, "hn_stat.csv", hn_csv, &mut artifacts)?;
        plot_twin(dir, "hn_stat.csv", &mut artifacts)?;
        hn_result = json!({"early_max": early, "late_max": late, "ratio": ratio});
    }

    let results = json!({
        "n_max": id.n_max,
        "max_residual": max_residual,
        "max_variance_spread": max_spread,
        "hn_stat": hn_result,
    });
    Ok(RunOutput {
        gates,
        artifacts,
        results,
    })
}

fn run_scan(config: &Config, dir: &Path) -> pmlab::Result<RunOutput> {
    let s = config.scan.as_ref().expect("resolved");
    let grid = grid_of(config)?;
    let cache = MatrixCache::new();
    let observable = observable_of(config)?;
    let ladder = s.ladder.as_ref().expect("resolved").clone();

    let scan = variance_growth_scan(
        s.base,
        s.epsilon,
        &observable,
        &ladder,
        s.n_schedules,
        s.lag_cap,
        grid,
        config.seed,
        &cache,
    )?;

    let mut table = String::from("seed,n,sigma_sq,sigma_sq_over_n\n");
    for sched in &scan.per_schedule {
        for &(n, v) in &sched.points {
            let _ = writeln!(table, "{},{n},{v},{}", sched.seed, v / n as f64);
        }
    }
    let mut artifacts = Vec::new();
    write_artifact(dir, "variance_scan.csv", table, &mut artifacts)?;
    plot_twin(dir, "variance_scan.csv", &mut artifacts)?;

    let mut gates = Vec::new();
    let degenerate_detail = "degenerate: the centered observable carries zero variance";
    if let Some((lo, hi)) = s.beta_hat_range {
        if scan.degenerate {
            gates.push(Gate::new("beta-hat-range", true, degenerate_detail.into()));
        } else {
            let betas: Vec<f64> = scan
                .per_schedule
                .iter()
                .filter_map(|p| p.beta_hat)
                .collect();
            let all_in = betas.len() == scan.per_schedule.len()
                && betas.iter().all(|&b| b >= lo && b <= hi);
            let detail = match (
                betas.iter().cloned().reduce(f64::min),
                betas.iter().cloned().reduce(f64::max),
            ) {
                (Some(mn), Some(mx)) if betas.len() == scan.per_schedule.len() => {
                    format!("all beta-hat in [{mn:.4}, {mx:.4}], required [{lo}, {hi}]")
                }
                _ => "some growth exponents were unfittable".into(),
            };
            gates.push(Gate::new("beta-hat-range", all_in, detail));
        }
    }
    if let Some(cap) = s.band_max {
        if scan.degenerate {
            gates.push(Gate::new("variance-band", true, degenerate_detail.into()));
        } else {
            match scan.band_rel_width {
                Some(w) => gates.push(Gate::at_most("variance-band", w, cap)),
                None => gates.push(Gate::new(
                    "variance-band",
                    false,
                    "band width undefined: no positive variances".into(),
                )),
            }
        }
    }
    if let Some(tol) = s.green_kubo_rel_tol {
        if scan.degenerate {
            gates.push(Gate::new("green-kubo-match", true, degenerate_detail.into()));
        } else {
            let mut tops: Vec<f64> = scan
                .per_schedule
                .iter()
                .filter_map(|p| p.points.last().map(|&(n, v)| v / n as f64))
                .collect();
            tops.sort_by(|a, b| a.total_cmp(b));
            let median = tops[tops.len() / 2];
            let rel = (median - scan.base_report.sigma_sq).abs()
                / scan.base_report.sigma_sq.abs().max(f64::EPSILON);
            gates.push(Gate::new(
                "green-kubo-match",
                rel <= tol,
                format!(
                    "median sigma_n^2/n = {median:.6e} vs summed-autocorrelation {:.6e}, rel err {rel:.4}",
                    scan.base_report.sigma_sq
                ),
            ));
        }
    }

    let results = serde_json::to_value(&scan).expect("scan serializes");
    Ok(RunOutput {
        gates,
        artifacts,
        results,
    })
}

fn run_green_kubo(config: &Config, dir: &Path) -> pmlab::Result<RunOutput> {
    let g = config.green_kubo.as_ref().expect("resolved");
    let grid = grid_of(config)?;
    let cache = MatrixCache::new();
    let observable = observable_of(config)?;
    let report = green_kubo_variance(MapParameter::new(g.beta)?, &observable, g.k_max, grid, &cache)?;

    let mut artifacts = Vec::new();
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_artifact(dir, "green_kubo.json", text, &mut artifacts)?;

    let mut gates = Vec::new();
    if let Some(required) = g.require_verdict {
        let want = match required {
            VerdictSpec::NotCoboundary => CoboundaryVerdict::NotCoboundary,
            VerdictSpec::Inconclusive => CoboundaryVerdict::Inconclusive,
            VerdictSpec::Degenerate => CoboundaryVerdict::Degenerate,
        };
        gates.push(Gate::new(
            "verdict",
            report.verdict == want,
            format!("verdict {:?}, required {:?}", report.verdict, want),
        ));
    }
    let results = serde_json::to_value(&report).expect("report serializes");
    Ok(RunOutput {
        gates,
        artifacts,
        results,
    })
}

/// Sorted standardized samples against the normal CDF, for CDF overlays.
fn write_ecdf(
    dir: &Path,
    name: &str,
    samples: &[f64],
    sigma_hat: f64,
    artifacts: &mut Vec<String>,
) -> pmlab::Result<()> {
    if !(sigma_hat > 0.0) {
        return Ok(());
    }
    let mut z: Vec<f64> = samples.iter().map(|&v| v / sigma_hat).collect();
    z.sort_by(|a, b| a.total_cmp(b));
    let m = z.len() as f64;
    let mut out = String::from("# z ecdf normal_cdf\n");
    for (i, &v) in z.iter().enumerate() {
        let _ = writeln!(out, "{v} {} {}", (i + 1) as f64 / m, normal_cdf(v));
    }
    write_artifact(dir, name, out, artifacts)?;
    Ok(())
}

fn run_clt(config: &Config, dir: &Path) -> pmlab::Result<RunOutput> {
    let c = config.clt.as_ref().expect("resolved");
    let grid = grid_of(config)?;
    let cache = MatrixCache::new();
    let schedule = schedule_of(config)?;
    let observable = observable_of(config)?;
    let checkpoints = c.checkpoints.as_ref().expect("resolved").clone();
    let seeds = c.seeds.as_ref().expect("resolved").clone();
    let thresholds = clt_thresholds(c.p_min, c.skew_max, c.kurt_tol);

    let means = schedule_means(&schedule, &observable, grid, c.n, &cache)?;
    let sigma_source = match c.sigma {
        SigmaSpec::Empirical => SigmaSource::Empirical,
        SigmaSpec::Operator => {
            let sq = sigma_sq_ladder(&schedule, &observable, grid, &[c.n], c.lag_cap, &cache)?;
            SigmaSource::Operator(sq[0].1.max(0.0).sqrt())
        }
    };

    let mut artifacts = Vec::new();
    let mut reports: Vec<StatReport> = Vec::with_capacity(seeds.len());
    let mut checkpoint_rows: Vec<String> = Vec::new();
    for &seed in &seeds {
        let cfg = EnsembleConfig::new(c.samples, c.n, checkpoints.clone(), seed)?;
        let ensemble = sample_sn_ensemble(&schedule, &observable, &means, &cfg)?;
        let sn = ensemble.at(c.n).expect("final checkpoint recorded");
        let report = self_normed_clt_test(sn, sigma_source, &thresholds, seed);
        write_ecdf(
            dir,
            &format!("ecdf_seed{seed}.dat"),
            sn,
            report.sigma_hat,
            &mut artifacts,
        )?;
        if c.dump_samples {
            let name = format!("samples_seed{seed}.csv");
            ensemble.write_csv(&dir.join(&name))?;
            artifacts.push(name);
        }
        for &n in &checkpoints {
            let vals = ensemble.at(n).expect("checkpoint recorded");
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (vals.len() - 1).max(1) as f64;
            checkpoint_rows.push(format!("{seed},{n},{var},{}", var / n as f64));
        }
        reports.push(report);
    }

    let mut var_table = String::from("seed,n,var_sn,var_over_n\n");
    for row in &checkpoint_rows {
        var_table.push_str(row);
        var_table.push('\n');
    }
    write_artifact(dir, "variance_checkpoints.csv", var_table, &mut artifacts)?;
    plot_twin(dir, "variance_checkpoints.csv", &mut artifacts)?;
    let mut reports_json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    reports_json.push('\n');
    write_artifact(dir, "reports.json", reports_json, &mut artifacts)?;

    let min_passes = c.min_passes.expect("resolved");
    let passes = reports.iter().filter(|r| r.pass).count();
    let all_degenerate = reports.iter().all(|r| r.degenerate);
    let gate = if all_degenerate {
        Gate::new(
            "min-passes",
            true,
            "degenerate: every ensemble carries zero variance".into(),
        )
    } else {
        Gate::new(
            "min-passes",
            passes >= min_passes,
            format!("{passes} of {} seeds passed, need {min_passes}", seeds.len()),
        )
    };
    let results = json!({
        "reports": reports,
        "passes": passes,
        "degenerate": all_degenerate,
    });
    Ok(RunOutput {
        gates: vec![gate],
        artifacts,
        results,
    })
}

fn run_quenched(config: &Config, dir: &Path) -> pmlab::Result<RunOutput> {
    let q = config.quenched.as_ref().expect("resolved");
    let grid = grid_of(config)?;
    let cache = MatrixCache::new();
    let observable = observable_of(config)?;
    let scheme = build_scheme(q, config.seed).map_err(pmlab::Error::Invalid)?;
    let thresholds = clt_thresholds(q.p_min, q.skew_max, q.kurt_tol);

    let suite = pmlab::montecarlo::quenched_clt_suite(
        &scheme,
        &observable,
        q.n,
        q.samples,
        q.n_omega,
        grid,
        &thresholds,
        &cache,
    )?;

    let mut table = String::from("omega,completed,pass,degenerate,ks_p_value,sigma_sq_over_n\n");
    let mut any_nondegenerate = false;
    for run in &suite.runs {
        match &run.outcome {
            OmegaOutcome::Completed {
                report,
                sigma_sq_per_n,
            } => {
                any_nondegenerate |= !report.degenerate;
                let _ = writeln!(
                    table,
                    "{},1,{},{},{},{}",
                    run.index,
                    u8::from(report.pass),
                    u8::from(report.degenerate),
                    report.ks_p_value,
                    sigma_sq_per_n
                );
            }
            OmegaOutcome::Failed { .. } => {
                let _ = writeln!(table, "{},0,0,0,,", run.index);
            }
        }
    }
    let mut artifacts = Vec::new();
    write_artifact(dir, "quenched.csv", table, &mut artifacts)?;
    let mut suite_json = serde_json::to_string_pretty(&suite).expect("suite serializes");
    suite_json.push('\n');
    write_artifact(dir, "suite.json", suite_json, &mut artifacts)?;

    let min_passes = q.min_passes.expect("resolved");
    let mut gates = Vec::new();
    if suite.completed > 0 && !any_nondegenerate {
        gates.push(Gate::new(
            "min-passes",
            true,
            "degenerate: every realization carries zero variance".into(),
        ));
    } else {
        gates.push(Gate::new(
            "min-passes",
            suite.passes >= min_passes,
            format!(
                "{} of {} realizations passed, need {min_passes}",
                suite.passes, q.n_omega
            ),
        ));
    }
    if let Some(cap) = q.band_max {
        match suite.sigma_band_rel_width {
            Some(w) => gates.push(Gate::at_most("sigma-band", w, cap)),
            None if !any_nondegenerate => gates.push(Gate::new(
                "sigma-band",
                true,
                "degenerate: every realization carries zero variance".into(),
            )),
            None => gates.push(Gate::new(
                "sigma-band",
                false,
                "band width undefined: no completed realizations".into(),
            )),
        }
    }
    let results = serde_json::to_value(&suite).expect("suite serializes");
    Ok(RunOutput {
        gates,
        artifacts,
        results,
    })
}

fn run_sbc(config: &Config, dir: &Path) -> pmlab::Result<RunOutput> {
    let s = config.sbc.as_ref().expect("resolved");
    let grid = grid_of(config)?;
    let cache = MatrixCache::new();
    let schedule = schedule_of(config)?;
    let observable = observable_of(config)?;
    let ladder = s.ladder.as_ref().expect("resolved").clone();

    let table = sbc_check(
        &schedule,
        &observable,
        &ladder,
        s.trajectories,
        config.seed,
        grid,
        &cache,
    )?;

    let mut artifacts = Vec::new();
    table.write_csv(&dir.join("sbc.csv"))?;
    artifacts.push("sbc.csv".into());
    plot_twin(dir, "sbc.csv", &mut artifacts)?;

    let mut gates = Vec::new();
    let n_max = s.n_max as f64;
    if s.part_a_nonincreasing {
        let window_lo = n_max / 10f64.powf(s.part_a_decades);
        let pts: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter(|r| (r.n as f64) >= window_lo && r.part_a > 0.0)
            .map(|r| ((r.n as f64).ln(), r.part_a.ln()))
            .collect();
        if pts.len() < 2 {
            gates.push(Gate::new(
                "part-a-trend",
                false,
                "too few ladder points in the trend window".into(),
            ));
        } else {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let fit = linear_fit(&xs, &ys)?;
            gates.push(Gate::new(
                "part-a-trend",
                fit.slope <= 0.0,
                format!(
                    "log-log trend {:.4} over n >= {window_lo:.0} (non-increasing iff <= 0)",
                    fit.slope
                ),
            ));
        }
    }
    if let Some(at) = s.part_a_bound_at {
        let bound = table
            .rows
            .iter()
            .find(|r| r.n == at)
            .map(|r| r.part_a)
            .expect("resolve checked the ladder point");
        let worst = table
            .rows
            .iter()
            .filter(|r| r.n > at)
            .map(|r| r.part_a)
            .fold(f64::MIN, f64::max);
        gates.push(Gate::new(
            "part-a-bound",
            worst <= bound,
            format!("max part-(a) beyond n = {at} is {worst:.6}, bound {bound:.6}"),
        ));
    }
    if let Some(cap) = s.part_b_ratio_max {
        let first = table.rows.first().expect("nonempty ladder").part_b;
        let last = table.rows.last().expect("nonempty ladder").part_b;
        let ratio = last / first.abs().max(f64::MIN_POSITIVE);
        gates.push(Gate::at_most("part-b-ratio", ratio, cap));
    }

    let results = serde_json::to_value(&table).expect("table serializes");
    Ok(RunOutput {
        gates,
        artifacts,
        results,
    })
}

fn run_slln(config: &Config, dir: &Path) -> pmlab::Result<RunOutput> {
    let s = config.slln.as_ref().expect("resolved");
    let ladder = s.ladder.as_ref().expect("resolved").clone();
    let seed = config.seed;

    let report = match s.source {
        SllnSource::CoinFlips => slln_envelope_check(s.n_sequences, s.gamma, &ladder, |j| {
            let mut rng = derive_rng(seed, j, stream::SYNTHETIC);
            std::iter::from_fn(move || Some(if rng.random::<bool>() { 1.0 } else { -1.0 }))
        })?,
        SllnSource::Orbit => {
            let grid = grid_of(config)?;
            let cache = MatrixCache::new();
            let schedule = schedule_of(config)?;
            let observable = observable_of(config)?;
            let top = *ladder.last().expect("resolved nonempty");
            let means = schedule_means(&schedule, &observable, grid, top, &cache)?;
            let params = schedule.params().to_vec();
            let (params, means, obs) = (&params, &means, &observable);
            slln_envelope_check(s.n_sequences, s.gamma, &ladder, move |j| {
                let mut rng = derive_rng(seed, j, stream::INITIAL_X);
                let mut x: f64 = rng.random();
                let mut k = 0usize;
                std::iter::from_fn(move || {
                    if k >= params.len() {
                        return None;
                    }
                    x = params[k].eval(x);
                    let v = obs.value(x) - means[k];
                    k += 1;
                    Some(v)
                })
            })?
        }
    };

    let mut csv = String::from("n,envelope_constant\n");
    for &(n, v) in &report.rows {
        let _ = writeln!(csv, "{n},{v}");
    }
    let mut artifacts = Vec::new();
    write_artifact(dir, "slln.csv", csv, &mut artifacts)?;
    plot_twin(dir, "slln.csv", &mut artifacts)?;

    let gates = vec![Gate::new(
        "slln-envelope",
        report.pass,
        format!(
            "eta = {:.4}: the final-decade envelope constant stays within the earlier one",
            report.eta
        ),
    )];
    let results = serde_json::to_value(&report).expect("report serializes");
    Ok(RunOutput {
        gates,
        artifacts,
        results,
    })
}
