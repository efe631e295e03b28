//! Command-line front end: validate configs, run experiments, write
//! manifests and artifacts, and map outcomes to exit codes.
//!
//! Exit codes: 0 all gates pass, 1 a gate failed, 2 config error,
//! 3 run-phase failure.

mod config;
mod manifest;
mod runner;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::{Config, ExperimentKind};
use manifest::Manifest;

/// Environment variable naming the default output root.
const OUTPUT_ROOT_ENV: &str = "PMLAB_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "pmlab",
    version,
    about = "Numerical experiments on compositions of intermittent interval maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for sampling; 0 uses every core. Results do not
    /// depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Write artifacts here instead of the config's choice.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Replace the master seed; derived streams and seed lists follow.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Replace the grid resolution.
    #[arg(long, global = true)]
    grid_override: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config or from a previous run's
    /// manifest JSON.
    Run { config: PathBuf },
    /// Parse a config, fill defaults, and report regime warnings.
    Validate { config: PathBuf },
    /// List the experiment kinds.
    ListExperiments,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::ListExperiments => {
            for kind in ExperimentKind::ALL {
                println!("{:<22} {}", kind.name(), kind.summary());
            }
            ExitCode::from(0)
        }
        Command::Validate { config } => match load_and_resolve(config, &cli) {
            Ok((cfg, warnings)) => {
                for w in &warnings {
                    eprintln!("warning: {w}");
                }
                println!("ok: kind = {}", cfg.kind.name());
                print!("{}", cfg.to_toml());
                ExitCode::from(0)
            }
            Err(e) => {
                eprintln!("config error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Run { config } => run_command(config, &cli),
    }
}

/// Reads a config from TOML, or from the `config_toml` a manifest embeds.
fn load_config_text(path: &Path) -> Result<String, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest = Manifest::from_json(&text)?;
        Ok(manifest.config_toml)
    } else {
        Ok(text)
    }
}

fn load_and_resolve(path: &Path, cli: &Cli) -> Result<(Config, Vec<String>), String> {
    let text = load_config_text(path)?;
    let mut cfg = Config::from_toml(&text)?;
    if let Some(seed) = cli.seed_override {
        cfg.seed = seed;
        // Derived seed choices follow the new master.
        if let Some(s) = cfg.schedule.as_mut() {
            s.seed = None;
        }
        if let Some(c) = cfg.clt.as_mut() {
            if let Some(seeds) = c.seeds.take() {
                c.n_seeds = seeds.len();
            }
        }
    }
    if let Some(grid) = cli.grid_override {
        cfg.grid = grid;
    }
    let warnings = cfg.resolve()?;
    Ok((cfg, warnings))
}

fn output_dir(cfg: &Config, config_path: &Path, cli: &Cli) -> PathBuf {
    if let Some(dir) = &cli.output_dir {
        return dir.clone();
    }
    if let Some(dir) = &cfg.output_dir {
        return dir.clone();
    }
    let stem = config_path
        .file_stem()
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map_or_else(|| PathBuf::from("pmlab-out"), PathBuf::from);
    root.join(stem)
}

fn run_command(config_path: &Path, cli: &Cli) -> ExitCode {
    let (cfg, warnings) = match load_and_resolve(config_path, cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if cli.workers > 0 {
        // Partitioning never feeds back into sampled values, so this only
        // sets throughput.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global();
    }
    let dir = output_dir(&cfg, config_path, cli);
    if let Err(e) = std::fs::create_dir_all(&dir) {
        eprintln!("config error: cannot create {}: {e}", dir.display());
        return ExitCode::from(2);
    }

    let t0 = Instant::now();
    let output = match runner::execute(&cfg, &dir) {
        Ok(out) => out,
        Err(e) => {
            eprintln!("run error: {e}");
            return ExitCode::from(3);
        }
    };

    let manifest = Manifest {
        kind: cfg.kind.name().to_string(),
        config_toml: cfg.to_toml(),
        seed: cfg.seed,
        versions: Manifest::versions(),
        warnings: warnings.clone(),
        wall_time_s: t0.elapsed().as_secs_f64(),
        gates: output.gates,
        artifacts: output.artifacts,
        results: output.results,
    };
    if let Err(e) = manifest.write(&dir.join("manifest.json")) {
        eprintln!("run error: cannot write manifest: {e}");
        return ExitCode::from(3);
    }

    for gate in &manifest.gates {
        println!(
            "gate {:<24} {}  ({})",
            gate.name,
            if gate.pass { "PASS" } else { "FAIL" },
            gate.detail
        );
    }
    println!(
        "wrote {} ({} artifacts, {:.2}s)",
        dir.display(),
        manifest.artifacts.len(),
        manifest.wall_time_s
    );
    match manifest.first_failed_gate() {
        None => ExitCode::from(0),
        Some(gate) => {
            eprintln!("gate failed: {} ({})", gate.name, gate.detail);
            ExitCode::from(1)
        }
    }
}
