//! Run manifests: the single file a finished run can be reproduced from.
//!
//! The manifest embeds the fully resolved config as TOML text, so `run` on a
//! manifest file re-executes the identical experiment and regenerates every
//! CSV byte for byte. Gates, seeds, versions, and headline results ride
//! along for auditing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Gate {
    pub fn new(name: &str, pass: bool, detail: String) -> Self {
        Gate {
            name: name.to_string(),
            pass,
            detail,
        }
    }

    /// Gate on a value that must lie in a closed interval.
    pub fn in_range(name: &str, value: f64, lo: f64, hi: f64) -> Self {
        Gate::new(
            name,
            value >= lo && value <= hi,
            format!("{value:.6} in [{lo}, {hi}]"),
        )
    }

    /// Gate on a value that must not exceed a cap.
    pub fn at_most(name: &str, value: f64, cap: f64) -> Self {
        Gate::new(name, value <= cap, format!("{value:.6} <= {cap}"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// Experiment kind, for quick reading.
    pub kind: String,
    /// The resolved config, exactly as rerunnable TOML.
    pub config_toml: String,
    /// Master seed after overrides.
    pub seed: u64,
    /// Crate versions that produced the run.
    pub versions: BTreeMap<String, String>,
    /// Regime warnings raised at config time.
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
    pub gates: Vec<Gate>,
    /// Files written into the output directory, relative names.
    pub artifacts: Vec<String>,
    /// Headline numbers, experiment-shaped.
    pub results: serde_json::Value,
}

impl Manifest {
    pub fn versions() -> BTreeMap<String, String> {
        let mut v = BTreeMap::new();
        v.insert("pmlab".into(), pmlab::VERSION.to_string());
        v.insert("pmlab-cli".into(), env!("CARGO_PKG_VERSION").to_string());
        v
    }

    pub fn first_failed_gate(&self) -> Option<&Gate> {
        self.gates.iter().find(|g| !g.pass)
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text)
    }

    pub fn from_json(text: &str) -> Result<Manifest, String> {
        serde_json::from_str(text).map_err(|e| format!("manifest parse: {e}"))
    }
}
