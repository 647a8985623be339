//! Scenario files: one base config plus an optional grid over `n`, `p_c`, `g`.

use std::path::Path;

use cbc_core::sim::SimConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub config: SimConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    /// Largest number of runs a sweep may expand to.
    #[serde(default = "default_cap")]
    pub max_runs: usize,
    /// Target failure probabilities for the Adv1 forgery sweep.
    #[serde(default = "default_forge_targets")]
    pub forge_targets: Vec<f64>,
    /// Sampled requests per forgery sweep point.
    #[serde(default = "default_forge_requests")]
    pub forge_requests: u64,
}

fn default_cap() -> usize {
    100
}

fn default_forge_targets() -> Vec<f64> {
    vec![0.1, 0.01, 0.001]
}

fn default_forge_requests() -> u64 {
    100_000
}

/// Empty lists keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub n: Vec<u16>,
    #[serde(default)]
    pub p_c: Vec<f64>,
    #[serde(default)]
    pub g: Vec<f64>,
}

/// One concrete run of a scenario.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub label: String,
    pub config: SimConfig,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        ScenarioFile {
            name: "3_1_1".into(),
            config: SimConfig::scenario(3, 0.1, 0.1),
            sweep: None,
            max_runs: default_cap(),
            forge_targets: default_forge_targets(),
            forge_requests: default_forge_requests(),
        }
    }
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Expands the sweep into validated runs, in `n`, `p_c`, `g` order.
    pub fn runs(&self, seed: Option<u64>) -> Result<Vec<RunSpec>, CliError> {
        let mut base = self.config.clone();
        if let Some(s) = seed {
            base.seed = s;
        }
        let runs = match &self.sweep {
            None => vec![RunSpec { label: self.name.clone(), config: base }],
            Some(sweep) => {
                let or_base = |v: &[f64], b: f64| if v.is_empty() { vec![b] } else { v.to_vec() };
                let ns = if sweep.n.is_empty() { vec![base.n] } else { sweep.n.clone() };
                let ps = or_base(&sweep.p_c, base.p_c);
                let gs = or_base(&sweep.g, base.g);
                let total = ns.len() * ps.len() * gs.len();
                if total > self.max_runs {
                    return Err(CliError::Config(format!("sweep expands to {total} runs, cap is {}", self.max_runs)));
                }
                let mut out = Vec::with_capacity(total);
                for &n in &ns {
                    for &p_c in &ps {
                        for &g in &gs {
                            let mut config = base.clone();
                            config.n = n;
                            config.p_c = p_c;
                            config.g = g;
                            out.push(RunSpec { label: format!("{}-n{n}-p{p_c}-g{g}", self.name), config });
                        }
                    }
                }
                out
            }
        };
        for r in &runs {
            r.config.validate().map_err(|e| CliError::Config(format!("{}: {e}", r.label)))?;
        }
        Ok(runs)
    }
}
