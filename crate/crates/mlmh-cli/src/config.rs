//! Run configuration: a flat JSON document, command-line overrides, and
//! per-command resolution into a fully populated [`RunConfig`].
//!
//! Precedence, highest first: command-line flags (`--seed`, `--out`,
//! `--paper-scale`, and the subcommand itself), then keys from the `--config`
//! file, then built-in defaults. The resolved configuration is echoed into
//! every output file, so a result can always be traced back to the exact
//! settings that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use mlmh::Real;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// What the runner does; fixed by the chosen subcommand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One hierarchy sweep at fixed per-level sample counts.
    FixedRun,
    /// Decay-rate study over replicated hierarchy sweeps.
    Rates,
    /// Self-tuning continuation run down to a target tolerance.
    Continuation,
    /// Finite-state verification of the coupled kernel.
    OracleCheck,
    /// Coupled sampler versus the sub-sampling baseline.
    BaselineCompare,
}

impl Mode {
    /// Subcommand spelling of the mode.
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FixedRun => "fixed-run",
            Mode::Rates => "rates",
            Mode::Continuation => "continuation",
            Mode::OracleCheck => "oracle-check",
            Mode::BaselineCompare => "baseline-compare",
        }
    }
}

/// Configuration errors; field validation failures carry the field name.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config file {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config field `{field}`: {message}")]
    Field {
        field: &'static str,
        message: String,
    },
    #[error("need >=2 replicas for CIs")]
    NeedReplicas,
    #[error("{command} supports the 1-D Gaussian problems only, got {problem:?}")]
    Unsupported {
        command: &'static str,
        problem: String,
    },
}

fn field_err(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field,
        message: message.into(),
    }
}

/// Raw configuration as read from the JSON file: every key optional, unknown
/// keys rejected by name.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub problem: Option<String>,
    /// Informational; the subcommand decides what actually runs.
    pub mode: Option<Mode>,
    /// Finest level of the hierarchy used by fixed studies.
    pub levels: Option<usize>,
    #[serde(rename = "samples-per-level")]
    pub samples_per_level: Option<usize>,
    /// Discarded steps per chain; absent means `max(1000, n/10)`.
    #[serde(rename = "burn-in")]
    pub burn_in: Option<usize>,
    pub replicas: Option<usize>,
    pub tol: Option<Real>,
    pub tol0: Option<Real>,
    pub r1: Option<Real>,
    pub r2: Option<Real>,
    #[serde(rename = "L0")]
    pub l0: Option<usize>,
    #[serde(rename = "L_max")]
    pub l_max: Option<usize>,
    pub master_seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub emit_trajectories: Option<bool>,
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Restores the full 100-replica study scale.
    pub paper_scale: bool,
}

impl RawConfig {
    /// Reads a JSON config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Applies command-line overrides; flags beat config keys.
    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.master_seed = Some(seed);
        }
        if let Some(out) = &overrides.out {
            self.output_dir = Some(out.clone());
        }
        if overrides.paper_scale {
            self.replicas = Some(100);
        }
    }

    /// Fills defaults for the given mode and validates every field the mode
    /// depends on.
    pub fn resolve(&self, mode: Mode) -> Result<RunConfig, ConfigError> {
        let problem = self.problem.clone().unwrap_or_else(|| "nested".to_string());
        if !matches!(problem.as_str(), "nested" | "shifting" | "darcy") {
            return Err(field_err(
                "problem",
                format!("unknown problem {problem:?} (expected nested, shifting, or darcy)"),
            ));
        }
        let darcy = problem == "darcy";

        let levels = self.levels.unwrap_or(match mode {
            Mode::OracleCheck => 4,
            _ if darcy => 3,
            _ => 6,
        });
        let samples_per_level = self.samples_per_level.unwrap_or(match mode {
            Mode::Continuation => 1000,
            _ if darcy => 2000,
            _ => 50_000,
        });
        let replicas = self.replicas.unwrap_or(match mode {
            Mode::Rates if darcy => 4,
            Mode::Rates => 20,
            _ => 1,
        });
        let tol = self.tol.unwrap_or(0.1);
        let tol0 = self.tol0.unwrap_or(0.5);
        let r1 = self.r1.unwrap_or(2.0);
        let r2 = self.r2.unwrap_or(1.1);
        let l0 = self.l0.unwrap_or(2);
        let l_max = self.l_max.unwrap_or(if darcy { 3 } else { 10 });

        if samples_per_level == 0 {
            return Err(field_err("samples-per-level", "must be at least 1"));
        }
        if replicas == 0 {
            return Err(field_err("replicas", "must be at least 1"));
        }
        if !(tol.is_finite() && tol > 0.0) {
            return Err(field_err("tol", format!("must be positive, got {tol}")));
        }
        if !(tol0.is_finite() && tol0 > 0.0) {
            return Err(field_err("tol0", format!("must be positive, got {tol0}")));
        }
        if !(r1.is_finite() && r1 > 1.0) {
            return Err(field_err("r1", format!("must exceed 1, got {r1}")));
        }
        if !(r2.is_finite() && r2 > 1.0) {
            return Err(field_err("r2", format!("must exceed 1, got {r2}")));
        }
        if l0 > l_max {
            return Err(field_err(
                "L0",
                format!("screening depth {l0} exceeds L_max {l_max}"),
            ));
        }

        match mode {
            Mode::Rates => {
                if replicas < 2 {
                    return Err(ConfigError::NeedReplicas);
                }
            }
            Mode::Continuation => {
                if tol >= tol0 {
                    return Err(field_err(
                        "tol",
                        format!("target tolerance {tol} must lie below tol0 {tol0}"),
                    ));
                }
            }
            Mode::OracleCheck => {
                if darcy {
                    return Err(ConfigError::Unsupported {
                        command: "oracle-check",
                        problem,
                    });
                }
                if levels == 0 {
                    return Err(field_err(
                        "levels",
                        "oracle checks need at least one coupled level",
                    ));
                }
            }
            Mode::BaselineCompare => {
                if darcy {
                    return Err(ConfigError::Unsupported {
                        command: "baseline-compare",
                        problem,
                    });
                }
            }
            Mode::FixedRun => {}
        }

        Ok(RunConfig {
            problem,
            mode,
            levels,
            samples_per_level,
            burn_in: self.burn_in,
            replicas,
            tol,
            tol0,
            r1,
            r2,
            l0,
            l_max,
            master_seed: self.master_seed.unwrap_or(0),
            output_dir: self
                .output_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from(".")),
            emit_trajectories: self.emit_trajectories.unwrap_or(false),
        })
    }
}

/// Fully resolved run configuration; serialized into every output file.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub problem: String,
    pub mode: Mode,
    pub levels: usize,
    #[serde(rename = "samples-per-level")]
    pub samples_per_level: usize,
    #[serde(rename = "burn-in")]
    pub burn_in: Option<usize>,
    pub replicas: usize,
    pub tol: Real,
    pub tol0: Real,
    pub r1: Real,
    pub r2: Real,
    #[serde(rename = "L0")]
    pub l0: usize,
    #[serde(rename = "L_max")]
    pub l_max: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub emit_trajectories: bool,
}

impl RunConfig {
    /// Burn-in policy for chain runs.
    pub fn burnin_policy(&self) -> mlmh::sampler::BurninPolicy {
        match self.burn_in {
            Some(b) => mlmh::sampler::BurninPolicy::Fixed(b),
            None => mlmh::sampler::BurninPolicy::Default,
        }
    }

    /// Creates the output directory if needed and returns the path of a file
    /// inside it.
    pub fn output_path(&self, file: &str) -> Result<PathBuf, ConfigError> {
        fs::create_dir_all(&self.output_dir).map_err(|source| ConfigError::Read {
            path: self.output_dir.clone(),
            source,
        })?;
        Ok(self.output_dir.join(file))
    }
}
