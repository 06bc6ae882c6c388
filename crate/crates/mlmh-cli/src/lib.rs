//! Batch experiment runner for the `mlmh` library.
//!
//! The binary exposes one subcommand per study (`rates`, `continuation`,
//! `oracle-check`, `baseline-compare`, and `run`), each reading a flat JSON
//! configuration, running with deterministic seeds, and writing
//! machine-readable CSV/JSON results that embed the configuration echo,
//! master seed, and code version. This library half holds the configuration
//! handling, the command implementations, and the output writers so tests
//! can drive the commands directly.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{cmd_baseline_compare, cmd_continuation, cmd_oracle_check, cmd_rates, cmd_run};
pub use config::{Mode, Overrides, RawConfig, RunConfig};
