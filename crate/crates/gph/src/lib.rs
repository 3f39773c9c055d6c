//! Experiment runner for the `gph-core` hierarchy simulator: flat TOML configs,
//! binary snapshots, CSV/JSON reports and the invariant suite behind the CLI.

pub mod config;
pub mod output;
pub mod run;
pub mod snapshot;

pub use config::{parse_config, parse_config_with, ConfigError, ExperimentConfig, Loaded, SolverChoice};
pub use run::{run_experiment, Command, Invariant, RunOutcome};
pub use snapshot::{snapshot_read, snapshot_write, Snapshot, SnapshotError};
