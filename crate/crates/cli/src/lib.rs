//! Experiment harness for DSelect-k and baseline mixture-of-experts gates:
//! flat-text run configuration, a deterministic training runner, and the
//! `train` / `sweep` / `recover` / `group-synth` / `metrics` commands.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod runner;

pub use config::{ExperimentConfig, ExperimentKind, GateChoice};
pub use error::HarnessError;
pub use experiments::{cmd_group_synth, cmd_metrics, cmd_recover, cmd_sweep, cmd_train, RunResult};
