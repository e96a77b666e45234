//! Experiment harness: INI configs, scenario runs, checkpoints and sweeps.

pub mod checkpoint;
pub mod config;
pub mod scenario;
pub mod stages;
pub mod sweep;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{config_hash, emit_config, load_config, parse_config};
pub use scenario::{run_scenario, run_scenario_in, ForgetMode, RunRecord, ScenarioSpec};
pub use sweep::sweep_lambda;
