//! Command-line driver: JSON scenario configs, pipeline runs and CSV/JSON reports.

pub mod config;
pub mod run;

pub use config::{load_config, Case, ConfigError, ModeChoice, ScenarioConfig};
pub use run::{run_from_file, run_scenario, run_with_case, CheckRecord, Command, RunError, RunReport};
