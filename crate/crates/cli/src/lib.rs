//! Experiment runner binding the laboratory modules: structured TOML
//! configuration, named recipes, deterministic seeding, CSV/JSON artifacts.

pub mod config;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{run, RunOutcome};
