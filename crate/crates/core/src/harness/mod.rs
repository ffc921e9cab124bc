//! Scenario files, seed replication, paired comparisons and reports.

pub mod compare;
pub mod config;
pub mod output;
pub mod presets;
pub mod run;
pub mod sweep;

pub use compare::{compare, Comparison, Direction};
pub use config::{parse_config, Scenario, StrategyKind};
pub use presets::{preset, presets, PRESET_NAMES};
pub use run::{run_paired, run_scenario, RunManifest};
