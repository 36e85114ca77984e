//! Datasets, the reference classification pipeline, scenario runs and the
//! annotation API contract.

pub mod aidr;
pub mod api;
pub mod dataset;
pub mod scenario;

pub use aidr::{aidr_topology, register_aidr, AidrEnv, AidrShape, Board, CrowdSetup, SharedBoard};
pub use dataset::{generate_dataset, load_dataset, read_dataset, save_dataset, write_dataset, DatasetError, DatasetParams, DatasetRecord};
pub use scenario::{
    execute, outcome_of, prepare, run_scenario, run_sweep, write_outputs, write_sweep, Manifest, Prepared, RunMode,
    ScenarioConfig, ScenarioError, ScenarioOutcome, SweepOutcome,
};
