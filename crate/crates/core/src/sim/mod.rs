//! Data-generating processes and replicated experiments.

mod experiment;
pub mod rng;
mod scenario;

pub use experiment::{
    run_experiment, run_experiment_with, run_study, study_scenarios, Analysis, CellSummary, ExperimentOptions,
    MetricSummary, SimSummary, StudyOptions, FAILURE_FLAG_RATE,
};
pub use scenario::{generate_panel, ConditionalLaw, CovariateDesign, Scenario, MOD6_ROWS};
