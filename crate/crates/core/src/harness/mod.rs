//! Experiment configuration, orchestration and result files.

mod config;
mod report;
mod run;

pub use config::{
    AblationConfig, DatasetSpec, ExperimentConfig, ModelConfig, OodSpec, ProbeSettings,
};
pub use report::{
    merge_reports, AblationReport, AblationRow, AsymptoticReport, DirectionProbe, GammaSensitivity,
    MetricsReport, SeedReport, TimingReport,
};
pub use run::{
    client_flows, evaluate_seed, federate, gen_data, prepare_data, run_ablation, run_experiment,
    run_probe, run_seed, write_ablation, write_probe, write_run_artifacts, SeedRun,
};
