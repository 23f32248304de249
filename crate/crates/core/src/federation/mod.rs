//! Federated protocol: non-IID partitioning, per-round local training and
//! Laplace fitting, Gaussian aggregation, and per-client evaluation.

mod aggregate;
mod evaluate;
mod partition;
mod protocol;

pub use aggregate::{aggregate_deterministic, aggregate_gaussians};
pub use evaluate::{
    client_models, evaluate, fit_flows, ClientModel, ClientReport, ClientScores, EvalConfig,
    EvaluationReport, HeadMetrics, OodSet, OodTable,
};
pub use partition::{
    class_quota, main_classes, partition, shard_weights, ClientShard, PartitionConfig,
};
pub use protocol::{
    aggregate_uploads, broadcast, initialize, run_federation, run_round, AlgorithmVariant,
    BaseAlgorithm, ClientState, FederationOutcome, LaplaceSchedule, RoundConfig, RoundTrace,
    ServerState, Upload,
};
