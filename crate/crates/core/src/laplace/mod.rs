//! Last-layer Laplace posteriors, Bayesian predictives and the far-field
//! confidence probe.

mod checkpoint;
mod fit;
mod posterior;
mod probe;

pub use checkpoint::{
    read_flow, read_posterior, write_flow, write_posterior, PosteriorCheckpoint, FLOW_MAGIC,
    POSTERIOR_MAGIC,
};
pub use fit::{fit_laplace, ggn_precision, probit, probit_predict_binary};
pub use posterior::{
    mc_predict, mc_predict_batch, ClassifierSampler, GaussianPosterior, PointMass, PredictConfig,
    PredictMode, PriorConfig, MAX_POSTERIOR_DIM,
};
pub use probe::{asymptotic_confidence_probe, ProbeConfig, ProbeReport};
