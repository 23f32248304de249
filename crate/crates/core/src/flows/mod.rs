//! Radial normalizing flows over classifier parameters and reverse-KL
//! fine-tuning against a local unnormalized posterior.

mod finetune;
mod radial;
mod target;

pub use finetune::{fine_tune, fine_tune_from, FineTuneConfig, FineTuneOutcome};
pub use radial::{FlowPosterior, FlowStack, RadialLayer};
pub use target::{ClassifierTarget, LogDensity};
