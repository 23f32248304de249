//! Deterministic MLP: ReLU feature extractor plus linear classifier, with
//! exact backpropagation and momentum SGD.

mod checkpoint;
mod mlp;
mod train;

pub(crate) use checkpoint::{expect_magic, read_f64s, read_u32, write_f64s, write_u32};
pub use checkpoint::{read_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use mlp::{
    backward, backward_from_logits, classifier_logits, cross_entropy, forward,
    linearize_at_features, linearize_classifier, DenseLayer, ForwardTrace, Gradients,
    Linearization, MlpParams,
};
pub use train::{accuracy, argmax, mean_loss, mean_loss_gradient, train_local, Freeze, SgdConfig};
