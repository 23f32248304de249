use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    gen_blobs, gen_noise, load_idx, load_idx_images, Dataset, DatasetManifest, NoiseConfig,
};
use crate::federation::{
    AlgorithmVariant, BaseAlgorithm, EvalConfig, OodSet, PartitionConfig, RoundConfig,
};
use crate::flows::FineTuneConfig;
use crate::laplace::{PriorConfig, ProbeConfig};
use crate::model::SgdConfig;
use crate::numerics::RngStream;
use crate::{Error, Result};

/// In-distribution data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        class_count: usize,
        per_class: usize,
        input_dim: usize,
        spread: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Checked before loading when present.
        #[serde(default)]
        manifest: Option<PathBuf>,
    },
}

/// Out-of-distribution evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OodSpec {
    Noise {
        name: String,
        delta: f64,
        count: usize,
    },
    Idx {
        name: String,
        images: PathBuf,
    },
}

impl OodSpec {
    pub fn name(&self) -> &str {
        match self {
            OodSpec::Noise { name, .. } | OodSpec::Idx { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub flow_lengths: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            flow_lengths: vec![0, 1, 3, 5, 10, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    pub directions: usize,
    /// Centralized training epochs for the probed model.
    pub epochs: usize,
    pub probe: ProbeConfig,
    /// Prior precisions for the sensitivity table.
    pub prior_precisions: Vec<f64>,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            directions: 20,
            epochs: 100,
            probe: ProbeConfig::default(),
            prior_precisions: vec![0.1, 1.0, 10.0],
        }
    }
}

/// One experiment, as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub variant: AlgorithmVariant,
    #[serde(default)]
    pub rounds: RoundConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub laplace: PriorConfig,
    #[serde(default)]
    pub flow: FineTuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ood: Vec<OodSpec>,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub probe: ProbeSettings,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Directory relative data paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn noise_set(name: &str, delta: f64, count: usize) -> OodSpec {
    OodSpec::Noise {
        name: name.into(),
        delta,
        count,
    }
}

fn config_err(key: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("`{key}`: {e}"))
}

impl ExperimentConfig {
    /// 10 clients with 300/100 examples on ten Gaussian blobs, 20 rounds.
    pub fn desk() -> Self {
        Self {
            dataset: DatasetSpec::Blobs {
                class_count: 10,
                per_class: 500,
                input_dim: 16,
                spread: 0.6,
            },
            partition: PartitionConfig {
                client_count: 10,
                uniform_fraction: 0.2,
                train_per_client: 300,
                test_per_client: 100,
            },
            model: ModelConfig { hidden: vec![16] },
            variant: AlgorithmVariant {
                base: BaseAlgorithm::FedAvg,
                posterior_fine_tune: true,
            },
            rounds: RoundConfig {
                rounds: 20,
                ..RoundConfig::default()
            },
            sgd: SgdConfig {
                learning_rate: 0.05,
                batch_size: 32,
                local_epochs: 5,
                ..SgdConfig::default()
            },
            laplace: PriorConfig::default(),
            flow: FineTuneConfig::default(),
            eval: EvalConfig::default(),
            ood: vec![noise_set("noise", 2000.0, 500)],
            ablation: AblationConfig::default(),
            probe: ProbeSettings::default(),
            seeds: vec![0, 1, 2],
            output_dir: None,
            base_dir: None,
        }
    }

    /// Binary blobs for the far-field probe.
    pub fn probe() -> Self {
        Self {
            dataset: DatasetSpec::Blobs {
                class_count: 2,
                per_class: 200,
                input_dim: 2,
                spread: 0.5,
            },
            seeds: vec![0],
            ..Self::desk()
        }
    }

    /// 20 clients with 1500/500 examples of IDX MNIST, 80 rounds.
    pub fn full() -> Self {
        Self {
            dataset: DatasetSpec::Idx {
                images: "data/train-images-idx3-ubyte".into(),
                labels: "data/train-labels-idx1-ubyte".into(),
                manifest: None,
            },
            partition: PartitionConfig::default(),
            model: ModelConfig {
                hidden: vec![200, 200],
            },
            rounds: RoundConfig {
                rounds: 80,
                ..RoundConfig::default()
            },
            sgd: SgdConfig::default(),
            seeds: vec![0, 1, 2],
            ..Self::desk()
        }
    }

    /// Parses and validates `path`; relative data paths resolve against its
    /// directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::Blobs {
                class_count,
                input_dim,
                spread,
                ..
            } => {
                if *class_count < 2 {
                    return Err(config_err("dataset.class_count", "must be >= 2"));
                }
                if *input_dim == 0 {
                    return Err(config_err("dataset.input_dim", "must be >= 1"));
                }
                if !(*spread >= 0.0) {
                    return Err(config_err("dataset.spread", "must be >= 0"));
                }
            }
            DatasetSpec::Idx { .. } => {}
        }
        self.partition
            .validate()
            .map_err(|e| config_err("partition", e))?;
        if self.model.hidden.contains(&0) {
            return Err(config_err("model.hidden", "layer widths must be >= 1"));
        }
        self.sgd.validate().map_err(|e| config_err("sgd", e))?;
        self.laplace
            .validate()
            .map_err(|e| config_err("laplace", e))?;
        if self.variant.posterior_fine_tune || !self.ablation.flow_lengths.is_empty() {
            self.flow.validate().map_err(|e| config_err("flow", e))?;
        }
        if self.eval.predict.mc_samples == 0 {
            return Err(config_err("eval.predict.mc_samples", "must be >= 1"));
        }
        if self.eval.ece_bins == 0 {
            return Err(config_err("eval.ece_bins", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.eval.dropout_rate) {
            return Err(config_err("eval.dropout_rate", "must be in [0, 1)"));
        }
        let mut names = std::collections::BTreeSet::new();
        for o in &self.ood {
            if !names.insert(o.name()) {
                return Err(config_err("ood.name", format!("duplicate `{}`", o.name())));
            }
            if let OodSpec::Noise { delta, count, .. } = o {
                if !(*delta >= 0.0) {
                    return Err(config_err("ood.delta", "must be >= 0"));
                }
                if *count == 0 {
                    return Err(config_err("ood.count", "must be >= 1"));
                }
            }
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if self.probe.directions == 0 {
            return Err(config_err("probe.directions", "must be >= 1"));
        }
        if self.probe.prior_precisions.iter().any(|&g| !(g > 0.0)) {
            return Err(config_err("probe.prior_precisions", "must be > 0"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted) JSON of everything that affects
    /// results. Seeds and the output directory are excluded so that per-seed
    /// artifacts of one configuration can be merged.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
            map.remove("seeds");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// In-distribution data for `seed`. Synthetic data depends on the seed;
    /// file data does not.
    pub fn load_dataset(&self, rng: &mut RngStream) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Blobs {
                class_count,
                per_class,
                input_dim,
                spread,
            } => gen_blobs(*class_count, *per_class, *input_dim, *spread, rng),
            DatasetSpec::Idx {
                images,
                labels,
                manifest,
            } => {
                if let Some(m) = manifest {
                    let path = self.resolve(m);
                    let base = path.parent().unwrap_or(Path::new("."));
                    DatasetManifest::read(&path)?.verify(base)?;
                }
                load_idx(self.resolve(images), self.resolve(labels))
            }
        }
    }

    /// OOD sets for inputs of width `input_dim`.
    pub fn load_ood(&self, input_dim: usize, rng: &RngStream) -> Result<Vec<OodSet>> {
        self.ood
            .iter()
            .enumerate()
            .map(|(j, o)| {
                let inputs = match o {
                    OodSpec::Noise { delta, count, .. } => {
                        let cfg = NoiseConfig {
                            delta: *delta,
                            count: *count,
                            input_dim,
                        };
                        gen_noise(&cfg, &mut rng.derive(j as u64))?
                    }
                    OodSpec::Idx { images, .. } => load_idx_images(self.resolve(images))?,
                };
                if inputs.cols() != input_dim {
                    return Err(Error::DimensionMismatch {
                        expected: input_dim,
                        actual: inputs.cols(),
                    });
                }
                Ok(OodSet {
                    name: o.name().to_string(),
                    inputs,
                })
            })
            .collect()
    }
}
