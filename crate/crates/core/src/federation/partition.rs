use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::numerics::RngStream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub client_count: usize,
    /// Fraction `p` of each shard spread uniformly over all classes.
    pub uniform_fraction: f64,
    pub train_per_client: usize,
    pub test_per_client: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            client_count: 20,
            uniform_fraction: 0.2,
            train_per_client: 1500,
            test_per_client: 500,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.client_count == 0 {
            return Err(Error::InvalidArgument("client_count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.uniform_fraction) {
            return Err(Error::InvalidArgument(
                "uniform_fraction must be in [0, 1]".into(),
            ));
        }
        if self.train_per_client == 0 {
            return Err(Error::InvalidArgument(
                "train_per_client must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// `|D_i| / |D|` over training sets.
    pub weight: f64,
    pub main_classes: [usize; 2],
}

/// Main classes of `client`: consecutive pairs assigned round-robin.
pub fn main_classes(client: usize, class_count: usize) -> [usize; 2] {
    [(2 * client) % class_count, (2 * client + 1) % class_count]
}

/// Per-class example counts for one split of size `n`.
///
/// `round(p·n)` examples are spread over all classes (the remainder goes to
/// classes starting at `client mod C`), and the rest is split between the two
/// main classes, the first taking the odd one.
pub fn class_quota(n: usize, p: f64, class_count: usize, client: usize) -> Vec<usize> {
    let uniform = ((p * n as f64).round() as usize).min(n);
    let mut quota = vec![uniform / class_count; class_count];
    for j in 0..uniform % class_count {
        quota[(client + j) % class_count] += 1;
    }
    let main = n - uniform;
    let [a, b] = main_classes(client, class_count);
    quota[a] += main.div_ceil(2);
    quota[b] += main / 2;
    quota
}

/// Splits `dataset` into disjoint train/test shards with the two-main-class
/// non-IID scheme. Test shards use the same class proportions as training.
pub fn partition(
    dataset: &Dataset,
    cfg: &PartitionConfig,
    rng: &mut RngStream,
) -> Result<Vec<ClientShard>> {
    cfg.validate()?;
    let k = dataset.class_count;
    if k < 2 {
        return Err(Error::InsufficientData("need at least two classes".into()));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in dataset.labels.iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        rng.shuffle(pool);
    }

    let quotas: Vec<(Vec<usize>, Vec<usize>)> = (0..cfg.client_count)
        .map(|c| {
            (
                class_quota(cfg.train_per_client, cfg.uniform_fraction, k, c),
                class_quota(cfg.test_per_client, cfg.uniform_fraction, k, c),
            )
        })
        .collect();
    for class in 0..k {
        let need: usize = quotas.iter().map(|(tr, te)| tr[class] + te[class]).sum();
        if need > pools[class].len() {
            return Err(Error::InsufficientData(format!(
                "class {class} needs {need} examples, has {}",
                pools[class].len()
            )));
        }
    }

    let mut cursor = vec![0usize; k];
    let mut take = |class: usize, n: usize| {
        let start = cursor[class];
        cursor[class] += n;
        pools[class][start..start + n].to_vec()
    };
    let total_train = (cfg.train_per_client * cfg.client_count) as f64;
    let mut shards = Vec::with_capacity(cfg.client_count);
    for (c, (tr, te)) in quotas.iter().enumerate() {
        let mut train_idx = Vec::with_capacity(cfg.train_per_client);
        let mut test_idx = Vec::with_capacity(cfg.test_per_client);
        for class in 0..k {
            train_idx.extend(take(class, tr[class]));
            test_idx.extend(take(class, te[class]));
        }
        shards.push(ClientShard {
            client_id: c,
            train: dataset.subset(&train_idx),
            test: dataset.subset(&test_idx),
            weight: cfg.train_per_client as f64 / total_train,
            main_classes: main_classes(c, k),
        });
    }
    Ok(shards)
}

/// `|D_i| / Σ_j |D_j|`
pub fn shard_weights(shards: &[ClientShard]) -> Vec<f64> {
    let total: usize = shards.iter().map(|s| s.train.len()).sum();
    shards
        .iter()
        .map(|s| s.train.len() as f64 / total as f64)
        .collect()
}
