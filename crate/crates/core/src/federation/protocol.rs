use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::aggregate::{aggregate_deterministic, aggregate_gaussians};
use super::partition::{shard_weights, ClientShard};
use crate::laplace::{fit_laplace, write_posterior, GaussianPosterior, PriorConfig};
use crate::model::{train_local, DenseLayer, Freeze, MlpParams, SgdConfig};
use crate::numerics::RngStream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseAlgorithm {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedper")]
    FedPer,
    #[serde(rename = "lg_fedavg")]
    LgFedAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmVariant {
    pub base: BaseAlgorithm,
    pub posterior_fine_tune: bool,
}

impl AlgorithmVariant {
    pub fn shares_extractor(&self) -> bool {
        matches!(self.base, BaseAlgorithm::FedAvg | BaseAlgorithm::FedPer)
    }

    pub fn shares_classifier(&self) -> bool {
        matches!(self.base, BaseAlgorithm::FedAvg | BaseAlgorithm::LgFedAvg)
    }

    pub fn name(&self) -> String {
        let base = match self.base {
            BaseAlgorithm::FedAvg => "fedavg",
            BaseAlgorithm::FedPer => "fedper",
            BaseAlgorithm::LgFedAvg => "lg_fedavg",
        };
        if self.posterior_fine_tune {
            format!("{base}_pf")
        } else {
            base.to_string()
        }
    }
}

/// When clients fit a Laplace posterior for upload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplaceSchedule {
    #[default]
    EveryRound,
    /// Intermediate rounds upload only the classifier mean.
    FinalRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    pub rounds: usize,
    pub laplace_schedule: LaplaceSchedule,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            laplace_schedule: LaplaceSchedule::EveryRound,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub extractor: Vec<DenseLayer>,
    pub classifier: GaussianPosterior,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    /// Latest local model, personal blocks included.
    pub params: MlpParams,
    /// Latest local Laplace fit, if one was made.
    pub posterior: Option<GaussianPosterior>,
}

/// Everything a client sends to the server in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client_id: usize,
    pub extractor: Option<Vec<DenseLayer>>,
    pub classifier_posterior: Option<GaussianPosterior>,
    pub classifier_mean: Option<Vec<f64>>,
    pub bytes: usize,
    /// SHA-256 of the serialized payload.
    pub checksum: String,
}

impl Upload {
    fn seal(mut self, prior_precision: f64) -> Result<Self> {
        let payload = self.payload(prior_precision)?;
        self.bytes = payload.len();
        self.checksum = hex::encode(Sha256::digest(&payload));
        Ok(self)
    }

    /// Wire bytes: extractor layers as `f64` LE, then the posterior block or
    /// the bare classifier mean.
    pub fn payload(&self, prior_precision: f64) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        if let Some(layers) = &self.extractor {
            for l in layers {
                for v in l.weight.data().iter().chain(&l.bias) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        if let Some(post) = &self.classifier_posterior {
            write_posterior(&mut out, post, prior_precision, None)?;
        } else if let Some(mean) = &self.classifier_mean {
            for v in mean {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }
}

/// One line of the protocol trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub uploaded_bytes: Vec<usize>,
    pub upload_checksums: Vec<String>,
    pub posterior_trace: f64,
}

const TAG_INIT: u64 = 1;
const TAG_TRAIN: u64 = 2;

/// Shared initial model and the server prior `N(classifier, γ⁻¹ I)`.
pub fn initialize(
    input_dim: usize,
    hidden: &[usize],
    class_count: usize,
    client_count: usize,
    prior: &PriorConfig,
    root: &RngStream,
) -> Result<(ServerState, Vec<ClientState>)> {
    prior.validate()?;
    let params = MlpParams::init(input_dim, hidden, class_count, &mut root.derive(TAG_INIT));
    let classifier =
        GaussianPosterior::isotropic(params.classifier_flat(), 1.0 / prior.prior_precision)?;
    let server = ServerState {
        extractor: params.extractor.clone(),
        classifier,
        round: 0,
    };
    let clients = (0..client_count)
        .map(|client_id| ClientState {
            client_id,
            params: params.clone(),
            posterior: None,
        })
        .collect();
    Ok((server, clients))
}

/// Model a client starts a round from: its own state with the shared blocks
/// replaced by the server's.
pub fn broadcast(
    server: &ServerState,
    client: &ClientState,
    variant: AlgorithmVariant,
) -> MlpParams {
    let mut params = client.params.clone();
    if variant.shares_extractor() {
        params.extractor = server.extractor.clone();
    }
    if variant.shares_classifier() {
        params
            .set_classifier_flat(server.classifier.mean())
            .expect("server and client classifier shapes agree");
    }
    params
}

#[allow(clippy::too_many_arguments)]
fn client_round(
    server: &ServerState,
    client: &ClientState,
    shard: &ClientShard,
    variant: AlgorithmVariant,
    fit_posterior: bool,
    sgd: &SgdConfig,
    prior: &PriorConfig,
    root: &RngStream,
) -> Result<(ClientState, Upload)> {
    let start = broadcast(server, client, variant);
    // MAP training minimizes mean CE + λ/2‖w‖², i.e. the Laplace objective
    // scaled by 1/|D_i| when λ = γ/|D_i|.
    let sgd = SgdConfig {
        classifier_weight_decay: Some(prior.prior_precision / shard.train.len() as f64),
        ..sgd.clone()
    };
    let mut rng = root.derive_path(&[TAG_TRAIN, server.round as u64, client.client_id as u64]);
    let params = train_local(&start, &shard.train, &sgd, &mut rng, Freeze::None)?;
    let posterior = if fit_posterior {
        let feats = params.feature_matrix(&shard.train.inputs);
        Some(fit_laplace(
            &feats,
            &shard.train.labels,
            &params.classifier_flat(),
            prior,
        )?)
    } else {
        None
    };
    let shared_classifier = variant.shares_classifier();
    let upload = Upload {
        client_id: client.client_id,
        extractor: variant.shares_extractor().then(|| params.extractor.clone()),
        classifier_posterior: if shared_classifier {
            posterior.clone()
        } else {
            None
        },
        classifier_mean: (shared_classifier && posterior.is_none())
            .then(|| params.classifier_flat()),
        bytes: 0,
        checksum: String::new(),
    }
    .seal(prior.prior_precision)?;
    let state = ClientState {
        client_id: client.client_id,
        params,
        posterior,
    };
    Ok((state, upload))
}

/// Aggregates uploads in ascending client order.
pub fn aggregate_uploads(
    server: &ServerState,
    uploads: &[Upload],
    weights: &[f64],
) -> Result<ServerState> {
    let mut order: Vec<usize> = (0..uploads.len()).collect();
    order.sort_by_key(|&i| uploads[i].client_id);
    let mut next = server.clone();
    next.round += 1;

    let ext: Vec<(Vec<f64>, f64)> = order
        .iter()
        .filter_map(|&i| {
            uploads[i].extractor.as_ref().map(|layers| {
                let flat: Vec<f64> = layers.iter().flat_map(|l| l.flatten()).collect();
                (flat, weights[i])
            })
        })
        .collect();
    if !ext.is_empty() {
        let (vecs, w) = renormalize(ext);
        let refs: Vec<&[f64]> = vecs.iter().map(Vec::as_slice).collect();
        let flat = aggregate_deterministic(&refs, &w)?;
        let mut offset = 0;
        for layer in &mut next.extractor {
            let n = layer.param_count();
            *layer = DenseLayer::unflatten(
                &flat[offset..offset + n],
                layer.input_dim(),
                layer.output_dim(),
            )?;
            offset += n;
        }
    }

    let posts: Vec<(&GaussianPosterior, f64)> = order
        .iter()
        .filter_map(|&i| {
            uploads[i]
                .classifier_posterior
                .as_ref()
                .map(|p| (p, weights[i]))
        })
        .collect();
    let means: Vec<(Vec<f64>, f64)> = order
        .iter()
        .filter_map(|&i| uploads[i].classifier_mean.clone().map(|m| (m, weights[i])))
        .collect();
    if !posts.is_empty() && !means.is_empty() {
        return Err(Error::InvalidArgument(
            "mixed posterior and point classifier uploads".into(),
        ));
    }
    if !posts.is_empty() {
        let total: f64 = posts.iter().map(|(_, w)| w).sum();
        let w: Vec<f64> = posts.iter().map(|(_, w)| w / total).collect();
        let refs: Vec<&GaussianPosterior> = posts.iter().map(|(p, _)| *p).collect();
        next.classifier = aggregate_gaussians(&refs, &w)?;
    } else if !means.is_empty() {
        let (vecs, w) = renormalize(means);
        let refs: Vec<&[f64]> = vecs.iter().map(Vec::as_slice).collect();
        next.classifier = server
            .classifier
            .with_mean(aggregate_deterministic(&refs, &w)?)?;
    }
    Ok(next)
}

fn renormalize(items: Vec<(Vec<f64>, f64)>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    items.into_iter().map(|(v, w)| (v, w / total)).unzip()
}

/// One communication round with full participation. Clients run
/// concurrently; each uses its own derived stream, and the reduction is in
/// client order, so the result does not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    server: &ServerState,
    clients: &[ClientState],
    shards: &[ClientShard],
    variant: AlgorithmVariant,
    round_cfg: &RoundConfig,
    sgd: &SgdConfig,
    prior: &PriorConfig,
    root: &RngStream,
) -> Result<(ServerState, Vec<ClientState>, RoundTrace)> {
    if clients.len() != shards.len() {
        return Err(Error::DimensionMismatch {
            expected: shards.len(),
            actual: clients.len(),
        });
    }
    let last = server.round + 1 >= round_cfg.rounds;
    let fit = variant.shares_classifier()
        && (round_cfg.laplace_schedule == LaplaceSchedule::EveryRound || last);
    let results: Vec<(ClientState, Upload)> = clients
        .par_iter()
        .zip(shards.par_iter())
        .map(|(c, s)| client_round(server, c, s, variant, fit, sgd, prior, root))
        .collect::<Result<_>>()?;
    let (states, uploads): (Vec<ClientState>, Vec<Upload>) = results.into_iter().unzip();
    let weights = shard_weights(shards);
    let next = aggregate_uploads(server, &uploads, &weights)?;
    let trace = RoundTrace {
        round: next.round,
        uploaded_bytes: uploads.iter().map(|u| u.bytes).collect(),
        upload_checksums: uploads.iter().map(|u| u.checksum.clone()).collect(),
        posterior_trace: next.classifier.covariance().trace(),
    };
    Ok((next, states, trace))
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub trace: Vec<RoundTrace>,
}

/// Initializes and runs `round_cfg.rounds` rounds.
#[allow(clippy::too_many_arguments)]
pub fn run_federation(
    shards: &[ClientShard],
    hidden: &[usize],
    variant: AlgorithmVariant,
    round_cfg: &RoundConfig,
    sgd: &SgdConfig,
    prior: &PriorConfig,
    root: &RngStream,
) -> Result<FederationOutcome> {
    let first = shards
        .first()
        .ok_or_else(|| Error::InvalidArgument("no clients".into()))?;
    let class_count = first.train.class_count;
    let (mut server, mut clients) = initialize(
        first.train.input_dim(),
        hidden,
        class_count,
        shards.len(),
        prior,
        root,
    )?;
    let mut trace = Vec::with_capacity(round_cfg.rounds);
    for _ in 0..round_cfg.rounds {
        let (s, c, t) = run_round(
            &server, &clients, shards, variant, round_cfg, sgd, prior, root,
        )?;
        server = s;
        clients = c;
        trace.push(t);
    }
    Ok(FederationOutcome {
        server,
        clients,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::federation::partition::{partition, PartitionConfig};

    fn shards(clients: usize) -> Vec<ClientShard> {
        let data = gen_blobs(4, 80, 4, 0.3, &mut RngStream::new(5, 0)).unwrap();
        let cfg = PartitionConfig {
            client_count: clients,
            uniform_fraction: 0.2,
            train_per_client: 40,
            test_per_client: 10,
        };
        partition(&data, &cfg, &mut RngStream::new(6, 0)).unwrap()
    }

    fn sgd() -> SgdConfig {
        SgdConfig {
            learning_rate: 0.05,
            batch_size: 16,
            local_epochs: 1,
            ..SgdConfig::default()
        }
    }

    fn variant(base: BaseAlgorithm) -> AlgorithmVariant {
        AlgorithmVariant {
            base,
            posterior_fine_tune: false,
        }
    }

    fn run(base: BaseAlgorithm, shards: &[ClientShard], rounds: usize) -> FederationOutcome {
        let cfg = RoundConfig {
            rounds,
            ..RoundConfig::default()
        };
        run_federation(
            shards,
            &[6],
            variant(base),
            &cfg,
            &sgd(),
            &PriorConfig::default(),
            &RngStream::new(9, 0),
        )
        .unwrap()
    }

    #[test]
    fn single_client_fedavg_equals_local_result() {
        let out = run(BaseAlgorithm::FedAvg, &shards(1), 2);
        let client = &out.clients[0];
        assert_eq!(out.server.extractor, client.params.extractor);
        assert_eq!(&out.server.classifier, client.posterior.as_ref().unwrap());
    }

    #[test]
    fn identical_uploads_aggregate_to_either() {
        let sh = shards(1);
        let prior = PriorConfig::default();
        let root = RngStream::new(3, 0);
        let (server, clients) = initialize(4, &[6], 4, 1, &prior, &root).unwrap();
        let v = variant(BaseAlgorithm::FedAvg);
        let (_, up) =
            client_round(&server, &clients[0], &sh[0], v, true, &sgd(), &prior, &root).unwrap();
        let next = aggregate_uploads(&server, &[up.clone(), up.clone()], &[0.5, 0.5]).unwrap();
        assert_eq!(&next.extractor, up.extractor.as_ref().unwrap());
        let post = up.classifier_posterior.as_ref().unwrap();
        assert_eq!(next.classifier.mean(), post.mean());
        assert_eq!(next.classifier.covariance(), post.covariance());
    }

    #[test]
    fn fedper_server_classifier_is_untouched() {
        let sh = shards(2);
        let out = run(BaseAlgorithm::FedPer, &sh, 3);
        let (init, _) = initialize(
            4,
            &[6],
            4,
            2,
            &PriorConfig::default(),
            &RngStream::new(9, 0),
        )
        .unwrap();
        assert_eq!(out.server.classifier, init.classifier);
        assert_ne!(out.server.extractor, init.extractor);
        assert_eq!(out.server.round, 3);
    }

    #[test]
    fn lg_keeps_extractor_personal() {
        let sh = shards(2);
        let out = run(BaseAlgorithm::LgFedAvg, &sh, 2);
        let (init, _) = initialize(
            4,
            &[6],
            4,
            2,
            &PriorConfig::default(),
            &RngStream::new(9, 0),
        )
        .unwrap();
        assert_eq!(out.server.extractor, init.extractor);
        assert_ne!(
            out.clients[0].params.extractor,
            out.clients[1].params.extractor
        );
    }

    #[test]
    fn uploads_carry_only_shared_blocks() {
        let sh = shards(2);
        let prior = PriorConfig::default();
        let root = RngStream::new(3, 0);
        let (server, clients) = initialize(4, &[6], 4, 2, &prior, &root).unwrap();
        let ext_bytes = 8 * server
            .extractor
            .iter()
            .map(|l| l.param_count())
            .sum::<usize>();

        let v = variant(BaseAlgorithm::FedPer);
        let (_, up) = client_round(
            &server,
            &clients[0],
            &sh[0],
            v,
            false,
            &sgd(),
            &prior,
            &root,
        )
        .unwrap();
        assert!(up.classifier_posterior.is_none() && up.classifier_mean.is_none());
        assert_eq!(up.bytes, ext_bytes);

        let v = variant(BaseAlgorithm::LgFedAvg);
        let (state, up) =
            client_round(&server, &clients[0], &sh[0], v, true, &sgd(), &prior, &root).unwrap();
        assert!(up.extractor.is_none());
        let mut expected = Vec::new();
        write_posterior(&mut expected, state.posterior.as_ref().unwrap(), 1.0, None).unwrap();
        assert_eq!(up.bytes, expected.len());
        assert_eq!(up.checksum, hex::encode(Sha256::digest(&expected)));
    }

    #[test]
    fn schedule_does_not_change_the_result() {
        let sh = shards(3);
        let go = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run(BaseAlgorithm::FedAvg, &sh, 2))
        };
        let a = go(1);
        let b = go(4);
        assert_eq!(a.server, b.server);
        assert_eq!(a.clients, b.clients);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn duplicated_shard_doubles_weight() {
        let sh = shards(2);
        let prior = PriorConfig::default();
        let root = RngStream::new(3, 0);
        let (server, clients) = initialize(4, &[6], 4, 2, &prior, &root).unwrap();
        let v = variant(BaseAlgorithm::FedAvg);
        let up = |i: usize| {
            client_round(&server, &clients[i], &sh[i], v, true, &sgd(), &prior, &root)
                .unwrap()
                .1
        };
        let (a, b) = (up(0), up(1));
        let dup = vec![sh[0].clone(), sh[0].clone(), sh[1].clone()];
        let w3 = shard_weights(&dup);
        assert_eq!(w3, vec![1.0 / 3.0; 3]);
        let two =
            aggregate_uploads(&server, &[a.clone(), b.clone()], &[2.0 / 3.0, 1.0 / 3.0]).unwrap();
        let three = aggregate_uploads(&server, &[a.clone(), a, b], &w3).unwrap();
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(two.classifier.mean(), three.classifier.mean()));
        assert!(close(
            two.classifier.covariance().data(),
            three.classifier.covariance().data()
        ));
        let flat = |s: &ServerState| -> Vec<f64> {
            s.extractor.iter().flat_map(|l| l.flatten()).collect()
        };
        assert!(close(&flat(&two), &flat(&three)));
    }

    #[test]
    fn final_round_schedule_uploads_means_until_last() {
        let sh = shards(2);
        let cfg = RoundConfig {
            rounds: 3,
            laplace_schedule: LaplaceSchedule::FinalRound,
        };
        let out = run_federation(
            &sh,
            &[6],
            variant(BaseAlgorithm::FedAvg),
            &cfg,
            &sgd(),
            &PriorConfig::default(),
            &RngStream::new(9, 0),
        )
        .unwrap();
        assert!(out.trace[0].uploaded_bytes[0] < out.trace[2].uploaded_bytes[0]);
        assert!(out.clients.iter().all(|c| c.posterior.is_some()));
    }
}
