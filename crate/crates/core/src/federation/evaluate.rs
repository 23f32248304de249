use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::partition::{shard_weights, ClientShard};
use super::protocol::{broadcast, AlgorithmVariant, FederationOutcome};
use crate::flows::{
    fine_tune, fine_tune_from, ClassifierTarget, FineTuneConfig, FlowPosterior, FlowStack,
};
use crate::laplace::{
    fit_laplace, mc_predict_batch, GaussianPosterior, PredictConfig, PriorConfig,
};
use crate::metrics::{
    bayes_score, detection_summary, ece, energy, entropy, maxlogit, mc_dropout_predict, msp, nll,
    odin, reliability_diagram, DetectionSummary, OdinConfig, PredictionBatch, ReliabilityDiagram,
    ScoreMethod, ScoreSet,
};
use crate::model::MlpParams;
use crate::numerics::{softmax, Matrix, RngStream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub predict: PredictConfig,
    pub odin: OdinConfig,
    pub dropout_rate: f64,
    pub dropout_samples: usize,
    pub ece_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            predict: PredictConfig::default(),
            odin: OdinConfig::default(),
            dropout_rate: 0.2,
            dropout_samples: 10,
            ece_bins: crate::metrics::DEFAULT_BINS,
        }
    }
}

/// A client's evaluation-time model: deterministic network (classifier at the
/// posterior mean) plus the classifier posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    pub client_id: usize,
    pub params: MlpParams,
    pub posterior: GaussianPosterior,
}

const TAG_FLOW: u64 = 3;
const TAG_EVAL: u64 = 4;

/// Assembles each client's final model. Shared classifiers use the server
/// posterior; personal classifiers get a Laplace fit under the final extractor.
pub fn client_models(
    outcome: &FederationOutcome,
    shards: &[ClientShard],
    variant: AlgorithmVariant,
    prior: &PriorConfig,
) -> Result<Vec<ClientModel>> {
    outcome
        .clients
        .par_iter()
        .zip(shards.par_iter())
        .map(|(client, shard)| {
            let params = broadcast(&outcome.server, client, variant);
            let posterior = if variant.shares_classifier() {
                outcome.server.classifier.clone()
            } else {
                let feats = params.feature_matrix(&shard.train.inputs);
                fit_laplace(
                    &feats,
                    &shard.train.labels,
                    &params.classifier_flat(),
                    prior,
                )?
            };
            Ok(ClientModel {
                client_id: client.client_id,
                params,
                posterior,
            })
        })
        .collect()
}

/// Posterior fine-tune of every client's classifier posterior against its
/// local training data. With `init`, client `i` continues from `init[i]`.
pub fn fit_flows(
    models: &[ClientModel],
    shards: &[ClientShard],
    cfg: &FineTuneConfig,
    prior: &PriorConfig,
    init: Option<&[FlowStack]>,
    root: &RngStream,
) -> Result<Vec<FlowStack>> {
    if init.is_some_and(|f| f.len() != models.len()) {
        return Err(Error::DimensionMismatch {
            expected: models.len(),
            actual: init.map_or(0, <[_]>::len),
        });
    }
    models
        .par_iter()
        .zip(shards.par_iter())
        .enumerate()
        .map(|(i, (m, shard))| {
            let target = ClassifierTarget::new(
                m.params.feature_matrix(&shard.train.inputs),
                shard.train.labels.clone(),
                shard.train.class_count,
                prior.prior_precision,
            )?;
            let mut rng = root.derive_path(&[TAG_FLOW, m.client_id as u64]);
            let out = match init {
                Some(flows) => {
                    fine_tune_from(&m.posterior, &target, cfg, flows[i].clone(), &mut rng)?
                }
                None => fine_tune(&m.posterior, &target, cfg, &mut rng)?,
            };
            Ok(out.flow)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
}

/// Detection metrics keyed by OOD set, then score method.
pub type OodTable = BTreeMap<String, BTreeMap<String, DetectionSummary>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    pub weight: f64,
    pub heads: BTreeMap<String, HeadMetrics>,
    pub ood: OodTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Head the variant is judged by: `flow` with fine-tuning, `map` otherwise.
    pub primary_head: String,
    /// Score the variant is judged by: `bayes_pf` with fine-tuning, `msp` otherwise.
    pub primary_score: String,
    pub clients: Vec<ClientReport>,
    pub weighted_heads: BTreeMap<String, HeadMetrics>,
    pub weighted_ood: OodTable,
    /// Pooled over all clients' test sets.
    pub reliability: BTreeMap<String, ReliabilityDiagram>,
}

/// A named set of OOD inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OodSet {
    pub name: String,
    pub inputs: Matrix,
}

/// Raw per-client OOD scores, for CSV dumps.
#[derive(Debug, Clone)]
pub struct ClientScores {
    pub client_id: usize,
    /// `(ood set, method, scores)`
    pub sets: Vec<(String, ScoreMethod, ScoreSet)>,
}

struct ClientEval {
    report: ClientReport,
    scores: ClientScores,
    batches: BTreeMap<String, PredictionBatch>,
}

fn head_metrics(batch: &PredictionBatch, bins: usize) -> HeadMetrics {
    HeadMetrics {
        accuracy: crate::metrics::accuracy(batch),
        nll: nll(batch),
        ece: ece(batch, bins),
    }
}

fn logit_matrix(params: &MlpParams, feats: &Matrix) -> Matrix {
    Matrix::from_rows(
        &(0..feats.rows())
            .map(|r| params.classifier.apply(feats.row(r)))
            .collect::<Vec<_>>(),
    )
}

fn per_row(m: &Matrix, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..m.rows()).map(|r| f(m.row(r))).collect()
}

/// Every score method on one input matrix. `mc` drives the Bayesian
/// predictives (shared between Laplace and flow), `mcd` the dropout passes.
fn method_scores(
    model: &ClientModel,
    pushed: Option<&FlowPosterior>,
    inputs: &Matrix,
    cfg: &EvalConfig,
    mc: &RngStream,
    mcd: &RngStream,
) -> Result<Vec<(ScoreMethod, Vec<f64>)>> {
    let params = &model.params;
    let feats = params.feature_matrix(inputs);
    let logits = logit_matrix(params, &feats);
    let m = cfg.predict.mc_samples;
    let mut out = vec![
        (ScoreMethod::Msp, per_row(&logits, msp)),
        (ScoreMethod::Energy, per_row(&logits, |l| energy(l, 1.0))),
        (
            ScoreMethod::Entropy,
            per_row(&logits, |l| entropy(&softmax(l))),
        ),
        (ScoreMethod::Maxlogit, per_row(&logits, maxlogit)),
    ];
    let odin_scores = (0..inputs.rows())
        .map(|r| odin(params, inputs.row(r), &cfg.odin))
        .collect::<Result<_>>()?;
    out.push((ScoreMethod::Odin, odin_scores));
    let mut rng = mcd.clone();
    let mcd_scores = (0..inputs.rows())
        .map(|r| {
            let p = mc_dropout_predict(
                params,
                inputs.row(r),
                cfg.dropout_rate,
                cfg.dropout_samples,
                &mut rng,
            )?;
            Ok(p.into_iter().fold(0.0, f64::max))
        })
        .collect::<Result<_>>()?;
    out.push((ScoreMethod::Mcd, mcd_scores));
    out.push((
        ScoreMethod::Bayes,
        bayes_score(&model.posterior, &feats, m, &mut mc.clone())?,
    ));
    if let Some(p) = pushed {
        out.push((
            ScoreMethod::BayesPf,
            bayes_score(p, &feats, m, &mut mc.clone())?,
        ));
    }
    Ok(out)
}

const STREAM_ID_MC: u64 = 1;
const STREAM_ID_MCD: u64 = 2;
const STREAM_OOD: u64 = 3;

fn evaluate_client(
    model: &ClientModel,
    flow: Option<&FlowStack>,
    shard: &ClientShard,
    ood_sets: &[OodSet],
    cfg: &EvalConfig,
    root: &RngStream,
) -> Result<ClientEval> {
    let params = &model.params;
    let test = &shard.test;
    let stream = root.derive_path(&[TAG_EVAL, model.client_id as u64]);
    let m = cfg.predict.mc_samples;
    let test_feats = params.feature_matrix(&test.inputs);
    let test_logits = logit_matrix(params, &test_feats);
    let map_probs = Matrix::from_rows(
        &(0..test_logits.rows())
            .map(|r| softmax(test_logits.row(r)))
            .collect::<Vec<_>>(),
    );

    let mut batches = BTreeMap::new();
    batches.insert(
        "map".to_string(),
        PredictionBatch::new(map_probs, test.labels.clone(), Some(test_logits))?,
    );
    // Laplace and flow heads share draws; an identity flow reproduces Laplace.
    let mc = stream.derive(STREAM_ID_MC);
    let laplace = mc_predict_batch(&model.posterior, &test_feats, m, &mut mc.clone())?;
    batches.insert(
        "laplace".to_string(),
        PredictionBatch::new(laplace, test.labels.clone(), None)?,
    );
    let pushed = flow.map(|f| FlowPosterior {
        base: &model.posterior,
        flow: f,
    });
    if let Some(p) = &pushed {
        let probs = mc_predict_batch(p, &test_feats, m, &mut mc.clone())?;
        batches.insert(
            "flow".to_string(),
            PredictionBatch::new(probs, test.labels.clone(), None)?,
        );
    }

    let id_scores = method_scores(
        model,
        pushed.as_ref(),
        &test.inputs,
        cfg,
        &mc,
        &stream.derive(STREAM_ID_MCD),
    )?;
    let mut sets = Vec::new();
    let mut ood = OodTable::new();
    for (j, set) in ood_sets.iter().enumerate() {
        let base = stream.derive_path(&[STREAM_OOD, j as u64]);
        let ood_scores = method_scores(
            model,
            pushed.as_ref(),
            &set.inputs,
            cfg,
            &base.derive(STREAM_ID_MC),
            &base.derive(STREAM_ID_MCD),
        )?;
        let table = ood.entry(set.name.clone()).or_default();
        for ((method, id), (_, od)) in id_scores.iter().zip(ood_scores) {
            let s = ScoreSet::new(id.clone(), od, method.orientation())?;
            table.insert(method.name().to_string(), detection_summary(&s));
            sets.push((set.name.clone(), *method, s));
        }
    }

    let heads = batches
        .iter()
        .map(|(name, b)| (name.clone(), head_metrics(b, cfg.ece_bins)))
        .collect();
    Ok(ClientEval {
        report: ClientReport {
            client_id: model.client_id,
            weight: shard.weight,
            heads,
            ood,
        },
        scores: ClientScores {
            client_id: model.client_id,
            sets,
        },
        batches,
    })
}

/// Evaluates every client on its own test set and on each OOD set.
pub fn evaluate(
    models: &[ClientModel],
    flows: Option<&[FlowStack]>,
    shards: &[ClientShard],
    ood_sets: &[OodSet],
    cfg: &EvalConfig,
    root: &RngStream,
) -> Result<(EvaluationReport, Vec<ClientScores>)> {
    if models.len() != shards.len() || flows.is_some_and(|f| f.len() != models.len()) {
        return Err(Error::DimensionMismatch {
            expected: shards.len(),
            actual: models.len(),
        });
    }
    if models.is_empty() {
        return Err(Error::InvalidArgument("no clients to evaluate".into()));
    }
    let evals: Vec<ClientEval> = models
        .par_iter()
        .zip(shards.par_iter())
        .enumerate()
        .map(|(i, (m, s))| evaluate_client(m, flows.map(|f| &f[i]), s, ood_sets, cfg, root))
        .collect::<Result<_>>()?;
    let weights = shard_weights(shards);

    let mut weighted_heads: BTreeMap<String, HeadMetrics> = BTreeMap::new();
    let mut weighted_ood = OodTable::new();
    for (e, &w) in evals.iter().zip(&weights) {
        for (name, h) in &e.report.heads {
            let acc = weighted_heads.entry(name.clone()).or_insert(HeadMetrics {
                accuracy: 0.0,
                nll: 0.0,
                ece: 0.0,
            });
            acc.accuracy += w * h.accuracy;
            acc.nll += w * h.nll;
            acc.ece += w * h.ece;
        }
        for (set, table) in &e.report.ood {
            let out = weighted_ood.entry(set.clone()).or_default();
            for (name, d) in table {
                let acc = out.entry(name.clone()).or_insert(DetectionSummary {
                    auroc: 0.0,
                    aupr: 0.0,
                    fpr95: 0.0,
                });
                acc.auroc += w * d.auroc;
                acc.aupr += w * d.aupr;
                acc.fpr95 += w * d.fpr95;
            }
        }
    }

    let mut reliability = BTreeMap::new();
    for head in evals[0].batches.keys() {
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for e in &evals {
            let b = &e.batches[head];
            for r in 0..b.len() {
                probs.push(b.probabilities().row(r).to_vec());
            }
            labels.extend_from_slice(b.labels());
        }
        let pooled = PredictionBatch::new(Matrix::from_rows(&probs), labels, None)?;
        reliability.insert(head.clone(), reliability_diagram(&pooled, cfg.ece_bins));
    }

    let pf = flows.is_some();
    let (clients, scores) = evals.into_iter().map(|e| (e.report, e.scores)).unzip();
    Ok((
        EvaluationReport {
            primary_head: if pf { "flow" } else { "map" }.to_string(),
            primary_score: if pf { "bayes_pf" } else { "msp" }.to_string(),
            clients,
            weighted_heads,
            weighted_ood,
            reliability,
        },
        scores,
    ))
}

impl EvaluationReport {
    pub fn primary(&self) -> &HeadMetrics {
        &self.weighted_heads[&self.primary_head]
    }

    /// Primary-score detection metrics on `ood_set`.
    pub fn primary_detection(&self, ood_set: &str) -> Option<&DetectionSummary> {
        self.weighted_ood.get(ood_set)?.get(&self.primary_score)
    }
}
