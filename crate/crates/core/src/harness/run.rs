use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::{DatasetSpec, ExperimentConfig};
use super::report::{
    AblationReport, AblationRow, AsymptoticReport, DirectionProbe, GammaSensitivity, MetricsReport,
    SeedReport, TimingReport,
};
use crate::data::{write_idx, Dataset, DatasetManifest};
use crate::federation::{
    client_models, evaluate, fit_flows, initialize, partition, run_federation, run_round,
    AlgorithmVariant, ClientModel, ClientScores, ClientShard, EvaluationReport, FederationOutcome,
    OodSet, RoundTrace,
};
use crate::flows::{fine_tune, ClassifierTarget, FineTuneConfig, FlowStack};
use crate::laplace::{
    asymptotic_confidence_probe, fit_laplace, write_posterior, GaussianPosterior, PriorConfig,
};
use crate::metrics::{write_reliability_csv, write_scores_csv};
use crate::model::{accuracy, train_local, write_model, Freeze, MlpParams, SgdConfig};
use crate::numerics::{Matrix, RngStream};
use crate::{Error, Result};

const TAG_DATA: u64 = 10;
const TAG_PARTITION: u64 = 11;
const TAG_OOD: u64 = 12;
const TAG_FEDERATION: u64 = 13;
const TAG_FLOW: u64 = 14;
const TAG_EVAL: u64 = 15;
const TAG_PROBE: u64 = 16;

/// Everything one seed of `run` produces.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub shards: Vec<ClientShard>,
    pub outcome: FederationOutcome,
    pub models: Vec<ClientModel>,
    pub flows: Option<Vec<FlowStack>>,
    pub evaluation: EvaluationReport,
    pub scores: Vec<ClientScores>,
}

/// Client shards and OOD sets for `seed`.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<ClientShard>, Vec<OodSet>)> {
    let root = RngStream::new(seed, 0);
    let data = cfg.load_dataset(&mut root.derive(TAG_DATA))?;
    let shards = partition(&data, &cfg.partition, &mut root.derive(TAG_PARTITION))?;
    let ood = cfg.load_ood(data.input_dim(), &root.derive(TAG_OOD))?;
    Ok((shards, ood))
}

/// Runs the protocol and assembles the clients' final models. Flows are
/// fitted when the variant fine-tunes: once at the end, or after every round
/// with warm starts when `flow.every_round` is set.
pub fn federate(
    cfg: &ExperimentConfig,
    variant: AlgorithmVariant,
    seed: u64,
    shards: &[ClientShard],
) -> Result<(FederationOutcome, Vec<ClientModel>, Option<Vec<FlowStack>>)> {
    let root = RngStream::new(seed, 0).derive(TAG_FEDERATION);
    if !(variant.posterior_fine_tune && cfg.flow.every_round) {
        let outcome = run_federation(
            shards,
            &cfg.model.hidden,
            variant,
            &cfg.rounds,
            &cfg.sgd,
            &cfg.laplace,
            &root,
        )?;
        let models = client_models(&outcome, shards, variant, &cfg.laplace)?;
        let flows = if variant.posterior_fine_tune {
            Some(client_flows(cfg, &cfg.flow, seed, &models, shards)?)
        } else {
            None
        };
        return Ok((outcome, models, flows));
    }

    let first = shards
        .first()
        .ok_or_else(|| Error::InvalidArgument("no clients".into()))?;
    let (server, clients) = initialize(
        first.train.input_dim(),
        &cfg.model.hidden,
        first.train.class_count,
        shards.len(),
        &cfg.laplace,
        &root,
    )?;
    let mut outcome = FederationOutcome {
        server,
        clients,
        trace: Vec::with_capacity(cfg.rounds.rounds),
    };
    let flow_root = RngStream::new(seed, 0).derive(TAG_FLOW);
    let mut flows: Option<Vec<FlowStack>> = None;
    let mut models = client_models(&outcome, shards, variant, &cfg.laplace)?;
    for round in 0..cfg.rounds.rounds {
        let (s, c, t) = run_round(
            &outcome.server,
            &outcome.clients,
            shards,
            variant,
            &cfg.rounds,
            &cfg.sgd,
            &cfg.laplace,
            &root,
        )?;
        outcome.server = s;
        outcome.clients = c;
        outcome.trace.push(t);
        models = client_models(&outcome, shards, variant, &cfg.laplace)?;
        flows = Some(fit_flows(
            &models,
            shards,
            &cfg.flow,
            &cfg.laplace,
            flows.as_deref(),
            &flow_root.derive(round as u64),
        )?);
    }
    let flows = match flows {
        Some(f) => f,
        None => client_flows(cfg, &cfg.flow, seed, &models, shards)?,
    };
    Ok((outcome, models, Some(flows)))
}

/// Per-client flows of length `flow.flow_length`; length 0 gives empty stacks.
pub fn client_flows(
    cfg: &ExperimentConfig,
    flow: &FineTuneConfig,
    seed: u64,
    models: &[ClientModel],
    shards: &[ClientShard],
) -> Result<Vec<FlowStack>> {
    if flow.flow_length == 0 {
        return Ok(vec![FlowStack { layers: vec![] }; models.len()]);
    }
    let root = RngStream::new(seed, 0).derive(TAG_FLOW);
    fit_flows(models, shards, flow, &cfg.laplace, None, &root)
}

pub fn evaluate_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    models: &[ClientModel],
    flows: Option<&[FlowStack]>,
    shards: &[ClientShard],
    ood: &[OodSet],
) -> Result<(EvaluationReport, Vec<ClientScores>)> {
    let root = RngStream::new(seed, 0).derive(TAG_EVAL);
    evaluate(models, flows, shards, ood, &cfg.eval, &root)
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let (shards, ood) = prepare_data(cfg, seed)?;
    let (outcome, models, flows) = federate(cfg, cfg.variant, seed, &shards)?;
    let (evaluation, scores) = evaluate_seed(cfg, seed, &models, flows.as_deref(), &shards, &ood)?;
    Ok(SeedRun {
        seed,
        shards,
        outcome,
        models,
        flows,
        evaluation,
        scores,
    })
}

/// Runs every seed in order.
pub fn run_experiment(
    cfg: &ExperimentConfig,
) -> Result<(MetricsReport, Vec<SeedRun>, TimingReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let t = Instant::now();
        runs.push(run_seed(cfg, seed)?);
        per_seed.push((seed, t.elapsed().as_secs_f64()));
    }
    let hash = cfg.config_hash();
    let report = MetricsReport::new(
        hash.clone(),
        cfg.variant.name(),
        runs.iter()
            .map(|r| SeedReport {
                seed: r.seed,
                evaluation: r.evaluation.clone(),
            })
            .collect(),
    );
    let timing = TimingReport {
        config_hash: hash,
        total_seconds: start.elapsed().as_secs_f64(),
        per_seed_seconds: per_seed,
    };
    Ok((report, runs, timing))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn hash_comment(hash: &str) -> String {
    format!("config_hash={hash}")
}

/// CSV file whose first line is `# config_hash=...`.
fn csv_with_hash(path: &Path, hash: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = create(path)?;
    writeln!(w, "# {}", hash_comment(hash))?;
    Ok(csv::Writer::from_writer(w))
}

#[derive(Serialize)]
struct TraceLine<'a> {
    seed: u64,
    #[serde(flatten)]
    trace: &'a RoundTrace,
}

/// Writes `report.json`, `timing.json`, `trace.jsonl`, `tables/` and
/// `checkpoints/` under `out`.
pub fn write_run_artifacts(
    out: &Path,
    cfg: &ExperimentConfig,
    report: &MetricsReport,
    runs: &[SeedRun],
    timing: &TimingReport,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let hash = &report.config_hash;
    write_json(&out.join("report.json"), report)?;
    write_json(&out.join("timing.json"), timing)?;

    let mut trace = create(&out.join("trace.jsonl"))?;
    for r in runs {
        for t in &r.outcome.trace {
            serde_json::to_writer(
                &mut trace,
                &TraceLine {
                    seed: r.seed,
                    trace: t,
                },
            )?;
            trace.write_all(b"\n")?;
        }
    }
    trace.flush()?;

    let tables = out.join("tables");
    let mut metrics = csv_with_hash(&tables.join("metrics.csv"), hash)?;
    metrics.write_record(["seed", "client", "head", "accuracy", "nll", "ece"])?;
    let mut ood = csv_with_hash(&tables.join("ood.csv"), hash)?;
    ood.write_record([
        "seed", "client", "ood_set", "method", "auroc", "aupr", "fpr95",
    ])?;
    for r in runs {
        let s = r.seed.to_string();
        let ev = &r.evaluation;
        let clients = ev
            .clients
            .iter()
            .map(|c| (c.client_id.to_string(), &c.heads, &c.ood))
            .chain(std::iter::once((
                "weighted".to_string(),
                &ev.weighted_heads,
                &ev.weighted_ood,
            )));
        for (client, heads, table) in clients {
            for (head, h) in heads {
                metrics.write_record([
                    s.clone(),
                    client.clone(),
                    head.clone(),
                    h.accuracy.to_string(),
                    h.nll.to_string(),
                    h.ece.to_string(),
                ])?;
            }
            for (set, methods) in table {
                for (method, d) in methods {
                    ood.write_record([
                        s.clone(),
                        client.clone(),
                        set.clone(),
                        method.clone(),
                        d.auroc.to_string(),
                        d.aupr.to_string(),
                        d.fpr95.to_string(),
                    ])?;
                }
            }
        }
        for (head, diagram) in &ev.reliability {
            let mut w = create(&tables.join(format!("reliability_seed{}_{head}.csv", r.seed)))?;
            write_reliability_csv(&mut w, diagram, Some(&hash_comment(hash)))?;
            w.flush()?;
        }
        let names: Vec<String> = r
            .scores
            .iter()
            .flat_map(|c| {
                c.sets
                    .iter()
                    .map(move |(set, m, _)| format!("client{}/{set}/{}", c.client_id, m.name()))
            })
            .collect();
        let sets: Vec<(&str, &_)> = names
            .iter()
            .map(String::as_str)
            .zip(
                r.scores
                    .iter()
                    .flat_map(|c| c.sets.iter().map(|(_, _, s)| s)),
            )
            .collect();
        let mut w = create(&tables.join(format!("scores_seed{}.csv", r.seed)))?;
        write_scores_csv(&mut w, &sets, Some(&hash_comment(hash)))?;
        w.flush()?;

        let ckpt = out.join("checkpoints");
        fs::create_dir_all(&ckpt)?;
        for (i, m) in r.models.iter().enumerate() {
            let stem = format!("seed{}_client{}", r.seed, m.client_id);
            let mut w = create(&ckpt.join(format!("{stem}_model.bin")))?;
            write_model(&mut w, &m.params)?;
            w.flush()?;
            let flow = r.flows.as_ref().map(|f| &f[i]);
            let mut w = create(&ckpt.join(format!("{stem}_posterior.bin")))?;
            write_posterior(&mut w, &m.posterior, cfg.laplace.prior_precision, flow)?;
            w.flush()?;
        }
    }
    metrics.flush()?;
    ood.flush()?;
    Ok(())
}

/// Flow-length ablation: one federated run per seed, then a flow fit and an
/// evaluation for each configured length. Detection columns use the first OOD
/// set and the flow predictive.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let ood_set = cfg
        .ood
        .first()
        .ok_or_else(|| Error::Config("`ood`: ablation needs at least one OOD set".into()))?
        .name()
        .to_string();
    if cfg.ablation.flow_lengths.is_empty() {
        return Err(Error::Config("`ablation.flow_lengths`: empty".into()));
    }
    let variant = AlgorithmVariant {
        posterior_fine_tune: true,
        ..cfg.variant
    };
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let (shards, ood) = prepare_data(cfg, seed)?;
        let plain = AlgorithmVariant {
            posterior_fine_tune: false,
            ..variant
        };
        let (_, models, _) = federate(cfg, plain, seed, &shards)?;
        for &l in &cfg.ablation.flow_lengths {
            let ft = FineTuneConfig {
                flow_length: l,
                ..cfg.flow.clone()
            };
            let flows = client_flows(cfg, &ft, seed, &models, &shards)?;
            let (ev, _) = evaluate_seed(cfg, seed, &models, Some(&flows), &shards, &ood)?;
            let h = ev.primary();
            let d = ev
                .primary_detection(&ood_set)
                .expect("flow evaluation reports bayes_pf");
            rows.push(AblationRow {
                seed,
                flow_length: l,
                accuracy: h.accuracy,
                ece: h.ece,
                nll: h.nll,
                fpr95: d.fpr95,
                auroc: d.auroc,
                aupr: d.aupr,
            });
        }
    }
    Ok(AblationReport {
        config_hash: cfg.config_hash(),
        variant: variant.name(),
        ood_set,
        rows,
    })
}

/// Writes `ablation.json` and `tables/ablation.csv`.
pub fn write_ablation(out: &Path, report: &AblationReport) -> Result<()> {
    write_json(&out.join("ablation.json"), report)?;
    let mut w = csv_with_hash(
        &out.join("tables").join("ablation.csv"),
        &report.config_hash,
    )?;
    w.write_record([
        "seed",
        "flow_length",
        "accuracy",
        "ece",
        "nll",
        "fpr95",
        "auroc",
        "aupr",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.seed.to_string(),
            r.flow_length.to_string(),
            r.accuracy.to_string(),
            r.ece.to_string(),
            r.nll.to_string(),
            r.fpr95.to_string(),
            r.auroc.to_string(),
            r.aupr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains a binary model centrally on all data, fits Laplace and a flow, and
/// probes MAP, Laplace, flow and identity-flow predictives along random
/// directions. Uses the first seed.
pub fn run_probe(cfg: &ExperimentConfig) -> Result<AsymptoticReport> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let root = RngStream::new(seed, 0).derive(TAG_PROBE);
    let data = cfg.load_dataset(&mut RngStream::new(seed, 0).derive(TAG_DATA))?;
    if data.class_count != 2 {
        return Err(Error::Config(format!(
            "`dataset`: probe needs a binary dataset, got {} classes",
            data.class_count
        )));
    }
    let (params, post) = train_binary(cfg, &data, cfg.laplace.prior_precision, &root)?;
    let feats = params.feature_matrix(&data.inputs);
    let target = ClassifierTarget::new(feats, data.labels.clone(), 2, cfg.laplace.prior_precision)?;
    let flow = fine_tune(&post, &target, &cfg.flow, &mut root.derive(2))?.flow;
    let identity = FlowStack::init_from_base(&post, cfg.flow.flow_length, &mut root.derive(3));

    let mut dir_rng = root.derive(4);
    let directions = (0..cfg.probe.directions)
        .map(|i| {
            let d = dir_rng.unit_vector(data.input_dim());
            let stream = root.derive_path(&[5, i as u64]);
            let report = asymptotic_confidence_probe(
                &params,
                &post,
                Some(&flow),
                &d,
                &cfg.probe.probe,
                &stream,
            )?;
            let ident = asymptotic_confidence_probe(
                &params,
                &post,
                Some(&identity),
                &d,
                &cfg.probe.probe,
                &stream,
            )?;
            Ok(DirectionProbe {
                direction: i,
                report,
                identity_flow_confidence: ident.flow_confidence.expect("flow was given"),
            })
        })
        .collect::<Result<_>>()?;
    let gamma_sensitivity = cfg
        .probe
        .prior_precisions
        .iter()
        .map(|&gamma| {
            let (params, post) = train_binary(cfg, &data, gamma, &root)?;
            let mut dir_rng = root.derive(4);
            let mut row = GammaSensitivity {
                prior_precision: gamma,
                train_accuracy: accuracy(&params, &data),
                mean_map_confidence: 0.0,
                mean_laplace_confidence: 0.0,
                mean_cap: 0.0,
                max_excess: f64::NEG_INFINITY,
            };
            let n = cfg.probe.directions as f64;
            for i in 0..cfg.probe.directions {
                let d = dir_rng.unit_vector(data.input_dim());
                let stream = root.derive_path(&[5, i as u64]);
                let r = asymptotic_confidence_probe(
                    &params,
                    &post,
                    None,
                    &d,
                    &cfg.probe.probe,
                    &stream,
                )?;
                let last = r.deltas.len() - 1;
                row.mean_map_confidence += r.map_confidence[last] / n;
                row.mean_laplace_confidence += r.laplace_confidence[last] / n;
                row.mean_cap += r.cap / n;
                row.max_excess = row.max_excess.max(r.laplace_confidence[last] - r.cap);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(AsymptoticReport {
        config_hash: cfg.config_hash(),
        seed,
        train_accuracy: accuracy(&params, &data),
        directions,
        gamma_sensitivity,
    })
}

/// Centralized MAP training with the classifier decay coupled to `gamma`,
/// then a Laplace fit with the same prior.
fn train_binary(
    cfg: &ExperimentConfig,
    data: &Dataset,
    gamma: f64,
    root: &RngStream,
) -> Result<(MlpParams, GaussianPosterior)> {
    let init = MlpParams::init(data.input_dim(), &cfg.model.hidden, 2, &mut root.derive(0));
    let sgd = SgdConfig {
        local_epochs: cfg.probe.epochs,
        classifier_weight_decay: Some(gamma / data.len() as f64),
        ..cfg.sgd.clone()
    };
    let params = train_local(&init, data, &sgd, &mut root.derive(1), Freeze::None)?;
    let feats = params.feature_matrix(&data.inputs);
    let prior = PriorConfig {
        prior_precision: gamma,
    };
    let post = fit_laplace(&feats, &data.labels, &params.classifier_flat(), &prior)?;
    Ok((params, post))
}

/// Writes `probe.json` and `tables/probe.csv`.
pub fn write_probe(out: &Path, report: &AsymptoticReport) -> Result<()> {
    write_json(&out.join("probe.json"), report)?;
    let mut w = csv_with_hash(&out.join("tables").join("probe.csv"), &report.config_hash)?;
    w.write_record([
        "direction",
        "delta",
        "map",
        "laplace",
        "flow",
        "identity_flow",
        "cap",
        "flow_cap",
    ])?;
    for d in &report.directions {
        let r = &d.report;
        for (j, delta) in r.deltas.iter().enumerate() {
            w.write_record([
                d.direction.to_string(),
                delta.to_string(),
                r.map_confidence[j].to_string(),
                r.laplace_confidence[j].to_string(),
                r.flow_confidence
                    .as_ref()
                    .map_or(f64::NAN, |f| f[j])
                    .to_string(),
                d.identity_flow_confidence[j].to_string(),
                r.cap.to_string(),
                r.flow_cap.unwrap_or(f64::NAN).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rescales every column of `data` to `[0, 1]` on the 1/255 grid.
fn quantize(data: &Dataset) -> Result<Dataset> {
    let (n, d) = (data.len(), data.input_dim());
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in 0..n {
        for (j, &v) in data.input(r).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let inputs = Matrix::from_fn(n, d, |r, j| {
        let span = hi[j] - lo[j];
        let u = if span > 0.0 {
            (data.inputs[(r, j)] - lo[j]) / span
        } else {
            0.0
        };
        (u * 255.0).round() / 255.0
    });
    Dataset::new(inputs, data.labels.clone(), data.class_count)
}

/// Writes the configured synthetic dataset for the first seed as an IDX pair
/// with a manifest, plus a config that reads it back. Returns the config path.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    if !matches!(cfg.dataset, DatasetSpec::Blobs { .. }) {
        return Err(Error::Config(
            "`dataset`: gen-data needs a synthetic dataset".into(),
        ));
    }
    fs::create_dir_all(out)?;
    let data = cfg.load_dataset(&mut RngStream::new(cfg.seeds[0], 0).derive(TAG_DATA))?;
    let data = quantize(&data)?;
    let images = out.join("images.idx");
    let labels = out.join("labels.idx");
    write_idx(&data, &images, &labels)?;
    let mut manifest = DatasetManifest::record(&[&images, &labels])?;
    for e in &mut manifest.files {
        e.path = e.path.file_name().map(PathBuf::from).unwrap_or_default();
    }
    manifest.write(&out.join("manifest.json"))?;
    let mut idx_cfg = cfg.clone();
    idx_cfg.dataset = DatasetSpec::Idx {
        images: "images.idx".into(),
        labels: "labels.idx".into(),
        manifest: Some("manifest.json".into()),
    };
    idx_cfg.output_dir = None;
    let path = out.join("config.json");
    write_json(&path, &idx_cfg)?;
    Ok(path)
}
