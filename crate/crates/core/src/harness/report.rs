use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::federation::{EvaluationReport, HeadMetrics, OodTable};
use crate::laplace::ProbeReport;
use crate::metrics::DetectionSummary;
use crate::{Error, Result};

/// Evaluation of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub evaluation: EvaluationReport,
}

/// Machine-readable result of `run`. Contains no timings, so identical
/// inputs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub variant: String,
    pub seeds: Vec<SeedReport>,
    /// Seed means of the client-weighted averages.
    pub mean_heads: BTreeMap<String, HeadMetrics>,
    pub mean_ood: OodTable,
}

impl MetricsReport {
    pub fn new(config_hash: String, variant: String, mut seeds: Vec<SeedReport>) -> Self {
        seeds.sort_by_key(|s| s.seed);
        let n = seeds.len() as f64;
        let mut mean_heads: BTreeMap<String, HeadMetrics> = BTreeMap::new();
        let mut mean_ood = OodTable::new();
        for s in &seeds {
            for (name, h) in &s.evaluation.weighted_heads {
                let acc = mean_heads.entry(name.clone()).or_insert(HeadMetrics {
                    accuracy: 0.0,
                    nll: 0.0,
                    ece: 0.0,
                });
                acc.accuracy += h.accuracy / n;
                acc.nll += h.nll / n;
                acc.ece += h.ece / n;
            }
            for (set, table) in &s.evaluation.weighted_ood {
                let out = mean_ood.entry(set.clone()).or_default();
                for (method, d) in table {
                    let acc = out.entry(method.clone()).or_insert(DetectionSummary {
                        auroc: 0.0,
                        aupr: 0.0,
                        fpr95: 0.0,
                    });
                    acc.auroc += d.auroc / n;
                    acc.aupr += d.aupr / n;
                    acc.fpr95 += d.fpr95 / n;
                }
            }
        }
        Self {
            config_hash,
            variant,
            seeds,
            mean_heads,
            mean_ood,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Combines per-seed reports of one configuration. Reports with different
/// config hashes or variants, or overlapping seeds, are refused.
pub fn merge_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no reports to merge".into()))?;
    let mut seeds = Vec::new();
    for r in reports {
        if r.config_hash != first.config_hash {
            return Err(Error::ConfigHashMismatch {
                first: first.config_hash.clone(),
                other: r.config_hash.clone(),
            });
        }
        if r.variant != first.variant {
            return Err(Error::InvalidArgument(format!(
                "variant {} differs from {}",
                r.variant, first.variant
            )));
        }
        seeds.extend(r.seeds.iter().cloned());
    }
    let mut ids: Vec<u64> = seeds.iter().map(|s| s.seed).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("duplicate seed in merge".into()));
    }
    Ok(MetricsReport::new(
        first.config_hash.clone(),
        first.variant.clone(),
        seeds,
    ))
}

/// Wall-clock timings, kept apart from the deterministic report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub config_hash: String,
    pub total_seconds: f64,
    pub per_seed_seconds: Vec<(u64, f64)>,
}

/// One row of the flow-length ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub flow_length: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub variant: String,
    /// OOD set the detection columns refer to.
    pub ood_set: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean of `f` over seeds for flow length `l`.
    pub fn mean(&self, l: usize, f: impl Fn(&AblationRow) -> f64) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.flow_length == l)
            .map(f)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Probe results along one random direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionProbe {
    pub direction: usize,
    pub report: ProbeReport,
    /// Predictive under an identity flow on the Laplace stream.
    pub identity_flow_confidence: Vec<f64>,
}

/// Far-field summary at the largest `δ` for one prior precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSensitivity {
    pub prior_precision: f64,
    pub train_accuracy: f64,
    pub mean_map_confidence: f64,
    pub mean_laplace_confidence: f64,
    pub mean_cap: f64,
    /// Largest `laplace_confidence − cap` over directions.
    pub max_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub config_hash: String,
    pub seed: u64,
    pub train_accuracy: f64,
    pub directions: Vec<DirectionProbe>,
    pub gamma_sensitivity: Vec<GammaSensitivity>,
}
