//! Calibration and OOD-detection metrics.

mod calibration;
mod detection;
mod scores;

use std::io::Write;

pub use calibration::{
    accuracy, bin_index, ece, nll, reliability_diagram, PredictionBatch, ReliabilityBin,
    ReliabilityDiagram, DEFAULT_BINS,
};
pub use detection::{aupr, auroc, fpr_at_95_tpr, Orientation, ScoreSet};
pub use scores::{
    bayes_score, energy, entropy, maxlogit, mc_dropout_predict, msp, odin, odin_perturb,
    OdinConfig, ScoreMethod,
};

use crate::Result;

/// AUROC, AUPR and FPR95 of one score set.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectionSummary {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
}

pub fn detection_summary(scores: &ScoreSet) -> DetectionSummary {
    DetectionSummary {
        auroc: auroc(scores),
        aupr: aupr(scores),
        fpr95: fpr_at_95_tpr(scores),
    }
}

fn write_comment(w: &mut impl Write, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    Ok(())
}

/// Columns `bin_lo,bin_hi,conf,acc,count`, after optional `# ` comment lines.
pub fn write_reliability_csv(
    w: &mut impl Write,
    diagram: &ReliabilityDiagram,
    comment: Option<&str>,
) -> Result<()> {
    write_comment(w, comment)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["bin_lo", "bin_hi", "conf", "acc", "count"])?;
    for b in &diagram.bins {
        csv.write_record([
            b.lo.to_string(),
            b.hi.to_string(),
            b.confidence.to_string(),
            b.accuracy.to_string(),
            b.count.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// Columns `method,score,is_ood`; scores are written in OOD orientation.
pub fn write_scores_csv(
    w: &mut impl Write,
    sets: &[(&str, &ScoreSet)],
    comment: Option<&str>,
) -> Result<()> {
    write_comment(w, comment)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["method", "score", "is_ood"])?;
    for (name, set) in sets {
        for (scores, ood) in [(set.id_scores(), 0), (set.ood_scores(), 1)] {
            for s in scores {
                csv.write_record([name.to_string(), s.to_string(), ood.to_string()])?;
            }
        }
    }
    csv.flush()?;
    Ok(())
}
