use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which direction of a raw score indicates out-of-distribution inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsOod,
    HigherIsId,
}

/// ID and OOD scores, stored so that higher always means more OOD.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    id: Vec<f64>,
    ood: Vec<f64>,
}

impl ScoreSet {
    pub fn new(id: Vec<f64>, ood: Vec<f64>, orientation: Orientation) -> Result<Self> {
        if id.is_empty() || ood.is_empty() {
            return Err(Error::InvalidArgument(
                "score sets need at least one ID and one OOD score".into(),
            ));
        }
        if id.iter().chain(&ood).any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        let flip = |v: Vec<f64>| match orientation {
            Orientation::HigherIsOod => v,
            Orientation::HigherIsId => v.into_iter().map(|s| -s).collect(),
        };
        Ok(Self {
            id: flip(id),
            ood: flip(ood),
        })
    }

    pub fn id_scores(&self) -> &[f64] {
        &self.id
    }

    pub fn ood_scores(&self) -> &[f64] {
        &self.ood
    }

    /// `(score, is_ood)` sorted by descending score.
    fn ranked(&self) -> Vec<(f64, bool)> {
        let mut all: Vec<(f64, bool)> = self
            .id
            .iter()
            .map(|&s| (s, false))
            .chain(self.ood.iter().map(|&s| (s, true)))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0));
        all
    }

    /// Cumulative `(tp, fp)` after each distinct threshold, highest first.
    fn operating_points(&self) -> Vec<(usize, usize)> {
        let ranked = self.ranked();
        let mut out = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        let mut i = 0;
        while i < ranked.len() {
            let s = ranked[i].0;
            while i < ranked.len() && ranked[i].0 == s {
                if ranked[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            out.push((tp, fp));
        }
        out
    }
}

/// `P(s_ood > s_id) + ½ P(s_ood = s_id)`, from exact pair counts.
pub fn auroc(scores: &ScoreSet) -> f64 {
    let n_id = scores.id.len() as u64;
    let n_ood = scores.ood.len() as u64;
    // Within a tie group, each OOD score beats every ID score strictly below
    // it and ties with the ID scores in its own group.
    let mut ranked = scores.ranked();
    ranked.reverse();
    let mut id_below = 0u64;
    let (mut greater, mut ties) = (0u64, 0u64);
    let mut i = 0;
    while i < ranked.len() {
        let s = ranked[i].0;
        let (mut g_id, mut g_ood) = (0u64, 0u64);
        while i < ranked.len() && ranked[i].0 == s {
            if ranked[i].1 {
                g_ood += 1;
            } else {
                g_id += 1;
            }
            i += 1;
        }
        greater += g_ood * id_below;
        ties += g_ood * g_id;
        id_below += g_id;
    }
    (2 * greater + ties) as f64 / (2 * n_id * n_ood) as f64
}

/// Area under the precision-recall curve with OOD as the positive class,
/// integrated as a step function over descending thresholds.
pub fn aupr(scores: &ScoreSet) -> f64 {
    let n_ood = scores.ood.len() as f64;
    let mut area = 0.0;
    let mut prev_tp = 0;
    for (tp, fp) in scores.operating_points() {
        if tp > prev_tp {
            area += (tp - prev_tp) as f64 / n_ood * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    area
}

/// Smallest false-positive rate over thresholds whose TPR is at least 0.95.
pub fn fpr_at_95_tpr(scores: &ScoreSet) -> f64 {
    let n_ood = scores.ood.len() as f64;
    let n_id = scores.id.len() as f64;
    scores
        .operating_points()
        .into_iter()
        .find(|&(tp, _)| tp as f64 / n_ood >= 0.95)
        .map(|(_, fp)| fp as f64 / n_id)
        .unwrap_or(1.0)
}
