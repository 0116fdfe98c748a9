//! Grouping evaluation: Jaccard matching of predicted against ground-truth
//! groups, TP/FP/FN accounting, and the two averaging schemes.
//!
//! Matching is per ground-truth group: each gt group is paired with the
//! predicted group of highest Jaccard similarity (ties break to the lowest
//! predicted index), so several gt groups may share one predicted group.
//! Within a pair, TP counts parts in both, FP parts only in the prediction,
//! FN parts only in the gt group. Predicted groups matched to nothing, and
//! any residual parts a grouper failed to assign, count fully as false
//! positives: emitting junk must never raise precision.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// One gt group's match: the chosen predicted group (None when there are no
/// predictions at all) and the pair's confusion counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairMatch {
    pub gt_index: usize,
    pub pred_index: Option<usize>,
    pub jaccard: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

/// Full matching outcome for one set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchReport {
    pub pairs: Vec<PairMatch>,
    /// False-positive mass from predicted groups no gt group selected.
    pub unmatched_pred_fp: usize,
    /// False-positive mass from residual (unassigned) parts.
    pub residual_fp: usize,
}

/// Accumulated confusion counts for one or more sets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
    }

    /// Precision, recall, F1 with zero denominators defined as 0.
    pub fn prf(&self) -> (f64, f64, f64) {
        let tp = self.true_pos as f64;
        let p_den = self.true_pos + self.false_pos;
        let r_den = self.true_pos + self.false_neg;
        let p = if p_den == 0 { 0.0 } else { tp / p_den as f64 };
        let r = if r_den == 0 { 0.0 } else { tp / r_den as f64 };
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f1)
    }
}

impl MatchReport {
    pub fn counts(&self) -> Counts {
        let mut c = Counts::default();
        for pair in &self.pairs {
            c.true_pos += pair.true_pos;
            c.false_pos += pair.false_pos;
            c.false_neg += pair.false_neg;
        }
        c.false_pos += self.unmatched_pred_fp + self.residual_fp;
        c
    }
}

/// `|P ∩ G| / |P ∪ G|`. Errors when both sets are empty (the ratio is
/// undefined), returns 0 when exactly one is empty.
pub fn jaccard(p: &BTreeSet<u32>, g: &BTreeSet<u32>) -> Result<f64> {
    if p.is_empty() && g.is_empty() {
        return Err(Error::domain(
            "jaccard",
            "similarity of two empty sets is undefined".to_string(),
        ));
    }
    let inter = p.intersection(g).count();
    let union = p.len() + g.len() - inter;
    Ok(inter as f64 / union as f64)
}

fn to_set(group: &[u32], what: &str, index: usize) -> Result<BTreeSet<u32>> {
    let set: BTreeSet<u32> = group.iter().copied().collect();
    if set.len() != group.len() {
        return Err(Error::Dataset(format!(
            "{what} group {index} lists a part_id more than once"
        )));
    }
    Ok(set)
}

/// Match every gt group to its highest-Jaccard predicted group and account
/// the confusion counts pair by pair. Empty prediction lists are a defined
/// outcome (everything is a false negative), an empty gt list is an error.
pub fn match_groups(pred: &[Vec<u32>], gt: &[Vec<u32>]) -> Result<MatchReport> {
    if gt.is_empty() {
        return Err(Error::Dataset("gt group list is empty".to_string()));
    }
    let pred_sets = pred
        .iter()
        .enumerate()
        .map(|(i, g)| to_set(g, "predicted", i))
        .collect::<Result<Vec<_>>>()?;
    let gt_sets = gt
        .iter()
        .enumerate()
        .map(|(i, g)| to_set(g, "gt", i))
        .collect::<Result<Vec<_>>>()?;
    if let Some(i) = gt_sets.iter().position(|g| g.is_empty()) {
        return Err(Error::Dataset(format!("gt group {i} is empty")));
    }

    let mut pairs = Vec::with_capacity(gt_sets.len());
    let mut pred_used = vec![false; pred_sets.len()];
    for (gi, g) in gt_sets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (pi, p) in pred_sets.iter().enumerate() {
            let j = if p.is_empty() { 0.0 } else { jaccard(p, g)? };
            let better = match best {
                None => true,
                Some((_, bj)) => j > bj,
            };
            if better {
                best = Some((pi, j));
            }
        }
        match best {
            Some((pi, j)) => {
                pred_used[pi] = true;
                let p = &pred_sets[pi];
                let inter = p.intersection(g).count();
                pairs.push(PairMatch {
                    gt_index: gi,
                    pred_index: Some(pi),
                    jaccard: j,
                    true_pos: inter,
                    false_pos: p.len() - inter,
                    false_neg: g.len() - inter,
                });
            }
            None => pairs.push(PairMatch {
                gt_index: gi,
                pred_index: None,
                jaccard: 0.0,
                true_pos: 0,
                false_pos: 0,
                false_neg: g.len(),
            }),
        }
    }

    let unmatched_pred_fp = pred_sets
        .iter()
        .zip(&pred_used)
        .filter(|(_, used)| !**used)
        .map(|(p, _)| p.len())
        .sum();
    Ok(MatchReport {
        pairs,
        unmatched_pred_fp,
        residual_fp: 0,
    })
}

/// Confusion counts for one set's prediction, residual parts included as
/// false positives.
pub fn set_counts(pred: &[Vec<u32>], residual: &[u32], gt: &[Vec<u32>]) -> Result<Counts> {
    let mut report = match_groups(pred, gt)?;
    report.residual_fp = residual.len();
    Ok(report.counts())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingMode {
    /// Per-set precision/recall/F1, then arithmetic mean over sets.
    SingleSetAvg,
    /// One precision/recall/F1 from globally accumulated counts.
    Overall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub set_id: String,
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: AveragingMode,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_set: Vec<SetMetrics>,
}

/// Aggregate per-set counts under the requested averaging mode.
pub fn metrics(sets: &[(String, Counts)], mode: AveragingMode) -> Result<MetricsReport> {
    if sets.is_empty() {
        return Err(Error::Dataset(
            "metrics over an empty set list".to_string(),
        ));
    }
    let per_set: Vec<SetMetrics> = sets
        .iter()
        .map(|(id, c)| {
            let (precision, recall, f1) = c.prf();
            SetMetrics {
                set_id: id.clone(),
                counts: *c,
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let (precision, recall, f1) = match mode {
        AveragingMode::SingleSetAvg => {
            let n = per_set.len() as f64;
            (
                per_set.iter().map(|s| s.precision).sum::<f64>() / n,
                per_set.iter().map(|s| s.recall).sum::<f64>() / n,
                per_set.iter().map(|s| s.f1).sum::<f64>() / n,
            )
        }
        AveragingMode::Overall => {
            let mut total = Counts::default();
            for (_, c) in sets {
                total.add(*c);
            }
            total.prf()
        }
    };
    Ok(MetricsReport {
        mode,
        precision,
        recall,
        f1,
        per_set,
    })
}

/// One CSV row per set: `set_id,tp,fp,fn,precision,recall,f1`.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("set_id,tp,fp,fn,precision,recall,f1\n");
    for s in &report.per_set {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            s.set_id,
            s.counts.true_pos,
            s.counts.false_pos,
            s.counts.false_neg,
            s.precision,
            s.recall,
            s.f1
        ));
    }
    out
}

/// Exhaustive reference matcher: same contract as [`match_groups`], written
/// as a direct transcription of the matching rule with explicit set
/// arithmetic. Test oracle only; quadratic and allocation-happy.
pub fn match_groups_brute(pred: &[Vec<u32>], gt: &[Vec<u32>]) -> Result<MatchReport> {
    if gt.is_empty() {
        return Err(Error::Dataset("gt group list is empty".to_string()));
    }
    let mut pairs = Vec::new();
    let mut used: Vec<usize> = Vec::new();
    for (gi, g_raw) in gt.iter().enumerate() {
        let g: BTreeSet<u32> = g_raw.iter().copied().collect();
        if g.len() != g_raw.len() || g.is_empty() {
            return Err(Error::Dataset(format!("gt group {gi} invalid")));
        }
        let mut best_j = f64::NEG_INFINITY;
        let mut best_pi = None;
        for (pi, p_raw) in pred.iter().enumerate() {
            let p: BTreeSet<u32> = p_raw.iter().copied().collect();
            if p.len() != p_raw.len() {
                return Err(Error::Dataset(format!("pred group {pi} invalid")));
            }
            let inter: BTreeSet<u32> = p.intersection(&g).copied().collect();
            let union: BTreeSet<u32> = p.union(&g).copied().collect();
            let j = if union.is_empty() {
                0.0
            } else {
                inter.len() as f64 / union.len() as f64
            };
            if j > best_j {
                best_j = j;
                best_pi = Some(pi);
            }
        }
        match best_pi {
            Some(pi) => {
                used.push(pi);
                let p: BTreeSet<u32> = pred[pi].iter().copied().collect();
                let tp = p.iter().filter(|x| g.contains(x)).count();
                let fp = p.iter().filter(|x| !g.contains(x)).count();
                let fn_ = g.iter().filter(|x| !p.contains(x)).count();
                pairs.push(PairMatch {
                    gt_index: gi,
                    pred_index: Some(pi),
                    jaccard: best_j,
                    true_pos: tp,
                    false_pos: fp,
                    false_neg: fn_,
                });
            }
            None => pairs.push(PairMatch {
                gt_index: gi,
                pred_index: None,
                jaccard: 0.0,
                true_pos: 0,
                false_pos: 0,
                false_neg: g.len(),
            }),
        }
    }
    let unmatched_pred_fp = pred
        .iter()
        .enumerate()
        .filter(|(pi, _)| !used.contains(pi))
        .map(|(_, p)| p.len())
        .sum();
    Ok(MatchReport {
        pairs,
        unmatched_pred_fp,
        residual_fp: 0,
    })
}
