//! Pixel-level binary evaluation of anomaly maps: ROC and precision-recall
//! curves, their areas, and the false positive rate at 95% recall.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap, IGNORE_LABEL};

/// Flattened scores with binary labels (`true` = anomaly).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl EvalSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if scores.is_empty() {
            return Err(Error::EmptyEvalSet);
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("non-finite score".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let p = self.positives();
        let n = self.len() - p;
        if p == 0 || n == 0 {
            return Err(Error::SingleClass);
        }
        Ok((p, n))
    }
}

/// Collect scored pixels, dropping ignore-labeled pixels and pixels outside the
/// region of interest (ROI value 0). Label 1 in the annotation marks anomalies.
pub fn build_evalset(maps: &[&Grid], annotations: &[&LabelMap], roi: Option<&[&LabelMap]>) -> Result<EvalSet> {
    if maps.len() != annotations.len() || roi.is_some_and(|r| r.len() != maps.len()) {
        return Err(Error::ShapeMismatch("score maps, annotations and ROI masks differ in count".into()));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (idx, (map, ann)) in maps.iter().zip(annotations).enumerate() {
        if map.channels != 1 || map.pixels() != ann.pixels() {
            return Err(Error::ShapeMismatch(format!("score map {idx} does not match its annotation")));
        }
        let region = roi.map(|r| r[idx]);
        if region.is_some_and(|r| r.pixels() != ann.pixels()) {
            return Err(Error::ShapeMismatch(format!("ROI {idx} does not match its annotation")));
        }
        for (i, &a) in ann.data.iter().enumerate() {
            if a == IGNORE_LABEL || region.is_some_and(|r| r.data[i] == 0) {
                continue;
            }
            scores.push(map.data[i]);
            labels.push(a == 1);
        }
    }
    let set = EvalSet::new(scores, labels)?;
    set.require_both()?;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveResult {
    /// Distinct score thresholds in descending order; point `k + 1` of each
    /// curve corresponds to `thresholds[k]`, point 0 is the empty prediction.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub auroc: f64,
    pub auprc: f64,
    pub fpr95: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub auprc: f64,
    pub auroc: f64,
    pub fpr95: f64,
}

impl CurveResult {
    pub fn summary(&self) -> Summary {
        Summary { auprc: self.auprc, auroc: self.auroc, fpr95: self.fpr95 }
    }
}

/// Sweep every distinct score as a threshold (positive iff score ≥ τ).
/// AuROC uses the trapezoid rule, AuPRC the step sum `Σ (R_k − R_{k−1})·P_k`.
pub fn roc_pr_curves(set: &EvalSet) -> Result<CurveResult> {
    let (pos, neg) = set.require_both()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));

    let mut thresholds = Vec::new();
    let (mut fpr, mut tpr) = (vec![0.0], vec![0.0]);
    let (mut recall, mut precision) = (vec![0.0], vec![1.0]);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let tau = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == tau {
            if set.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(tau);
        fpr.push(fp as f64 / neg as f64);
        tpr.push(tp as f64 / pos as f64);
        recall.push(tp as f64 / pos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }

    let mut auroc = 0.0;
    let mut auprc = 0.0;
    for k in 1..fpr.len() {
        auroc += (fpr[k] - fpr[k - 1]) * (tpr[k] + tpr[k - 1]) / 2.0;
        auprc += (recall[k] - recall[k - 1]) * precision[k];
    }
    // The sweep runs from the largest threshold down, so the first point
    // reaching the target recall belongs to the largest qualifying threshold.
    let fpr95 = tpr.iter().position(|&t| t >= 0.95).map(|k| fpr[k]).expect("final point has tpr 1");
    Ok(CurveResult { thresholds, fpr, tpr, recall, precision, auroc, auprc, fpr95 })
}

/// Fraction of (anomaly, normal) pairs ranked correctly, ties counting ½.
pub fn auroc_mannwhitney(set: &EvalSet) -> Result<f64> {
    let (pos, neg) = set.require_both()?;
    let mut normals: Vec<f64> = set.scores.iter().zip(&set.labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    normals.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for (&s, _) in set.scores.iter().zip(&set.labels).filter(|(_, &l)| l) {
        let below = normals.partition_point(|&v| v < s);
        let not_above = normals.partition_point(|&v| v <= s);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (pos as f64 * neg as f64))
}
