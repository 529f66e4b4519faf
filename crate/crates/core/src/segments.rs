//! Segment-level evaluation: connected components, hand-crafted segment
//! metrics, segment-wise IoU, a logistic meta classifier that flags false
//! positive segments, and object-level FP/FN/F1 accounting.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap, SoftmaxMap, IGNORE_LABEL};
use crate::infostat::entropy;

/// Label given to thresholded anomaly segments.
pub const ANOMALY_SEGMENT: u8 = 254;
pub const METRIC_COUNT: usize = 12;
pub const METRIC_NAMES: [&str; METRIC_COUNT] = [
    "entropy_mean",
    "entropy_var",
    "margin_mean",
    "margin_var",
    "msp_mean",
    "size",
    "log_size",
    "boundary_fraction",
    "boundary_minus_interior_entropy",
    "centroid_row",
    "centroid_col",
    "neighbor_classes",
];

/// One 8-connected region of equal labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub label: u8,
    pub height: usize,
    pub width: usize,
    /// Flat pixel indices in raster order.
    pub pixels: Vec<usize>,
}

impl Segment {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }

    /// Tight bounding box `(row0, col0, row1, col1)`, inclusive.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        let w = self.width;
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        for &p in &self.pixels {
            let (r, c) = (p / w, p % w);
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
        }
        (r0, c0, r1, c1)
    }
}

const NEIGHBORS8: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

fn neighbors(p: usize, h: usize, w: usize, offsets: &'static [(i64, i64)]) -> impl Iterator<Item = usize> {
    let (r, c) = ((p / w) as i64, (p % w) as i64);
    offsets.iter().filter_map(move |&(dr, dc)| {
        let (rr, cc) = (r + dr, c + dc);
        (rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64).then(|| rr as usize * w + cc as usize)
    })
}

/// Maximal 8-connected regions of equal label, skipping [`IGNORE_LABEL`].
/// Segments are ordered by their first pixel in raster order.
pub fn connected_components(map: &LabelMap) -> Vec<Segment> {
    let (h, w) = (map.height, map.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        let label = map.data[start];
        if seen[start] || label == IGNORE_LABEL {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            for q in neighbors(p, h, w, &NEIGHBORS8) {
                if !seen[q] && map.data[q] == label {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        pixels.sort_unstable();
        out.push(Segment { label, height: h, width: w, pixels });
    }
    out
}

/// Components of `{i : map_i ≥ τ}`, labeled [`ANOMALY_SEGMENT`].
pub fn threshold_components(map: &Grid, tau: f64) -> Vec<Segment> {
    let data = map.data.iter().map(|&a| if a >= tau { ANOMALY_SEGMENT } else { IGNORE_LABEL }).collect();
    connected_components(&LabelMap { height: map.height, width: map.width, data })
}

/// `|pred ∩ G| / |pred ∪ G|` with `G` the union of the given ground-truth components.
pub fn segment_iou(segment: &Segment, gt_components: &[&Segment]) -> f64 {
    let gt: BTreeSet<usize> = gt_components.iter().flat_map(|s| s.pixels.iter().copied()).collect();
    let inter = segment.pixels.iter().filter(|p| gt.contains(p)).count();
    let union = segment.size() + gt.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of `segment` against the ground-truth components of `gt` with label
/// `class` that it intersects.
pub fn segment_iou_against(segment: &Segment, gt_components: &[Segment]) -> f64 {
    let mine: BTreeSet<usize> = segment.pixels.iter().copied().collect();
    let touching: Vec<&Segment> = gt_components.iter().filter(|g| g.pixels.iter().any(|p| mine.contains(p))).collect();
    if touching.is_empty() {
        0.0
    } else {
        segment_iou(segment, &touching)
    }
}

fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// The fixed 12-dimensional metric vector of a segment (see [`METRIC_NAMES`]).
/// `context` is the predicted semantic mask used to count neighboring classes.
pub fn segment_metrics(segment: &Segment, probs: &SoftmaxMap, context: &LabelMap) -> [f64; METRIC_COUNT] {
    let (h, w) = (segment.height, segment.width);
    let norm = (probs.channels as f64).ln();
    let inside: BTreeSet<usize> = segment.pixels.iter().copied().collect();
    let ent = |p: usize| entropy(probs.pixel(p)) / norm;
    let top2 = |p: usize| {
        let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &v in probs.pixel(p) {
            if v > best.0 {
                best = (v, best.0);
            } else if v > best.1 {
                best.1 = v;
            }
        }
        best
    };
    let px = segment.pixels.iter().copied();
    let (ent_mean, ent_var) = mean_var(px.clone().map(ent));
    let (margin_mean, margin_var) = mean_var(px.clone().map(|p| {
        let (a, b) = top2(p);
        1.0 - a + b
    }));
    let msp_mean = px.clone().map(|p| top2(p).0).sum::<f64>() / segment.size() as f64;

    const NEIGHBORS4: [(i64, i64); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
    let is_boundary = |p: usize| {
        let (r, c) = (p / w, p % w);
        r == 0 || c == 0 || r + 1 == h || c + 1 == w || neighbors(p, h, w, &NEIGHBORS4).any(|q| !inside.contains(&q))
    };
    let (boundary, interior): (Vec<usize>, Vec<usize>) = px.clone().partition(|&p| is_boundary(p));
    let boundary_fraction = boundary.len() as f64 / segment.size() as f64;
    let contrast = if interior.is_empty() {
        0.0
    } else {
        let b = boundary.iter().map(|&p| ent(p)).sum::<f64>() / boundary.len() as f64;
        let i = interior.iter().map(|&p| ent(p)).sum::<f64>() / interior.len() as f64;
        b - i
    };

    let n = segment.size() as f64;
    let row = px.clone().map(|p| (p / w) as f64 + 0.5).sum::<f64>() / n / h as f64;
    let col = px.clone().map(|p| (p % w) as f64 + 0.5).sum::<f64>() / n / w as f64;
    let classes: BTreeSet<u8> = segment
        .pixels
        .iter()
        .flat_map(|&p| neighbors(p, h, w, &NEIGHBORS8))
        .filter(|q| !inside.contains(q))
        .map(|q| context.data[q])
        .collect();

    [
        ent_mean,
        ent_var,
        margin_mean,
        margin_var,
        msp_mean,
        n,
        n.ln(),
        boundary_fraction,
        contrast,
        row,
        col,
        classes.len() as f64,
    ]
}

/// Standardized logistic regression on segment metrics predicting `IoU > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub mean: Vec<f64>,
    /// Per-feature scale; constant features get 1 and a weight pinned at 0.
    pub std: Vec<f64>,
    pub active: Vec<bool>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl MetaModel {
    /// Identity standardization with the given weights.
    pub fn from_weights(weights: Vec<f64>, bias: f64) -> Self {
        let d = weights.len();
        Self { mean: vec![0.0; d], std: vec![1.0; d], active: vec![true; d], weights, bias }
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .zip(&self.active)
            .map(|(((v, m), s), &a)| if a { (v - m) / s } else { 0.0 })
            .collect()
    }

    /// Predicted probability that a segment overlaps the ground truth.
    pub fn probability(&self, metrics: &[f64]) -> f64 {
        let z = self.standardize(metrics);
        sigmoid(self.bias + self.weights.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>())
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self { iterations: 500, lr: 0.1 }
    }
}

/// Mean logistic loss of `(weights, bias)` on standardized rows with its gradient.
pub fn logistic_loss(weights: &[f64], bias: f64, rows: &[Vec<f64>], targets: &[bool]) -> (f64, Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    for (x, &y) in rows.iter().zip(targets) {
        let t = bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        // log(1 + e^t) − y·t, evaluated stably
        loss += t.max(0.0) + (-t.abs()).exp().ln_1p() - if y { t } else { 0.0 };
        let r = sigmoid(t) - if y { 1.0 } else { 0.0 };
        gw.iter_mut().zip(x).for_each(|(g, v)| *g += r * v / n);
        gb += r / n;
    }
    (loss / n, gw, gb)
}

/// Fit the meta classifier by full-batch gradient descent from zero weights.
pub fn meta_fit(metrics: &[Vec<f64>], ious: &[f64], config: &MetaConfig) -> Result<MetaModel> {
    if metrics.is_empty() || metrics.len() != ious.len() {
        return Err(Error::ShapeMismatch(format!("{} metric rows for {} IoU values", metrics.len(), ious.len())));
    }
    let targets: Vec<bool> = ious.iter().map(|&v| v > 0.0).collect();
    if targets.iter().all(|&t| t) || targets.iter().all(|&t| !t) {
        return Err(Error::DegenerateOutcome);
    }
    let d = metrics[0].len();
    if metrics.iter().any(|m| m.len() != d) {
        return Err(Error::ShapeMismatch("metric rows differ in length".into()));
    }
    let n = metrics.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| metrics.iter().map(|m| m[j]).sum::<f64>() / n).collect();
    let spread: Vec<f64> =
        (0..d).map(|j| (metrics.iter().map(|m| (m[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt()).collect();
    let active: Vec<bool> = spread.iter().map(|&s| s > 1e-12).collect();
    let std: Vec<f64> = spread.iter().zip(&active).map(|(&s, &a)| if a { s } else { 1.0 }).collect();
    let mut model = MetaModel { mean, std, active, weights: vec![0.0; d], bias: 0.0 };
    let rows: Vec<Vec<f64>> = metrics.iter().map(|m| model.standardize(m)).collect();
    for _ in 0..config.iterations {
        let (_, gw, gb) = logistic_loss(&model.weights, model.bias, &rows, &targets);
        model.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= config.lr * g);
        model.bias -= config.lr * gb;
    }
    Ok(model)
}

/// Indices of segments whose predicted probability of `IoU > 0` is at least ½.
pub fn meta_apply(model: &MetaModel, metrics: &[Vec<f64>]) -> Vec<usize> {
    metrics.iter().enumerate().filter(|(_, m)| model.probability(m) >= 0.5).map(|(i, _)| i).collect()
}

/// Everything object-level evaluation needs to know about one scene.
#[derive(Debug, Clone, Copy)]
pub struct SceneOutputs<'a> {
    pub anomaly: &'a Grid,
    pub probs: &'a SoftmaxMap,
    pub predicted: &'a LabelMap,
    /// 1 = anomaly, 0 = normal, 255 = ignore.
    pub gt_anomaly: &'a LabelMap,
}

/// A thresholded anomaly segment with its metrics and IoU against the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSegment {
    pub scene: usize,
    pub segment: Segment,
    pub metrics: Vec<f64>,
    pub iou: f64,
}

fn gt_anomaly_components(gt: &LabelMap) -> Vec<Segment> {
    let data = gt.data.iter().map(|&v| if v == 1 { 1 } else { IGNORE_LABEL }).collect();
    connected_components(&LabelMap { height: gt.height, width: gt.width, data })
}

/// Predicted anomaly segments of every scene at threshold `tau`.
pub fn scored_segments(scenes: &[SceneOutputs], tau: f64) -> Vec<ScoredSegment> {
    let mut out = Vec::new();
    for (idx, s) in scenes.iter().enumerate() {
        let gt = gt_anomaly_components(s.gt_anomaly);
        for segment in threshold_components(s.anomaly, tau) {
            let metrics = segment_metrics(&segment, s.probs, s.predicted).to_vec();
            let iou = segment_iou_against(&segment, &gt);
            out.push(ScoredSegment { scene: idx, segment, metrics, iou });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
}

/// Count object-level errors at threshold `tau`. With a meta model, segments
/// it rejects are discarded before counting (so FN is counted after filtering).
pub fn object_level_counts(scenes: &[SceneOutputs], tau: f64, meta: Option<&MetaModel>) -> (ObjectCounts, Vec<ScoredSegment>) {
    let segments = scored_segments(scenes, tau);
    let kept: Vec<ScoredSegment> = match meta {
        Some(model) => segments.into_iter().filter(|s| model.probability(&s.metrics) >= 0.5).collect(),
        None => segments,
    };
    let tp = kept.iter().filter(|s| s.iou > 0.0).count();
    let fp = kept.len() - tp;
    let mut fn_ = 0;
    for (idx, scene) in scenes.iter().enumerate() {
        let covered: BTreeSet<usize> = kept.iter().filter(|s| s.scene == idx).flat_map(|s| s.segment.pixels.iter().copied()).collect();
        fn_ += gt_anomaly_components(scene.gt_anomaly)
            .iter()
            .filter(|g| !g.pixels.iter().any(|p| covered.contains(p)))
            .count();
    }
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    (ObjectCounts { tp, fp, fn_, f1 }, kept)
}

/// Per-class IoU over non-ignored ground-truth pixels for classes `0..classes`,
/// plus their mean over classes that occur in prediction or ground truth.
pub fn class_iou(predicted: &[&LabelMap], truth: &[&LabelMap], classes: usize) -> (Vec<Option<f64>>, f64) {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (p, t) in predicted.iter().zip(truth) {
        for (&a, &b) in p.data.iter().zip(&t.data) {
            if b == IGNORE_LABEL {
                continue;
            }
            let (a, b) = (a as usize, b as usize);
            if a == b && a < classes {
                inter[a] += 1;
                union[a] += 1;
            } else {
                if a < classes {
                    union[a] += 1;
                }
                if b < classes {
                    union[b] += 1;
                }
            }
        }
    }
    let per: Vec<Option<f64>> = (0..classes).map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64)).collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (per, mean)
}

/// Performance loss on the original classes: mean IoU of the plain prediction
/// minus mean IoU after the kept anomaly segments overwrite their pixels with a
/// non-class label. Ground truth is the trained-class mask.
pub fn meta_delta(scenes: &[SceneOutputs], truth: &[&LabelMap], kept: &[ScoredSegment], classes: usize) -> f64 {
    let reference: Vec<&LabelMap> = scenes.iter().map(|s| s.predicted).collect();
    let (_, before) = class_iou(&reference, truth, classes);
    let mut overridden: Vec<LabelMap> = scenes.iter().map(|s| s.predicted.clone()).collect();
    for seg in kept {
        for &p in &seg.segment.pixels {
            overridden[seg.scene].data[p] = ANOMALY_SEGMENT;
        }
    }
    let refs: Vec<&LabelMap> = overridden.iter().collect();
    let (_, after) = class_iou(&refs, truth, classes);
    before - after
}
