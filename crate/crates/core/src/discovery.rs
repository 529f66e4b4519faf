//! Unsupervised discovery of a novel class from anomaly segments: crop
//! extraction, embedding, PCA, t-SNE, DBSCAN, densest-cluster selection,
//! pseudo labels and rehearsal quotas for incremental training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, LabelMap, SegMask};
use crate::linalg::jacobi_eigen;
use crate::rng::SplitMix64;
use crate::scoring::{bilinear_upsample, AnomalyMap};
use crate::segments::{threshold_components, Segment};
use crate::toynet::{self, Dropout, NetParams};

pub const MIN_COMPONENT_SIZE: usize = 10;
pub const CROP_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyComponent {
    pub image: usize,
    pub segment: Segment,
    /// Tight box `(row0, col0, row1, col1)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
    pub crop: Image,
}

/// Components of `{a ≥ τ}` with at least `min_size` pixels, each with the
/// image cropped to its bounding box.
pub fn extract_components(maps: &[&AnomalyMap], images: &[&Image], tau: f64, min_size: usize) -> Result<Vec<AnomalyComponent>> {
    if maps.len() != images.len() {
        return Err(Error::ShapeMismatch(format!("{} anomaly maps for {} images", maps.len(), images.len())));
    }
    let mut out = Vec::new();
    for (idx, (map, image)) in maps.iter().zip(images).enumerate() {
        if !map.same_plane(image) {
            return Err(Error::ShapeMismatch(format!("anomaly map {idx} does not match its image")));
        }
        for segment in threshold_components(map, tau) {
            if segment.size() < min_size {
                continue;
            }
            let bbox = segment.bbox();
            let crop = crop(image, bbox);
            out.push(AnomalyComponent { image: idx, segment, bbox, crop });
        }
    }
    Ok(out)
}

fn crop(image: &Image, (r0, c0, r1, c1): (usize, usize, usize, usize)) -> Image {
    let (h, w, c) = (r1 - r0 + 1, c1 - c0 + 1, image.channels);
    let mut data = Vec::with_capacity(h * w * c);
    for r in r0..=r1 {
        let start = (r * image.width + c0) * c;
        data.extend_from_slice(&image.data[start..start + w * c]);
    }
    Grid { height: h, width: w, channels: c, data }
}

/// Feature vector of each crop: resize to 16×16, run the network, average the
/// hidden features over pixels whose receptive field lies inside the crop.
pub fn embed_crops(components: &[AnomalyComponent], params: &NetParams) -> Result<Vec<Vec<f64>>> {
    components.iter().map(|c| embed_crop(&c.crop, params)).collect()
}

pub fn embed_crop(crop: &Image, params: &NetParams) -> Result<Vec<f64>> {
    if crop.pixels() == 0 {
        return Err(Error::EmptyCrop);
    }
    let resized = bilinear_upsample(crop, CROP_SIZE, CROP_SIZE);
    let (_, features) = toynet::forward(params, &resized, Dropout::Off)?;
    let half = params.k / 2;
    let mut mean = vec![0.0; params.hidden];
    let mut count = 0.0;
    for r in half..CROP_SIZE - half {
        for c in half..CROP_SIZE - half {
            let f = features.pixel(r * CROP_SIZE + c);
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
            count += 1.0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub projected: Vec<Vec<f64>>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Top `d′` unit eigenvectors.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Center, eigendecompose the sample covariance and project onto the top
/// `target` eigenvectors. Each eigenvector's first nonzero coordinate is positive.
pub fn pca_reduce(vectors: &[Vec<f64>], target: usize) -> Result<Pca> {
    let n = vectors.len();
    let d = vectors.first().map_or(0, |v| v.len());
    if n <= target || target == 0 || target > d {
        return Err(Error::InsufficientSamples { n, d: target });
    }
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch("vectors differ in length".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for v in &centered {
        for i in 0..d {
            for j in 0..=i {
                cov[i * d + j] += v[i] * v[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let x = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = x;
            cov[j * d + i] = x;
        }
    }
    let (values, vecs) = jacobi_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&j| values[j]).collect();
    let components: Vec<Vec<f64>> = order[..target]
        .iter()
        .map(|&j| {
            let mut col: Vec<f64> = (0..d).map(|i| vecs[i * d + j]).collect();
            if col.iter().find(|x| x.abs() > 1e-12).is_some_and(|&x| x < 0.0) {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            col
        })
        .collect();
    let projected = centered
        .iter()
        .map(|v| components.iter().map(|e| e.iter().zip(v).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(Pca { projected, eigenvalues, components, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self { perplexity: 10.0, iterations: 1000, lr: 100.0, seed: 0 }
    }
}

const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub points: Vec<[f64; 2]>,
    /// `KL(P‖Q)` of the initial layout followed by the value after every iteration.
    pub kl_trace: Vec<f64>,
}

fn squared_distances(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| (a - b).powi(2)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Symmetric joint affinities `p_ij = (p_{j|i} + p_{i|j}) / 2N`, each
/// conditional matched to `perplexity` by bisection on the Gaussian precision.
pub fn tsne_affinities(vectors: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = vectors.len();
    if !(perplexity > 0.0) || (n as f64) < 3.0 * perplexity {
        return Err(Error::InfeasiblePerplexity { perplexity, count: n });
    }
    let dist = squared_distances(vectors);
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let mut p = vec![0.0; n];
        for _ in 0..50 {
            let min = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            for j in 0..n {
                p[j] = if j == i { 0.0 } else { (-beta * (row[j] - min)).exp() };
                sum += p[j];
            }
            let mut h = 0.0;
            for j in 0..n {
                p[j] /= sum;
                if p[j] > 0.0 {
                    h -= p[j] * p[j].ln();
                }
            }
            let diff = h - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                // too flat: sharpen
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        cond[i * n..(i + 1) * n].copy_from_slice(&p);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(joint)
}

/// `KL(P‖Q)` for Student-t affinities `Q` of the layout `y`, with its gradient.
pub fn tsne_kl(p: &[f64], y: &[[f64; 2]]) -> (f64, Vec<[f64; 2]>) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
            let v = 1.0 / (1.0 + d);
            num[i * n + j] = v;
            num[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    let mut kl = 0.0;
    let mut grad = vec![[0.0; 2]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let q = (num[i * n + j] / z).max(f64::MIN_POSITIVE);
            let pij = p[i * n + j];
            if pij > 0.0 {
                kl += pij * (pij / q).ln();
            }
            let m = 4.0 * (pij - q) * num[i * n + j];
            grad[i][0] += m * (y[i][0] - y[j][0]);
            grad[i][1] += m * (y[i][1] - y[j][1]);
        }
    }
    (kl, grad)
}

/// Two-dimensional t-SNE embedding; deterministic given `config.seed`.
pub fn tsne(vectors: &[Vec<f64>], config: &TsneConfig) -> Result<TsneResult> {
    let p = tsne_affinities(vectors, config.perplexity)?;
    let n = vectors.len();
    let mut rng = SplitMix64::new(config.seed);
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [1e-4 * rng.gaussian(), 1e-4 * rng.gaussian()]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let exaggerated: Vec<f64> = p.iter().map(|v| v * EXAGGERATION).collect();
    let mut trace = vec![tsne_kl(&p, &y).0];
    for it in 0..config.iterations {
        let early = it < EXAGGERATION_ITERS;
        let momentum = if early { 0.5 } else { 0.8 };
        let (_, grad) = tsne_kl(if early { &exaggerated } else { &p }, &y);
        for i in 0..n {
            for a in 0..2 {
                velocity[i][a] = momentum * velocity[i][a] - config.lr * grad[i][a];
                y[i][a] += velocity[i][a];
            }
        }
        // recenter; KL is translation invariant
        let (mx, my) = (y.iter().map(|v| v[0]).sum::<f64>() / n as f64, y.iter().map(|v| v[1]).sum::<f64>() / n as f64);
        y.iter_mut().for_each(|v| {
            v[0] -= mx;
            v[1] -= my;
        });
        let kl = tsne_kl(&p, &y).0;
        if !kl.is_finite() {
            return Err(Error::InvalidArgument(format!("t-SNE diverged at iteration {it}")));
        }
        trace.push(kl);
    }
    Ok(TsneResult { points: y, kl_trace: trace })
}

/// Rescale an embedding so the median nearest-neighbor distance is 1, which
/// makes a fixed DBSCAN radius meaningful whatever spread t-SNE settled on.
/// Returns the scaled points and the divisor used.
pub fn normalize_embedding(points: &[[f64; 2]]) -> Result<(Vec<[f64; 2]>, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("need at least two points to normalize".into()));
    }
    let mut nearest: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nearest.sort_by(f64::total_cmp);
    let scale = nearest[nearest.len() / 2];
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("degenerate embedding, median neighbor distance {scale}")));
    }
    Ok((points.iter().map(|p| [p[0] / scale, p[1] / scale]).collect(), scale))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Point indices, ascending.
    pub members: Vec<usize>,
    pub max_density: usize,
    pub mean_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    /// Cluster index per point, `None` for noise.
    pub labels: Vec<Option<usize>>,
    /// Neighborhood count ρ of every point (self included).
    pub density: Vec<usize>,
    pub clusters: Vec<Cluster>,
}

/// DBSCAN with neighborhoods `{q : ‖p − q‖ < ε}` (self included). Core points
/// have ρ ≥ δ; clusters are connected components of core points; a border point
/// joins the cluster of its nearest core neighbor (lowest index on ties).
/// Clusters are numbered by their lowest-index member.
pub fn dbscan(points: &[[f64; 2]], eps: f64, delta: usize) -> Result<ClusterSet> {
    if !(eps > 0.0) || delta == 0 {
        return Err(Error::InvalidArgument(format!("need eps > 0 and delta >= 1, got {eps}, {delta}")));
    }
    let n = points.len();
    let dist = |a: usize, b: usize| ((points[a][0] - points[b][0]).powi(2) + (points[a][1] - points[b][1]).powi(2)).sqrt();
    let neigh: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| dist(i, j) < eps).collect()).collect();
    let density: Vec<usize> = neigh.iter().map(Vec::len).collect();
    let core: Vec<bool> = density.iter().map(|&r| r >= delta).collect();

    // connected components of core points
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    for start in 0..n {
        if !core[start] || comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = count;
        while let Some(p) = stack.pop() {
            for &q in &neigh[p] {
                if core[q] && comp[q] == usize::MAX {
                    comp[q] = count;
                    stack.push(q);
                }
            }
        }
        count += 1;
    }
    let mut raw: Vec<Option<usize>> = (0..n).map(|i| core[i].then_some(comp[i])).collect();
    for i in 0..n {
        if core[i] {
            continue;
        }
        let nearest = neigh[i]
            .iter()
            .filter(|&&q| core[q])
            .min_by(|&&a, &&b| dist(i, a).total_cmp(&dist(i, b)).then(a.cmp(&b)));
        raw[i] = nearest.map(|&q| comp[q]);
    }

    // renumber by lowest-index member
    let mut remap = vec![usize::MAX; count];
    let mut next = 0;
    let mut labels = vec![None; n];
    for i in 0..n {
        if let Some(c) = raw[i] {
            if remap[c] == usize::MAX {
                remap[c] = next;
                next += 1;
            }
            labels[i] = Some(remap[c]);
        }
    }
    let mut clusters: Vec<Cluster> = (0..next).map(|_| Cluster { members: Vec::new(), max_density: 0, mean_density: 0.0 }).collect();
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = *l {
            clusters[c].members.push(i);
        }
    }
    for c in &mut clusters {
        c.max_density = c.members.iter().map(|&i| density[i]).max().unwrap_or(0);
        c.mean_density = c.members.iter().map(|&i| density[i] as f64).sum::<f64>() / c.members.len() as f64;
    }
    Ok(ClusterSet { labels, density, clusters })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityStatistic {
    Max,
    Average,
}

impl std::str::FromStr for DensityStatistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "average" | "mean" => Ok(Self::Average),
            other => Err(Error::InvalidArgument(format!("unknown density statistic {other:?}"))),
        }
    }
}

/// Index of the densest cluster with at least `min_size` members. Ties go to
/// the larger cluster, then the lower index.
pub fn select_cluster(set: &ClusterSet, statistic: DensityStatistic, min_size: usize) -> Result<usize> {
    let score = |c: &Cluster| match statistic {
        DensityStatistic::Max => c.max_density as f64,
        DensityStatistic::Average => c.mean_density,
    };
    set.clusters
        .iter()
        .enumerate()
        .filter(|(_, c)| c.members.len() >= min_size)
        .max_by(|(i, a), (j, b)| {
            score(a).total_cmp(&score(b)).then(a.members.len().cmp(&b.members.len())).then(j.cmp(i))
        })
        .map(|(i, _)| i)
        .ok_or(Error::NoQualifyingCluster { min_size })
}

/// `ỹ_i = new_class` on pixels of the given components, `m_i` elsewhere.
pub fn pseudo_labels(mask: &SegMask, components: &[&Segment], new_class: u8) -> LabelMap {
    let mut out = mask.clone();
    for seg in components {
        for &p in &seg.pixels {
            out.data[p] = new_class;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RehearsalPlan {
    /// Relabeled pixels per previously predicted class.
    pub nu_tot: Vec<usize>,
    pub nu_rel: Vec<f64>,
    /// Minimum number of rehearsal images containing each class, after relaxation.
    pub quota: Vec<usize>,
    /// Indices into the old training set.
    pub subset: Vec<usize>,
}

const REJECTION_ATTEMPTS: usize = 10_000;

/// Rehearsal quotas from how often each old class was predicted on relabeled
/// pixels, and a seeded rejection sample of old training images meeting them.
/// `old_masks` are the ground-truth masks of the old training set.
pub fn rehearsal_quota(
    pseudo: &[&LabelMap],
    predicted: &[&LabelMap],
    new_class: u8,
    old_masks: &[&LabelMap],
    seed: u64,
) -> Result<RehearsalPlan> {
    let classes = new_class as usize;
    let mut nu_tot = vec![0usize; classes];
    for (y, m) in pseudo.iter().zip(predicted) {
        for (&a, &b) in y.data.iter().zip(&m.data) {
            if a == new_class && (b as usize) < classes {
                nu_tot[b as usize] += 1;
            }
        }
    }
    let total: usize = nu_tot.iter().sum();
    if total == 0 {
        return Err(Error::ZeroRelabeled);
    }
    let nu_rel: Vec<f64> = nu_tot.iter().map(|&v| v as f64 / total as f64).collect();
    let size = pseudo.len().min(old_masks.len());
    let mut quota: Vec<usize> = nu_rel.iter().map(|&v| ((v * size as f64) - 1e-9).ceil().max(0.0) as usize).collect();

    let contains: Vec<Vec<bool>> =
        old_masks.iter().map(|m| (0..classes).map(|s| m.data.contains(&(s as u8))).collect()).collect();
    let mut rng = SplitMix64::new(seed);
    let mut order: Vec<usize> = (0..old_masks.len()).collect();
    loop {
        for _ in 0..REJECTION_ATTEMPTS {
            rng.shuffle(&mut order);
            let candidate = &order[..size];
            let ok = (0..classes).all(|s| candidate.iter().filter(|&&i| contains[i][s]).count() >= quota[s]);
            if ok {
                let mut subset = candidate.to_vec();
                subset.sort_unstable();
                return Ok(RehearsalPlan { nu_tot, nu_rel, quota, subset });
            }
        }
        // relax: decrement the largest quota (lowest class on ties)
        let (largest, _) = quota.iter().enumerate().rev().max_by_key(|(_, &q)| q).expect("at least one class");
        if quota[largest] == 0 {
            unreachable!("all-zero quotas are always satisfiable");
        }
        quota[largest] -= 1;
    }
}
