//! Slow, obviously correct reference implementations.

use anomseg::rng::SplitMix64;

/// AuROC as the fraction of (anomaly, normal) pairs ordered correctly, ties half.
pub fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

pub fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| a[i * d + k] * b[k * d + j]).sum();
        }
    }
    out
}

pub fn transpose(a: &[f64], d: usize) -> Vec<f64> {
    (0..d * d).map(|idx| a[(idx % d) * d + idx / d]).collect()
}

pub fn det3(a: &[f64]) -> f64 {
    a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) + a[2] * (a[3] * a[7] - a[4] * a[6])
}

/// Strictly positive probabilities summing to one.
pub fn random_distribution(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| 0.05 + rng.next_f64()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// `Σ_y p(y|x) I(x, y)` by enumeration, where `row[y] = p(x, y)`. With
/// `anomaly_x = Some(q(x))` the information is relative to the anomaly joint
/// `q(x, y) = q(x) / S`, otherwise it is `−log p(x, y)`.
pub fn expected_joint_information(row: &[f64], anomaly_x: Option<f64>, classes: usize) -> f64 {
    let px: f64 = row.iter().sum();
    row.iter()
        .map(|&pxy| {
            let mut info = -pxy.ln();
            if let Some(q) = anomaly_x {
                info += (q / classes as f64).ln();
            }
            pxy / px * info
        })
        .sum()
}

/// DBSCAN by definition: core points are linked when closer than `eps`, the
/// clusters are the transitive closure of that relation, and a border point
/// takes the cluster of its nearest core point (lowest index on ties).
pub fn dbscan_closure(points: &[[f64; 2]], eps: f64, delta: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let dist = |a: usize, b: usize| ((points[a][0] - points[b][0]).powi(2) + (points[a][1] - points[b][1]).powi(2)).sqrt();
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| dist(i, j) < eps).count() >= delta).collect();
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            reach[i][j] = core[i] && core[j] && dist(i, j) < eps;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let root = |i: usize| (0..n).find(|&j| reach[i][j]).unwrap();
    (0..n)
        .map(|i| {
            if core[i] {
                return Some(root(i));
            }
            let mut best: Option<usize> = None;
            for j in (0..n).filter(|&j| core[j] && dist(i, j) < eps) {
                if best.map_or(true, |b| dist(i, j) < dist(i, b)) {
                    best = Some(j);
                }
            }
            best.map(root)
        })
        .collect()
}

/// Relabel clusters in order of first appearance so partitions compare equal
/// regardless of numbering.
pub fn canonical(labels: &[Option<usize>]) -> Vec<Option<usize>> {
    let mut seen: Vec<usize> = Vec::new();
    labels
        .iter()
        .map(|l| {
            l.map(|c| match seen.iter().position(|&s| s == c) {
                Some(k) => k,
                None => {
                    seen.push(c);
                    seen.len() - 1
                }
            })
        })
        .collect()
}
