//! Per-pixel anomaly score maps. Every map is a one-channel [`Grid`] where
//! higher means more anomalous.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, Grid, Image, LabelMap, LogitMap, SoftmaxMap, IGNORE_LABEL};
use crate::infostat::{fit_gaussian, GaussianModel};
use crate::rng::derive_seed;
use crate::toynet::{self, softmax_into, Dropout, NetParams, LOG_CLAMP};

/// H×W map of anomaly scores.
pub type AnomalyMap = Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Msp,
    Odin,
    Mahalanobis,
    McDropout,
    Void,
    Density,
    Entropy,
    Margin,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Msp,
        Method::Odin,
        Method::Mahalanobis,
        Method::McDropout,
        Method::Void,
        Method::Density,
        Method::Entropy,
        Method::Margin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Msp => "msp",
            Method::Odin => "odin",
            Method::Mahalanobis => "mahalanobis",
            Method::McDropout => "mcdropout",
            Method::Void => "void",
            Method::Density => "density",
            Method::Entropy => "entropy",
            Method::Margin => "margin",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scoring method {s:?}")))
    }
}

fn per_pixel(probs: &SoftmaxMap, f: impl FnMut(&[f64]) -> f64) -> AnomalyMap {
    let data = probs.data.chunks_exact(probs.channels).map(f).collect();
    Grid { height: probs.height, width: probs.width, channels: 1, data }
}

fn max_and_second(p: &[f64]) -> (f64, f64) {
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in p {
        if v > best {
            second = best;
            best = v;
        } else if v > second {
            second = v;
        }
    }
    (best, second)
}

/// `1 − max_s p_s`.
pub fn score_msp(probs: &SoftmaxMap) -> AnomalyMap {
    per_pixel(probs, |p| 1.0 - max_and_second(p).0)
}

/// Softmax entropy, divided by `ln S` when `normalized`.
pub fn score_entropy(probs: &SoftmaxMap, normalized: bool) -> AnomalyMap {
    let norm = if normalized { (probs.channels as f64).ln() } else { 1.0 };
    per_pixel(probs, |p| crate::infostat::entropy(p) / norm)
}

/// `1 − max_s p_s + second-max_s p_s`.
pub fn score_margin(probs: &SoftmaxMap) -> AnomalyMap {
    per_pixel(probs, |p| {
        let (a, b) = max_and_second(p);
        1.0 - a + b
    })
}

/// Probability of the extra void channel of a model with `trained_classes + 1` outputs.
pub fn score_void(probs: &SoftmaxMap, trained_classes: usize) -> Result<AnomalyMap> {
    if probs.channels != trained_classes + 1 {
        return Err(Error::ChannelMismatch { expected: trained_classes + 1, found: probs.channels });
    }
    Ok(per_pixel(probs, |p| p[trained_classes]))
}

fn tempered_msp(logits: &LogitMap, t: f64) -> AnomalyMap {
    let mut scaled = vec![0.0; logits.channels];
    let mut q = vec![0.0; logits.channels];
    per_pixel(logits, |y| {
        scaled.iter_mut().zip(y).for_each(|(s, v)| *s = v / t);
        softmax_into(&scaled, &mut q);
        1.0 - max_and_second(&q).0
    })
}

/// ODIN: temperature-scaled MSP after a signed input perturbation that
/// increases the summed log max-softmax. No clipping is applied to the
/// perturbed image.
pub fn score_odin(params: &NetParams, image: &Image, t: f64, eps: f64) -> Result<AnomalyMap> {
    if !(t > 0.0) || !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("need t > 0 and eps >= 0, got t = {t}, eps = {eps}")));
    }
    let perturbed;
    let input = if eps == 0.0 {
        image
    } else {
        let (_, grad) = toynet::input_gradient(params, image, |y| odin_objective(y, t))?;
        // x̃ = x − ε·sign(−∇ log S) = x + ε·sign(∇ log S)
        let data = image.data.iter().zip(&grad.data).map(|(x, g)| x - eps * sign(-g)).collect();
        perturbed = Grid { data, ..image.clone() };
        &perturbed
    };
    Ok(tempered_msp(&toynet::logits(params, input)?, t))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Σ_i log max_s softmax(y_i / t)` and its gradient on the logits.
pub fn odin_objective(logits: &LogitMap, t: f64) -> (f64, Grid) {
    let s = logits.channels;
    let mut grad = Grid::zeros(logits.height, logits.width, s);
    let mut scaled = vec![0.0; s];
    let mut q = vec![0.0; s];
    let mut total = 0.0;
    for i in 0..logits.pixels() {
        scaled.iter_mut().zip(logits.pixel(i)).for_each(|(a, v)| *a = v / t);
        softmax_into(&scaled, &mut q);
        let mut m = 0;
        for c in 1..s {
            if q[c] > q[m] {
                m = c;
            }
        }
        total += q[m].max(LOG_CLAMP).ln();
        let g = grad.pixel_mut(i);
        for c in 0..s {
            let delta = if c == m { 1.0 } else { 0.0 };
            g[c] = (delta - q[c]) / t;
        }
    }
    (total, grad)
}

/// One Gaussian per ground-truth class over penultimate features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussians {
    pub models: Vec<Option<GaussianModel>>,
}

/// Fit class-conditional Gaussians from features paired with label maps.
/// Classes without enough pixels stay unfitted.
pub fn fit_class_gaussians(pairs: &[(&FeatureMap, &LabelMap)], classes: usize) -> Result<ClassGaussians> {
    let d = pairs.first().map(|(f, _)| f.channels).ok_or(Error::EmptyTrainingSet)?;
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for (features, labels) in pairs {
        if features.channels != d || features.pixels() != labels.pixels() {
            return Err(Error::ShapeMismatch("features and labels are misaligned".into()));
        }
        for (i, &label) in labels.data.iter().enumerate() {
            if label != IGNORE_LABEL && (label as usize) < classes {
                pooled[label as usize].extend_from_slice(features.pixel(i));
            }
        }
    }
    let models = pooled
        .iter()
        .map(|rows| if rows.len() / d > d { fit_gaussian(rows, d).map(Some) } else { Ok(None) })
        .collect::<Result<_>>()?;
    Ok(ClassGaussians { models })
}

/// `min_s (f − μ_s)ᵀ Σ_s⁻¹ (f − μ_s)`.
pub fn score_mahalanobis(features: &FeatureMap, gaussians: &ClassGaussians) -> Result<AnomalyMap> {
    let models: Vec<&GaussianModel> = gaussians
        .models
        .iter()
        .enumerate()
        .map(|(s, m)| m.as_ref().ok_or(Error::UnfittedClass(s)))
        .collect::<Result<_>>()?;
    if models.is_empty() {
        return Err(Error::UnfittedClass(0));
    }
    if models.iter().any(|m| m.dim() != features.channels) {
        return Err(Error::ChannelMismatch { expected: models[0].dim(), found: features.channels });
    }
    Ok(per_pixel(features, |f| models.iter().map(|m| m.quadratic_form(f)).fold(f64::INFINITY, f64::min)))
}

/// Softmax maps of `samples` dropout passes; pass `r` uses a seed derived from `(seed, r)`.
pub fn mc_dropout_samples(params: &NetParams, image: &Image, rate: f64, samples: usize, seed: u64) -> Result<Vec<SoftmaxMap>> {
    (0..samples)
        .map(|r| {
            let dropout = Dropout::On { rate, seed: derive_seed(seed, r as u64) };
            Ok(toynet::softmax_map(&toynet::forward(params, image, dropout)?.0))
        })
        .collect()
}

/// Mutual information `H(mean_r p^(r)) − mean_r H(p^(r))`.
pub fn score_mc_dropout(samples: &[SoftmaxMap]) -> Result<AnomalyMap> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 dropout samples, got {}", samples.len())));
    }
    let first = &samples[0];
    if samples.iter().any(|s| s.height != first.height || s.width != first.width || s.channels != first.channels) {
        return Err(Error::ShapeMismatch("dropout samples differ in shape".into()));
    }
    let r = samples.len() as f64;
    let c = first.channels;
    let h = |p: &[f64]| -> f64 { -p.iter().map(|&q| q * q.max(LOG_CLAMP).ln()).sum::<f64>() };
    let mut mean = vec![0.0; c];
    let data = (0..first.pixels())
        .map(|i| {
            // Identical samples carry no disagreement; skip the rounding of the mean.
            if samples[1..].iter().all(|s| s.pixel(i) == first.pixel(i)) {
                return 0.0;
            }
            mean.iter_mut().for_each(|m| *m = 0.0);
            let mut mean_entropy = 0.0;
            for s in samples {
                let p = s.pixel(i);
                mean.iter_mut().zip(p).for_each(|(m, q)| *m += q / r);
                mean_entropy += h(p) / r;
            }
            // non-negative by Jensen; clamp rounding noise
            (h(&mean) - mean_entropy).max(0.0)
        })
        .collect();
    Ok(Grid { height: first.height, width: first.width, channels: 1, data })
}

/// Bilinear resampling with the align-corners convention: corner pixels of
/// input and output coincide.
pub fn bilinear_upsample(map: &Grid, out_h: usize, out_w: usize) -> Grid {
    let (h, w, c) = (map.height, map.width, map.channels);
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out <= 1 || n_in <= 1 {
            return (0, 0, 0.0);
        }
        let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Grid::zeros(out_h, out_w, c);
    for i in 0..out_h {
        let (r0, r1, a) = coord(i, out_h, h);
        for j in 0..out_w {
            let (c0, c1, b) = coord(j, out_w, w);
            for ch in 0..c {
                let v = (1.0 - a) * (1.0 - b) * map.at(r0, c0, ch)
                    + (1.0 - a) * b * map.at(r0, c1, ch)
                    + a * (1.0 - b) * map.at(r1, c0, ch)
                    + a * b * map.at(r1, c1, ch);
                out.data[(i * out_w + j) * c + ch] = v;
            }
        }
    }
    out
}

/// Pool every labeled training pixel's features into one Gaussian.
pub fn fit_pooled_gaussian(pairs: &[(&FeatureMap, &LabelMap)]) -> Result<GaussianModel> {
    let d = pairs.first().map(|(f, _)| f.channels).ok_or(Error::EmptyTrainingSet)?;
    let mut rows = Vec::new();
    for (features, labels) in pairs {
        for (i, &label) in labels.data.iter().enumerate() {
            if label != IGNORE_LABEL {
                rows.extend_from_slice(features.pixel(i));
            }
        }
    }
    fit_gaussian(&rows, d)
}

/// Gaussian negative log-likelihood of each feature pixel, bilinearly resampled to `out_h × out_w`.
pub fn score_embedding_density(features: &FeatureMap, model: &GaussianModel, out_h: usize, out_w: usize) -> Result<AnomalyMap> {
    if model.dim() != features.channels {
        return Err(Error::ChannelMismatch { expected: model.dim(), found: features.channels });
    }
    let nll = per_pixel(features, |f| model.information(f));
    Ok(if nll.height == out_h && nll.width == out_w { nll } else { bilinear_upsample(&nll, out_h, out_w) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(p: &[f64], c: usize) -> SoftmaxMap {
        Grid::from_vec(1, p.len() / c, c, p.to_vec()).unwrap()
    }

    #[test]
    fn msp_examples() {
        assert_eq!(score_msp(&probs(&[0.0, 1.0, 0.0], 3)).data, vec![0.0]);
        assert!((score_msp(&probs(&[0.2; 5], 5)).data[0] - 0.8).abs() < 1e-15);
        assert!((score_msp(&probs(&[0.7, 0.2, 0.1], 3)).data[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn entropy_examples() {
        assert!((score_entropy(&probs(&[0.25; 4], 4), true).data[0] - 1.0).abs() < 1e-15);
        assert_eq!(score_entropy(&probs(&[0.0, 0.0, 1.0, 0.0], 4), true).data[0], 0.0);
        assert!((score_entropy(&probs(&[0.5, 0.5, 0.0, 0.0], 4), true).data[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn margin_examples() {
        assert_eq!(score_margin(&probs(&[1.0, 0.0, 0.0], 3)).data[0], 0.0);
        assert!((score_margin(&probs(&[0.25; 4], 4)).data[0] - 1.0).abs() < 1e-15);
        assert!((score_margin(&probs(&[0.6, 0.3, 0.1], 3)).data[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn void_examples() {
        let p = toynet::softmax_map(&Grid::from_vec(1, 1, 3, vec![0.0, 0.0, -1e9]).unwrap());
        assert!(score_void(&p, 2).unwrap().data[0] < 1e-300);
        assert!((score_void(&probs(&[0.2; 5], 5), 4).unwrap().data[0] - 0.2).abs() < 1e-15);
        assert_eq!(score_void(&probs(&[0.0, 0.0, 1.0], 3), 2).unwrap().data[0], 1.0);
        assert!(matches!(score_void(&probs(&[0.5, 0.5], 2), 2), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn mc_dropout_examples() {
        let a = probs(&[0.3, 0.7], 2);
        assert_eq!(score_mc_dropout(&[a.clone(), a.clone()]).unwrap().data[0], 0.0);
        let one = probs(&[1.0, 0.0], 2);
        let two = probs(&[0.0, 1.0], 2);
        assert!((score_mc_dropout(&[one, two]).unwrap().data[0] - 2f64.ln()).abs() < 1e-12);
        assert!(score_mc_dropout(&[a]).is_err());
    }

    #[test]
    fn mahalanobis_examples() {
        let id = vec![1.0, 0.0, 0.0, 1.0];
        let g = ClassGaussians {
            models: vec![
                Some(GaussianModel::new(vec![0.0, 0.0], id.clone()).unwrap()),
                Some(GaussianModel::new(vec![5.0, 5.0], id.clone()).unwrap()),
            ],
        };
        let f = Grid::from_vec(1, 2, 2, vec![5.0, 5.0, 3.0, 4.0]).unwrap();
        let a = score_mahalanobis(&f, &g).unwrap();
        assert_eq!(a.data[0], 0.0);
        // quadratic forms 25 and 5: the minimum wins
        assert!((a.data[1] - 5.0).abs() < 1e-12);
        let g1 = ClassGaussians { models: vec![Some(GaussianModel::new(vec![0.0, 0.0], id.clone()).unwrap())] };
        let f = Grid::from_vec(1, 1, 2, vec![3.0, 4.0]).unwrap();
        assert!((score_mahalanobis(&f, &g1).unwrap().data[0] - 25.0).abs() < 1e-12);
        let g2 = ClassGaussians {
            models: vec![
                Some(GaussianModel::new(vec![2.0, 0.0], id.clone()).unwrap()),
                Some(GaussianModel::new(vec![0.0, 3.0], id).unwrap()),
            ],
        };
        let f = Grid::from_vec(1, 1, 2, vec![0.0, 0.0]).unwrap();
        assert!((score_mahalanobis(&f, &g2).unwrap().data[0] - 4.0).abs() < 1e-12);
        let unfitted = ClassGaussians { models: vec![None] };
        assert!(matches!(score_mahalanobis(&f, &unfitted), Err(Error::UnfittedClass(0))));
    }

    #[test]
    fn density_examples() {
        let model = GaussianModel::new(vec![1.0, 2.0], vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let f = Grid::from_vec(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let expected = std::f64::consts::TAU.ln() + 0.5 * model.log_det();
        assert!((score_embedding_density(&f, &model, 1, 1).unwrap().data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn bilinear_examples() {
        let constant = Grid::filled(3, 2, 1, 0.7);
        assert!(bilinear_upsample(&constant, 6, 4).data.iter().all(|v| (v - 0.7).abs() < 1e-15));
        let checker = Grid::from_vec(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = bilinear_upsample(&checker, 3, 3);
        assert!((up.at(1, 1, 0) - 0.5).abs() < 1e-15);
        // ×2: the central 2×2 block sits at source offsets 1/3 and 2/3
        let up = bilinear_upsample(&checker, 4, 4);
        assert!((up.at(1, 1, 0) - 4.0 / 9.0).abs() < 1e-15);
        assert!((up.at(1, 2, 0) - 5.0 / 9.0).abs() < 1e-15);
        let centre = (up.at(1, 1, 0) + up.at(1, 2, 0) + up.at(2, 1, 0) + up.at(2, 2, 0)) / 4.0;
        assert!((centre - 0.5).abs() < 1e-15);
        assert_eq!(up.at(0, 0, 0), 0.0);
        assert_eq!(up.at(0, 3, 0), 1.0);
    }

    #[test]
    fn odin_identity_and_limits() {
        let params = NetParams::init(3, 5, 4, 3).unwrap();
        let mut rng = crate::rng::SplitMix64::new(4);
        let x = Grid::from_vec(4, 4, 3, (0..48).map(|_| rng.next_f64()).collect()).unwrap();
        let msp = score_msp(&toynet::softmax_map(&toynet::logits(&params, &x).unwrap()));
        assert_eq!(score_odin(&params, &x, 1.0, 0.0).unwrap(), msp);
        let hot = score_odin(&params, &x, 1e9, 0.01).unwrap();
        assert!(hot.data.iter().all(|v| (v - 0.75).abs() < 1e-6));
        assert!(score_odin(&params, &x, 0.0, 0.0).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }
}
