//! Information-theoretic quantities on vector data, all in nats.

use crate::error::{Error, Result};
use crate::linalg::{backward_substitute_transposed, cholesky, forward_substitute};
use crate::rng::SplitMix64;
use crate::toynet::LOG_CLAMP;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const RIDGE: f64 = 1e-6;

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    dim: usize,
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
    log_det: f64,
}

impl GaussianModel {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 || cov.len() != dim * dim {
            return Err(Error::ShapeMismatch(format!("mean of length {dim} with {} covariance entries", cov.len())));
        }
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (cov[i * dim + j], cov[j * dim + i]);
                if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidArgument("covariance is not symmetric".into()));
                }
            }
        }
        let chol = cholesky(&cov, dim).ok_or(Error::NotPositiveDefinite)?;
        let log_det = 2.0 * (0..dim).map(|i| chol[i * dim + i].ln()).sum::<f64>();
        Ok(Self { dim, mean, cov, chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `(z − μ)ᵀ Σ⁻¹ (z − μ)`.
    pub fn quadratic_form(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dim);
        let mut v: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        forward_substitute(&self.chol, self.dim, &mut v);
        v.iter().map(|x| x * x).sum()
    }

    /// `Σ⁻¹ (z − μ)`.
    pub fn precision_times_centered(&self, z: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        forward_substitute(&self.chol, self.dim, &mut v);
        backward_substitute_transposed(&self.chol, self.dim, &mut v);
        v
    }

    /// Negative log density `I(z) = −log p(z)`.
    pub fn information(&self, z: &[f64]) -> f64 {
        0.5 * self.dim as f64 * LN_2PI + 0.5 * self.log_det + 0.5 * self.quadratic_form(z)
    }
}

pub fn gaussian_information(model: &GaussianModel, z: &[f64]) -> f64 {
    model.information(z)
}

/// Sample mean and unbiased covariance of `n` row-major samples of dimension `d`.
/// A ridge of 1e-6·I is added when the empirical covariance is singular.
pub fn fit_gaussian(samples: &[f64], d: usize) -> Result<GaussianModel> {
    if d == 0 || samples.len() % d != 0 {
        return Err(Error::ShapeMismatch(format!("{} values are not rows of length {d}", samples.len())));
    }
    let n = samples.len() / d;
    if n < 2 {
        return Err(Error::InsufficientSamples { n, d });
    }
    let mut mean = vec![0.0; d];
    for row in samples.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in samples.chunks_exact(d) {
        centered.iter_mut().zip(row.iter().zip(&mean)).for_each(|(c, (x, m))| *c = x - m);
        for i in 0..d {
            let ci = centered[i];
            for j in 0..=i {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    match GaussianModel::new(mean.clone(), cov.clone()) {
        Ok(model) => Ok(model),
        Err(Error::NotPositiveDefinite) => {
            for i in 0..d {
                cov[i * d + i] += RIDGE;
            }
            GaussianModel::new(mean, cov).map_err(|e| match e {
                Error::NotPositiveDefinite if n <= d => Error::InsufficientSamples { n, d },
                other => other,
            })
        }
        Err(e) => Err(e),
    }
}

/// `I(z) − I^anom(z)`: the negative log density ratio of data versus reference.
pub fn relative_information(p: &GaussianModel, p_anom: &GaussianModel, z: &[f64]) -> f64 {
    p.information(z) - p_anom.information(z)
}

/// Logistic estimate of `P(anom | z)` with the class prior it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryOddsClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    prior: f64,
}

impl BinaryOddsClassifier {
    pub fn new(weights: Vec<f64>, bias: f64, prior: f64) -> Result<Self> {
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::InvalidArgument(format!("prior {prior} must lie strictly inside (0, 1)")));
        }
        Ok(Self { weights, bias, prior })
    }

    pub fn prior(&self) -> f64 {
        self.prior
    }

    /// Clamped posterior `p̂(anom | z)`.
    pub fn posterior(&self, z: &[f64]) -> f64 {
        let t: f64 = self.bias + self.weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>();
        (1.0 / (1.0 + (-t).exp())).clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
    }

    /// Prior log-odds correction `c = −log(P / (1 − P))`.
    pub fn prior_offset(&self) -> f64 {
        -(self.prior / (1.0 - self.prior)).ln()
    }
}

/// Relative information from posterior odds: `−log((1 − p̂)/p̂) + c`.
pub fn classifier_relative_information(clf: &BinaryOddsClassifier, z: &[f64]) -> f64 {
    let p = clf.posterior(z);
    -((1.0 - p) / p).ln() + clf.prior_offset()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("significance level {alpha} outside (0, 1)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestOutcome {
    pub flagged: bool,
    /// Estimated probability of exceeding the tested information.
    pub fraction: f64,
}

/// Extremal-statistic outlier test. The distribution of the training maximum
/// is estimated by `resamples` bootstrap draws; `z` is an outlier iff the
/// fraction of bootstrap maxima exceeding `info` is at most `alpha`.
pub fn outlier_test(train_informations: &[f64], info: f64, alpha: f64, resamples: usize, seed: u64) -> Result<TestOutcome> {
    check_alpha(alpha)?;
    if train_informations.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if resamples == 0 {
        return Err(Error::InvalidArgument("need at least one bootstrap resample".into()));
    }
    let n = train_informations.len();
    let mut rng = SplitMix64::new(seed);
    let mut exceed = 0usize;
    for _ in 0..resamples {
        let max = (0..n).map(|_| train_informations[rng.below(n)]).fold(f64::NEG_INFINITY, f64::max);
        if max > info {
            exceed += 1;
        }
    }
    let fraction = exceed as f64 / resamples as f64;
    Ok(TestOutcome { flagged: fraction <= alpha, fraction })
}

/// Novelty test: `z` is novel iff the fraction of training informations
/// strictly above `info` is at most `alpha`.
pub fn novelty_test(train_informations: &[f64], info: f64, alpha: f64) -> Result<TestOutcome> {
    check_alpha(alpha)?;
    if train_informations.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let above = train_informations.iter().filter(|&&v| v > info).count();
    let fraction = above as f64 / train_informations.len() as f64;
    Ok(TestOutcome { flagged: fraction <= alpha, fraction })
}

/// Shannon entropy `−Σ p log p` with the usual `0 log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Expected information `E(x) + I^rel(x) + b`, with `b = −log S` for the
/// relative variant (non-informative anomaly conditional) and 0 otherwise.
pub fn expected_information(cond_probs: &[f64], info_rel_x: f64, relative: bool, classes: usize) -> Result<f64> {
    if cond_probs.len() != classes || classes == 0 {
        return Err(Error::ShapeMismatch(format!("{} probabilities for {classes} classes", cond_probs.len())));
    }
    let sum: f64 = cond_probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || cond_probs.iter().any(|&p| p < 0.0) {
        return Err(Error::NotNormalized(sum));
    }
    let offset = if relative { -(classes as f64).ln() } else { 0.0 };
    Ok(entropy(cond_probs) + info_rel_x + offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn identity(d: usize) -> Vec<f64> {
        (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn information_examples() {
        let m = GaussianModel::new(vec![0.0, 0.0], identity(2)).unwrap();
        assert!((m.information(&[0.0, 0.0]) - (2.0 * PI).ln()).abs() < 1e-12);
        assert!((m.information(&[3.0, 4.0]) - ((2.0 * PI).ln() + 12.5)).abs() < 1e-12);
        let m = GaussianModel::new(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 1.0]).unwrap();
        let expected = (2.0 * PI).ln() + 0.5 * 4f64.ln() + 0.5;
        assert!((m.information(&[2.0, 0.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_covariances() {
        assert!(matches!(GaussianModel::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]), Err(Error::NotPositiveDefinite)));
        assert!(GaussianModel::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.0, 1.0]).is_err());
    }

    #[test]
    fn fit_examples() {
        let m = fit_gaussian(&[0.0, 0.0, 2.0, 0.0], 2).unwrap();
        assert_eq!(m.mean(), &[1.0, 0.0]);

        let mut rng = SplitMix64::new(1);
        let data: Vec<f64> = (0..20_000).map(|_| rng.gaussian()).collect();
        let m = fit_gaussian(&data, 2).unwrap();
        assert!(m.mean().iter().map(|x| x * x).sum::<f64>().sqrt() < 0.05);
        for (i, v) in m.cov().iter().enumerate() {
            let target = if i % 3 == 0 { 1.0 } else { 0.0 };
            assert!((v - target).abs() < 0.1);
        }

        let constant = vec![1.5; 30];
        let m = fit_gaussian(&constant, 3).unwrap();
        assert!(m.information(&[1.5, 1.5, 1.5]).is_finite());
        assert!(m.information(&[2.0, 1.0, 0.0]).is_finite());

        assert!(matches!(fit_gaussian(&[1.0, 2.0], 2), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn relative_information_examples() {
        let p = GaussianModel::new(vec![0.3, -1.0], vec![2.0, 0.3, 0.3, 1.0]).unwrap();
        assert_eq!(relative_information(&p, &p, &[0.1, 5.0]), 0.0);
        let p = GaussianModel::new(vec![0.0], vec![1.0]).unwrap();
        let q = GaussianModel::new(vec![0.0], vec![4.0]).unwrap();
        assert!((relative_information(&p, &q, &[0.0]) + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classifier_examples() {
        let clf = BinaryOddsClassifier::new(vec![0.0], 0.0, 0.5).unwrap();
        assert!(classifier_relative_information(&clf, &[3.0]).abs() < 1e-15);
        let clf = BinaryOddsClassifier::new(vec![0.0], 0.0, 0.1).unwrap();
        assert!((classifier_relative_information(&clf, &[3.0]) - 9f64.ln()).abs() < 1e-12);
        assert!(BinaryOddsClassifier::new(vec![], 0.0, 1.0).is_err());
    }

    #[test]
    fn novelty_examples() {
        let infos: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!(!novelty_test(&infos, -1e300, 0.05).unwrap().flagged);
        assert!(novelty_test(&infos, 1e300, 0.05).unwrap().flagged);
        let r = novelty_test(&infos, 96.0, 0.05).unwrap();
        assert!((r.fraction - 0.04).abs() < 1e-15 && r.flagged);
        assert!(matches!(novelty_test(&[], 1.0, 0.05), Err(Error::EmptyTrainingSet)));
    }

    #[test]
    fn outlier_examples() {
        let infos: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!(!outlier_test(&infos, 0.5, 0.99, 200, 1).unwrap().flagged);
        assert!(outlier_test(&infos, 100.5, 0.01, 200, 1).unwrap().flagged);
        // P(max of 100 resamples > 99.5) = 1 − 0.99^100
        let exact = 1.0 - 0.99f64.powi(100);
        let r = outlier_test(&infos, 99.5, 0.05, 1000, 7).unwrap();
        assert!((r.fraction - exact).abs() <= 0.03, "fraction {} vs {exact}", r.fraction);
        assert_eq!(r.flagged, exact <= 0.05);
        assert!(outlier_test(&infos, 1.0, 1.0, 10, 1).is_err());
    }

    #[test]
    fn expected_information_examples() {
        assert!(expected_information(&[0.25; 4], 0.0, true, 4).unwrap().abs() < 1e-15);
        assert_eq!(expected_information(&[0.0, 1.0, 0.0], 2.0, false, 3).unwrap(), 2.0);
        assert!(matches!(expected_information(&[0.5, 0.4], 0.0, false, 2), Err(Error::NotNormalized(_))));
    }
}
