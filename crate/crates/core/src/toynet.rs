//! Per-pixel two-layer classifier with hand-written backpropagation.
//!
//! Every pixel sees its zero-padded `k × k` RGB patch. The first layer (the
//! "encoder") maps the flattened patch to `hidden` rectified units, the second
//! (the "head") maps those to `S` class logits. Both layers run as one GEMM
//! over all pixels of an image.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, Grid, Image, LabelMap, LogitMap, SegMask, SoftmaxMap, IGNORE_LABEL};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensorio::{read_tensor, write_tensor, Tensor};

/// Lower clamp for every logarithm of a probability.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub k: usize,
    pub hidden: usize,
    pub classes: usize,
    /// `hidden × k·k·3`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `classes × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Parameter gradients share the parameter layout.
pub type Gradients = NetParams;

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    k: usize,
    hidden: usize,
    classes: usize,
}

impl NetParams {
    pub fn zeros(k: usize, hidden: usize, classes: usize) -> Self {
        let p = k * k * 3;
        Self {
            k,
            hidden,
            classes,
            w1: vec![0.0; hidden * p],
            b1: vec![0.0; hidden],
            w2: vec![0.0; classes * hidden],
            b2: vec![0.0; classes],
        }
    }

    /// He-scaled Gaussian weights, zero biases.
    pub fn init(k: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(k, hidden, classes);
        params.validate()?;
        let mut rng = SplitMix64::new(seed);
        let s1 = (2.0 / params.patch_len() as f64).sqrt();
        params.w1.iter_mut().for_each(|w| *w = s1 * rng.gaussian());
        let s2 = (2.0 / hidden as f64).sqrt();
        params.w2.iter_mut().for_each(|w| *w = s2 * rng.gaussian());
        Ok(params)
    }

    #[inline]
    pub fn patch_len(&self) -> usize {
        self.k * self.k * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.k % 2 == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("receptive field must be odd and hidden > 0".into()));
        }
        let p = self.patch_len();
        if self.w1.len() != self.hidden * p
            || self.b1.len() != self.hidden
            || self.w2.len() != self.classes * self.hidden
            || self.b2.len() != self.classes
        {
            return Err(Error::ShapeMismatch("parameter arrays disagree with k/hidden/classes".into()));
        }
        if !self.fields().iter().all(|f| f.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(())
    }

    fn fields(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn fields_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// All parameters in a fixed order (w1, b1, w2, b2).
    pub fn flat(&self) -> Vec<f64> {
        self.fields().iter().flat_map(|f| f.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for field in self.fields_mut() {
            let n = field.len();
            field.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }

    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.fields_mut().into_iter().zip(other.fields()) {
            dst.iter_mut().zip(src.iter()).for_each(|(d, s)| *d += scale * s);
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = ParamsHeader { k: self.k, hidden: self.hidden, classes: self.classes };
        let path = dir.join("params.json");
        let text = serde_json::to_string_pretty(&header).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let p = self.patch_len() as u32;
        let (h, s) = (self.hidden as u32, self.classes as u32);
        let tensors = [
            ("w1", vec![h, p], &self.w1),
            ("b1", vec![h], &self.b1),
            ("w2", vec![s, h], &self.w2),
            ("b2", vec![s], &self.b2),
        ];
        for (name, dims, values) in tensors {
            let t = Tensor::from_f32(dims, values.iter().map(|&v| v as f32).collect())?;
            write_tensor(dir.join(format!("{name}.ant")), &t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("params.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: ParamsHeader = serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })?;
        let mut params = Self::zeros(header.k, header.hidden, header.classes);
        for (name, field) in ["w1", "b1", "w2", "b2"].into_iter().zip(params.fields_mut()) {
            let t = read_tensor(dir.join(format!("{name}.ant")))?;
            let values = t.as_f32()?;
            if values.len() != field.len() {
                return Err(Error::ShapeMismatch(format!("{name} has {} values, expected {}", values.len(), field.len())));
            }
            field.iter_mut().zip(values).for_each(|(d, &v)| *d = v as f64);
        }
        params.validate()?;
        Ok(params)
    }
}

/// Row-major `C = op(A)·op(B) + beta·C` with `op(A)` of shape `m × k` and `op(B)` of shape `k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the declared shapes and strides (checked above in debug builds).
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn im2col(image: &Image, k: usize) -> Vec<f64> {
    let (h, w) = (image.height, image.width);
    let p = k * k * 3;
    let half = (k / 2) as i64;
    let mut out = vec![0.0; h * w * p];
    for r in 0..h {
        for c in 0..w {
            let row = &mut out[(r * w + c) * p..(r * w + c + 1) * p];
            for dy in 0..k {
                let rr = r as i64 + dy as i64 - half;
                if rr < 0 || rr >= h as i64 {
                    continue;
                }
                for dx in 0..k {
                    let cc = c as i64 + dx as i64 - half;
                    if cc < 0 || cc >= w as i64 {
                        continue;
                    }
                    let src = (rr as usize * w + cc as usize) * 3;
                    let dst = (dy * k + dx) * 3;
                    row[dst..dst + 3].copy_from_slice(&image.data[src..src + 3]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
fn col2im(cols: &[f64], h: usize, w: usize, k: usize) -> Grid {
    let p = k * k * 3;
    let half = (k / 2) as i64;
    let mut out = Grid::zeros(h, w, 3);
    for r in 0..h {
        for c in 0..w {
            let row = &cols[(r * w + c) * p..(r * w + c + 1) * p];
            for dy in 0..k {
                let rr = r as i64 + dy as i64 - half;
                if rr < 0 || rr >= h as i64 {
                    continue;
                }
                for dx in 0..k {
                    let cc = c as i64 + dx as i64 - half;
                    if cc < 0 || cc >= w as i64 {
                        continue;
                    }
                    let dst = (rr as usize * w + cc as usize) * 3;
                    let src = (dy * k + dx) * 3;
                    for ch in 0..3 {
                        out.data[dst + ch] += row[src + ch];
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dropout {
    Off,
    /// Bernoulli dropout on the hidden layer with inverted scaling.
    On { rate: f64, seed: u64 },
}

struct Activations {
    patches: Vec<f64>,
    /// rectified hidden units before dropout
    hidden: Vec<f64>,
    /// per-unit multiplier applied after rectification (0 or 1/(1-rate)); empty when off
    dropout: Vec<f64>,
    logits: Vec<f64>,
}

fn forward_full(params: &NetParams, image: &Image, dropout: Dropout) -> Result<Activations> {
    if image.channels != 3 {
        return Err(Error::ChannelMismatch { expected: 3, found: image.channels });
    }
    let n = image.pixels();
    let (p, hd, s) = (params.patch_len(), params.hidden, params.classes);
    if params.w1.len() != hd * p || params.w2.len() != s * hd {
        return Err(Error::ShapeMismatch("parameters disagree with their header".into()));
    }
    let patches = im2col(image, params.k);

    let mut hidden: Vec<f64> = (0..n).flat_map(|_| params.b1.iter().copied()).collect();
    gemm(n, p, hd, &patches, false, &params.w1, true, 1.0, &mut hidden);
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));

    let mask = match dropout {
        Dropout::Off => Vec::new(),
        Dropout::On { rate, seed } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
            }
            let keep = 1.0 / (1.0 - rate);
            let mut rng = SplitMix64::new(seed);
            (0..n * hd).map(|_| if rng.next_f64() >= rate { keep } else { 0.0 }).collect()
        }
    };

    let mut logits: Vec<f64> = (0..n).flat_map(|_| params.b2.iter().copied()).collect();
    if mask.is_empty() {
        gemm(n, hd, s, &hidden, false, &params.w2, true, 1.0, &mut logits);
    } else {
        let dropped: Vec<f64> = hidden.iter().zip(&mask).map(|(a, m)| a * m).collect();
        gemm(n, hd, s, &dropped, false, &params.w2, true, 1.0, &mut logits);
    }
    Ok(Activations { patches, hidden, dropout: mask, logits })
}

/// Logits and rectified hidden features (before dropout) for every pixel.
pub fn forward(params: &NetParams, image: &Image, dropout: Dropout) -> Result<(LogitMap, FeatureMap)> {
    let (h, w) = (image.height, image.width);
    let act = forward_full(params, image, dropout)?;
    Ok((
        Grid::from_vec(h, w, params.classes, act.logits)?,
        Grid::from_vec(h, w, params.hidden, act.hidden)?,
    ))
}

pub fn logits(params: &NetParams, image: &Image) -> Result<LogitMap> {
    Ok(forward(params, image, Dropout::Off)?.0)
}

/// Backpropagate `dlogits` through the network. Returns parameter gradients and,
/// if requested, the gradient with respect to the input image.
fn backward(params: &NetParams, act: &Activations, dlogits: &[f64], h: usize, w: usize, want_input: bool) -> (Gradients, Option<Grid>) {
    let n = h * w;
    let (p, hd, s) = (params.patch_len(), params.hidden, params.classes);
    let mut g = NetParams::zeros(params.k, hd, s);

    let used: Vec<f64> = if act.dropout.is_empty() {
        act.hidden.clone()
    } else {
        act.hidden.iter().zip(&act.dropout).map(|(a, m)| a * m).collect()
    };
    gemm(s, n, hd, dlogits, true, &used, false, 0.0, &mut g.w2);
    for px in 0..n {
        for c in 0..s {
            g.b2[c] += dlogits[px * s + c];
        }
    }

    let mut dz = vec![0.0; n * hd];
    gemm(n, s, hd, dlogits, false, &params.w2, false, 0.0, &mut dz);
    for (i, d) in dz.iter_mut().enumerate() {
        let m = if act.dropout.is_empty() { 1.0 } else { act.dropout[i] };
        *d = if act.hidden[i] > 0.0 { *d * m } else { 0.0 };
    }
    gemm(hd, n, p, &dz, true, &act.patches, false, 0.0, &mut g.w1);
    for px in 0..n {
        for j in 0..hd {
            g.b1[j] += dz[px * hd + j];
        }
    }

    let input = want_input.then(|| {
        let mut dx = vec![0.0; n * p];
        gemm(n, hd, p, &dz, false, &params.w1, false, 0.0, &mut dx);
        col2im(&dx, h, w, params.k)
    });
    (g, input)
}

/// Value and gradient of `loss(forward(params, image))` with respect to the parameters.
pub fn param_gradients<F>(params: &NetParams, image: &Image, loss: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&LogitMap) -> Result<(f64, Grid)>,
{
    let act = forward_full(params, image, Dropout::Off)?;
    let map = Grid::from_vec(image.height, image.width, params.classes, act.logits.clone())?;
    let (value, dlogits) = loss(&map)?;
    let (g, _) = backward(params, &act, &dlogits.data, image.height, image.width, false);
    Ok((value, g))
}

/// Exact `∂ scalarfn(forward(x)) / ∂x` for an image `x`.
pub fn input_gradient<F>(params: &NetParams, image: &Image, scalarfn: F) -> Result<(f64, Grid)>
where
    F: FnOnce(&LogitMap) -> (f64, Grid),
{
    let act = forward_full(params, image, Dropout::Off)?;
    let map = Grid::from_vec(image.height, image.width, params.classes, act.logits.clone())?;
    let (value, dlogits) = scalarfn(&map);
    if dlogits.data.len() != act.logits.len() {
        return Err(Error::ShapeMismatch("scalar function gradient does not match logits".into()));
    }
    let (_, dx) = backward(params, &act, &dlogits.data, image.height, image.width, true);
    Ok((value, dx.expect("input gradient requested")))
}

#[inline]
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &y) in out.iter_mut().zip(logits) {
        *o = (y - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub fn softmax_map(logits: &LogitMap) -> SoftmaxMap {
    let mut out = Grid::zeros(logits.height, logits.width, logits.channels);
    let c = logits.channels;
    for (src, dst) in logits.data.chunks_exact(c).zip(out.data.chunks_exact_mut(c)) {
        softmax_into(src, dst);
    }
    out
}

/// Per-pixel argmax; ties go to the smallest class index.
pub fn predict_mask(logits: &LogitMap) -> SegMask {
    let data = logits
        .data
        .chunks_exact(logits.channels)
        .map(|y| {
            let mut best = 0;
            for (s, &v) in y.iter().enumerate() {
                if v > y[best] {
                    best = s;
                }
            }
            best as u8
        })
        .collect();
    LabelMap { height: logits.height, width: logits.width, data }
}

/// Mean cross-entropy over non-ignored pixels, with its gradient on the logits.
pub fn loss_ce(logits: &LogitMap, mask: &LabelMap) -> Result<(f64, Grid)> {
    if mask.data.len() != logits.pixels() {
        return Err(Error::ShapeMismatch("mask and logits differ in size".into()));
    }
    let s = logits.channels;
    let count = mask.data.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let mut grad = Grid::zeros(logits.height, logits.width, s);
    let mut total = 0.0;
    let inv = 1.0 / count as f64;
    for (i, &label) in mask.data.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let label = label as usize;
        if label >= s {
            return Err(Error::InvalidArgument(format!("label {label} outside {s} classes")));
        }
        let y = logits.pixel(i);
        let g = grad.pixel_mut(i);
        softmax_into(y, g);
        let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + y.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - y[label];
        g[label] -= 1.0;
        g.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((total * inv, grad))
}

/// Entropy-maximization loss: mean over all pixels of the average negative
/// log-probability across classes. Minimal (= ln S) at the uniform softmax.
pub fn loss_anom(logits: &LogitMap) -> (f64, Grid) {
    let s = logits.channels;
    let n = logits.pixels();
    let mut grad = Grid::zeros(logits.height, logits.width, s);
    let mut p = vec![0.0; s];
    let mut total = 0.0;
    let scale = 1.0 / (n * s) as f64;
    for i in 0..n {
        softmax_into(logits.pixel(i), &mut p);
        let mut unclamped = 0usize;
        for &q in &p {
            if q >= LOG_CLAMP {
                total -= q.ln();
                unclamped += 1;
            } else {
                total -= LOG_CLAMP.ln();
            }
        }
        let g = grad.pixel_mut(i);
        for j in 0..s {
            let inside = if p[j] >= LOG_CLAMP { 1.0 } else { 0.0 };
            g[j] = -scale * (inside - unclamped as f64 * p[j]);
        }
    }
    (total * scale, grad)
}

/// Distillation loss of extended logits (`S + 1` channels) against the
/// original model's logits (`S` channels). The new softmax runs over all
/// `S + 1` channels and the sum over the original `S`. Pixels where `ignore`
/// carries [`IGNORE_LABEL`] are left out of the mean.
pub fn loss_distill(new: &LogitMap, old: &LogitMap, ignore: Option<&LabelMap>) -> Result<(f64, Grid)> {
    if new.channels != old.channels + 1 {
        return Err(Error::ChannelMismatch { expected: old.channels + 1, found: new.channels });
    }
    if !new.same_plane(old) || ignore.is_some_and(|m| m.data.len() != new.pixels()) {
        return Err(Error::ShapeMismatch("distillation inputs differ in size".into()));
    }
    let s = old.channels;
    let keep = |i: usize| ignore.map_or(true, |m| m.data[i] != IGNORE_LABEL);
    let count = (0..new.pixels()).filter(|&i| keep(i)).count();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let inv = 1.0 / count as f64;
    let mut grad = Grid::zeros(new.height, new.width, s + 1);
    let (mut p, mut q) = (vec![0.0; s], vec![0.0; s + 1]);
    let mut total = 0.0;
    for i in 0..new.pixels() {
        if !keep(i) {
            continue;
        }
        softmax_into(old.pixel(i), &mut p);
        softmax_into(new.pixel(i), &mut q);
        let mut mass = 0.0;
        for c in 0..s {
            total -= p[c] * q[c].max(LOG_CLAMP).ln();
            if q[c] >= LOG_CLAMP {
                mass += p[c];
            }
        }
        let g = grad.pixel_mut(i);
        for j in 0..=s {
            let direct = if j < s && q[j] >= LOG_CLAMP { p[j] } else { 0.0 };
            g[j] = -inv * (direct - q[j] * mass);
        }
    }
    Ok((total * inv, grad))
}

/// A training image with its per-pixel labels.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub image: &'a Image,
    pub mask: &'a LabelMap,
}

/// `(1 − λ)·mean J^CE over batch_d + λ·mean J^anom over batch_anom`, with
/// parameter gradients combined the same way.
pub fn loss_total_entmax(batch_d: &[Example], batch_anom: &[&Image], lambda: f64, params: &NetParams) -> Result<(f64, Gradients)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    if batch_d.is_empty() && lambda < 1.0 {
        return Err(Error::EmptyBatch);
    }
    if batch_anom.is_empty() && lambda > 0.0 {
        return Err(Error::EmptyBatch);
    }
    let mut jobs: Vec<Job> = Vec::new();
    if lambda < 1.0 {
        let wt = (1.0 - lambda) / batch_d.len() as f64;
        jobs.extend(batch_d.iter().map(|e| Job { image: e.image, term: Term::Ce(e.mask), weight: wt }));
    }
    if lambda > 0.0 {
        let wt = lambda / batch_anom.len() as f64;
        jobs.extend(batch_anom.iter().map(|&image| Job { image, term: Term::Anom, weight: wt }));
    }
    run_jobs(params, &jobs)
}

#[derive(Clone, Copy)]
enum Term<'a> {
    Ce(&'a LabelMap),
    Anom,
    /// cross-entropy on (pseudo-)labels plus distillation against teacher logits
    Incremental { mask: &'a LabelMap, teacher: &'a LogitMap, lambda: f64 },
}

struct Job<'a> {
    image: &'a Image,
    term: Term<'a>,
    weight: f64,
}

fn job_gradient(params: &NetParams, job: &Job) -> Result<(f64, Gradients)> {
    param_gradients(params, job.image, |y| {
        let (value, mut grad) = match job.term {
            Term::Ce(mask) => loss_ce(y, mask)?,
            Term::Anom => loss_anom(y),
            Term::Incremental { mask, teacher, lambda } => {
                let (ce, gce) = loss_ce(y, mask)?;
                let (d, gd) = loss_distill(y, teacher, Some(mask))?;
                let data = gce.data.iter().zip(&gd.data).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
                ((1.0 - lambda) * ce + lambda * d, Grid { data, ..gce })
            }
        };
        grad.data.iter_mut().for_each(|g| *g *= job.weight);
        Ok((value * job.weight, grad))
    })
}

/// Per-image gradients in parallel, reduced in job order so the sum is deterministic.
fn run_jobs(params: &NetParams, jobs: &[Job]) -> Result<(f64, Gradients)> {
    let parts: Vec<(f64, Gradients)> = jobs.par_iter().map(|j| job_gradient(params, j)).collect::<Result<_>>()?;
    let mut total = NetParams::zeros(params.k, params.hidden, params.classes);
    let mut value = 0.0;
    for (v, g) in &parts {
        value += v;
        total.add_scaled(g, 1.0);
    }
    Ok((value, total))
}

#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Plain cross-entropy on the labeled set.
    CrossEntropy,
    /// Cross-entropy on the labeled set mixed with entropy maximization on
    /// proxy-anomaly images.
    EntropyMax { lambda: f64, anomaly: &'a [&'a Image] },
    /// Cross-entropy on (pseudo-)labels mixed with distillation against a
    /// teacher with one class fewer.
    Incremental { lambda: f64, teacher: &'a NetParams },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.05, momentum: 0.9, batch_size: 8, seed: 0, freeze_encoder: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: NetParams,
    /// Mean objective value per epoch.
    pub loss_trace: Vec<f64>,
}

/// Mini-batch SGD with momentum over shuffled data. Deterministic given `config.seed`.
pub fn train(params: &NetParams, data: &[Example], objective: Objective, config: &TrainConfig) -> Result<TrainOutcome> {
    params.validate()?;
    if config.lr <= 0.0 || !config.lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", config.lr)));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.momentum) {
        return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", config.momentum)));
    }
    let mut params = params.clone();
    if config.epochs == 0 {
        return Ok(TrainOutcome { params, loss_trace: Vec::new() });
    }
    if data.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }

    let teacher_logits: Vec<LogitMap> = match objective {
        Objective::Incremental { lambda, teacher } => {
            check_lambda(lambda)?;
            if teacher.classes + 1 != params.classes {
                return Err(Error::ChannelMismatch { expected: teacher.classes + 1, found: params.classes });
            }
            data.par_iter().map(|e| logits(teacher, e.image)).collect::<Result<_>>()?
        }
        Objective::EntropyMax { lambda, anomaly } => {
            check_lambda(lambda)?;
            if anomaly.is_empty() && lambda > 0.0 {
                return Err(Error::EmptyBatch);
            }
            Vec::new()
        }
        Objective::CrossEntropy => Vec::new(),
    };

    let mut rng = SplitMix64::new(config.seed);
    let mut velocity = NetParams::zeros(params.k, params.hidden, params.classes);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut anom_order: Vec<usize> = match objective {
        Objective::EntropyMax { anomaly, .. } => (0..anomaly.len()).collect(),
        _ => Vec::new(),
    };
    let mut anom_cursor = anom_order.len();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let (value, grad) = match objective {
                Objective::CrossEntropy => {
                    let w = 1.0 / batch.len() as f64;
                    let jobs: Vec<Job> =
                        batch.iter().map(|&i| Job { image: data[i].image, term: Term::Ce(data[i].mask), weight: w }).collect();
                    run_jobs(&params, &jobs)?
                }
                Objective::EntropyMax { lambda, anomaly } => {
                    let batch_d: Vec<Example> = batch.iter().map(|&i| data[i]).collect();
                    let mut batch_anom = Vec::with_capacity(config.batch_size);
                    while lambda > 0.0 && batch_anom.len() < config.batch_size.min(anomaly.len()) {
                        if anom_cursor == anom_order.len() {
                            rng.shuffle(&mut anom_order);
                            anom_cursor = 0;
                        }
                        batch_anom.push(anomaly[anom_order[anom_cursor]]);
                        anom_cursor += 1;
                    }
                    loss_total_entmax(&batch_d, &batch_anom, lambda, &params)?
                }
                Objective::Incremental { lambda, .. } => {
                    let w = 1.0 / batch.len() as f64;
                    let jobs: Vec<Job> = batch
                        .iter()
                        .map(|&i| Job {
                            image: data[i].image,
                            term: Term::Incremental { mask: data[i].mask, teacher: &teacher_logits[i], lambda },
                            weight: w,
                        })
                        .collect();
                    run_jobs(&params, &jobs)?
                }
            };
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: value });
            }
            sgd_step(&mut params, &mut velocity, &grad, config);
            if !params.fields().iter().all(|f| f.iter().all(|v| v.is_finite())) {
                return Err(Error::Divergence { epoch, step, loss: f64::NAN });
            }
            epoch_loss += value;
            steps += 1;
        }
        trace.push(epoch_loss / steps as f64);
    }
    Ok(TrainOutcome { params, loss_trace: trace })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")))
    }
}

fn sgd_step(params: &mut NetParams, velocity: &mut NetParams, grad: &Gradients, config: &TrainConfig) {
    let skip = if config.freeze_encoder { 2 } else { 0 };
    let fields = params.fields_mut().into_iter().zip(velocity.fields_mut()).zip(grad.fields());
    for ((p, v), g) in fields.skip(skip) {
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
            *v = config.momentum * *v + g;
            *p -= config.lr * *v;
        }
    }
}

/// Add one output class. The new head row and bias are scale-0.01 Gaussian draws
/// from a stream keyed by `init_seed` and the new class index; everything else is copied.
pub fn extend_head(params: &NetParams, init_seed: u64) -> NetParams {
    let mut out = params.clone();
    let class = params.classes as u64;
    let mut rng = SplitMix64::new(derive_seed(init_seed, class));
    out.w2.extend((0..params.hidden).map(|_| 0.01 * rng.gaussian()));
    out.b2.push(0.01 * rng.gaussian());
    out.classes += 1;
    out
}
