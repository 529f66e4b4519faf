//! End-to-end experiments on a generated world: the pixel-level scoring
//! benchmark, segment-level meta classification, and novel-class discovery
//! followed by incremental training.

use anomseg::discovery::{
    self, dbscan, embed_crops, extract_components, normalize_embedding, pca_reduce, pseudo_labels, rehearsal_quota, select_cluster,
    tsne, AnomalyComponent, ClusterSet, DensityStatistic, RehearsalPlan, TsneConfig,
};
use anomseg::evalmetrics::{build_evalset, roc_pr_curves, CurveResult, Summary};
use anomseg::infostat::GaussianModel;
use anomseg::rng::derive_seed;
use anomseg::scoring::{self, AnomalyMap, ClassGaussians, Method};
use anomseg::segments::{
    meta_delta, meta_fit, object_level_counts, scored_segments, MetaConfig, MetaModel, ObjectCounts, SceneOutputs,
    Segment,
};
use anomseg::synthworld::{generate_split, load_split, LabeledScene, WorldConfig};
use anomseg::tensorio::{DatasetManifest, Split};
use anomseg::toynet::{self, Dropout, Example, NetParams, Objective, TrainConfig};
use anomseg::{Error, Grid, LabelMap, Result, IGNORE_LABEL};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// Stream tags for everything derived from the run seed.
const TAG_INIT: u64 = 10;
const TAG_BASE: u64 = 11;
const TAG_ENTMAX: u64 = 12;
const TAG_VOID: u64 = 13;
const TAG_MC: u64 = 20;
const TAG_TSNE: u64 = 30;
const TAG_QUOTA: u64 = 31;
const TAG_HEAD: u64 = 32;
const TAG_INCREMENTAL: u64 = 33;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    pub tau: f64,
    pub min_component: usize,
    pub pca_dims: usize,
    pub perplexity: f64,
    pub tsne_iterations: usize,
    pub tsne_lr: f64,
    /// DBSCAN radius in units of the median nearest-neighbor distance.
    pub eps: f64,
    /// DBSCAN core threshold; `None` means `max(4, count / 10)`.
    pub delta: Option<usize>,
    pub statistic: DensityStatistic,
    pub min_cluster: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            tau: 0.8,
            min_component: discovery::MIN_COMPONENT_SIZE,
            pca_dims: 16,
            perplexity: 10.0,
            tsne_iterations: 1000,
            tsne_lr: 100.0,
            eps: 2.5,
            delta: None,
            statistic: DensityStatistic::Max,
            min_cluster: 4,
        }
    }
}

impl DiscoveryConfig {
    pub fn delta_for(&self, count: usize) -> usize {
        self.delta.unwrap_or_else(|| (count / 10).max(4))
    }
}

/// Every knob of the three experiments. Training seeds inside the
/// [`TrainConfig`] fields are ignored; they are derived from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    pub world: WorldConfig,
    pub n_train: usize,
    pub n_proxy: usize,
    pub n_test: usize,
    /// Independent test-split scenes used only to fit the meta model.
    pub n_meta: usize,
    pub n_novel: usize,
    pub n_novel_eval: usize,
    /// Training scenes used for the Gaussian feature fits.
    pub n_fit: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub base: TrainConfig,
    /// Entropy-maximization fine-tuning.
    pub finetune: TrainConfig,
    /// Void-class fine-tuning.
    pub void: TrainConfig,
    pub lambda: f64,
    pub mc_rate: f64,
    pub mc_samples: usize,
    pub odin_t: f64,
    pub odin_eps: f64,
    pub segment_tau: f64,
    pub meta: MetaConfig,
    pub discovery: DiscoveryConfig,
    pub incremental: TrainConfig,
    pub incremental_lambda: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            n_train: 200,
            n_proxy: 100,
            n_test: 100,
            n_meta: 100,
            n_novel: 60,
            n_novel_eval: 40,
            n_fit: 50,
            kernel: 5,
            hidden: 32,
            base: TrainConfig { epochs: 30, ..TrainConfig::default() },
            finetune: TrainConfig { epochs: 40, lr: 0.02, ..TrainConfig::default() },
            void: TrainConfig { epochs: 10, ..TrainConfig::default() },
            lambda: 0.5,
            mc_rate: 0.25,
            mc_samples: 8,
            odin_t: 1000.0,
            odin_eps: 0.0014,
            segment_tau: 0.3,
            meta: MetaConfig::default(),
            discovery: DiscoveryConfig::default(),
            incremental: TrainConfig { epochs: 60, freeze_encoder: true, ..TrainConfig::default() },
            incremental_lambda: 0.5,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        for (name, v) in [("lambda", self.lambda), ("incremental_lambda", self.incremental_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.mc_rate) || self.mc_samples < 2 {
            return Err(Error::InvalidArgument("MC dropout needs rate in [0, 1) and at least 2 samples".into()));
        }
        if self.odin_t <= 0.0 {
            return Err(Error::InvalidArgument("ODIN temperature must be positive".into()));
        }
        if self.discovery.eps <= 0.0 || self.discovery.perplexity <= 0.0 {
            return Err(Error::InvalidArgument("DBSCAN eps and t-SNE perplexity must be positive".into()));
        }
        Ok(())
    }
}

fn seeded(config: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..config.clone() }
}

pub struct World {
    pub train: Vec<LabeledScene>,
    pub proxy: Vec<LabeledScene>,
    pub test: Vec<LabeledScene>,
    pub meta: Vec<LabeledScene>,
    pub novel: Vec<LabeledScene>,
    pub novel_eval: Vec<LabeledScene>,
}

impl World {
    /// Split full test and novel streams: the last `n_meta` test scenes fit
    /// the meta model, the last `n_novel_eval` novel scenes are held out for
    /// evaluating the extended model.
    pub fn from_splits(
        p: &Protocol,
        train: Vec<LabeledScene>,
        proxy: Vec<LabeledScene>,
        mut test: Vec<LabeledScene>,
        mut novel: Vec<LabeledScene>,
    ) -> Result<World> {
        if test.len() <= p.n_meta || novel.len() <= p.n_novel_eval {
            return Err(Error::InvalidArgument(format!(
                "need more than {} test and {} novel scenes, found {} and {}",
                p.n_meta,
                p.n_novel_eval,
                test.len(),
                novel.len()
            )));
        }
        let meta = test.split_off(test.len() - p.n_meta);
        let novel_eval = novel.split_off(novel.len() - p.n_novel_eval);
        Ok(World { train, proxy, test, meta, novel, novel_eval })
    }

    pub fn load(p: &Protocol, manifest: &DatasetManifest) -> Result<World> {
        let split = |s| load_split(manifest, s);
        World::from_splits(p, split(Split::Train)?, split(Split::ProxyAnom)?, split(Split::Test)?, split(Split::Novel)?)
    }

    /// Every scene in the order [`World::load`] expects.
    pub fn all_scenes(&self) -> impl Iterator<Item = &LabeledScene> {
        self.train.iter().chain(&self.proxy).chain(&self.test).chain(&self.meta).chain(&self.novel).chain(&self.novel_eval)
    }
}

pub fn generate_world(p: &Protocol, seed: u64) -> Result<World> {
    let w = &p.world;
    World::from_splits(
        p,
        generate_split(w, seed, Split::Train, p.n_train)?,
        generate_split(w, seed, Split::ProxyAnom, p.n_proxy)?,
        generate_split(w, seed, Split::Test, p.n_test + p.n_meta)?,
        generate_split(w, seed, Split::Novel, p.n_novel + p.n_novel_eval)?,
    )
}

pub fn examples(scenes: &[LabeledScene]) -> Vec<Example<'_>> {
    scenes.iter().map(|s| Example { image: &s.image, mask: &s.mask }).collect()
}

/// Cross-entropy training from a seeded initialization.
pub fn train_baseline(p: &Protocol, train: &[LabeledScene], seed: u64) -> Result<NetParams> {
    let init = NetParams::init(p.kernel, p.hidden, p.world.classes, derive_seed(seed, TAG_INIT))?;
    let config = seeded(&p.base, derive_seed(seed, TAG_BASE));
    Ok(toynet::train(&init, &examples(train), Objective::CrossEntropy, &config)?.params)
}

/// Fine-tune with entropy maximization on proxy-anomaly scenes.
pub fn train_entmax(p: &Protocol, baseline: &NetParams, train: &[LabeledScene], proxy: &[LabeledScene], seed: u64) -> Result<NetParams> {
    let anomaly: Vec<_> = proxy.iter().map(|s| &s.image).collect();
    let config = seeded(&p.finetune, derive_seed(seed, TAG_ENTMAX));
    let objective = Objective::EntropyMax { lambda: p.lambda, anomaly: &anomaly };
    Ok(toynet::train(baseline, &examples(train), objective, &config)?.params)
}

/// Add a void class and fine-tune with every proxy-anomaly pixel labeled void.
pub fn train_void(p: &Protocol, baseline: &NetParams, train: &[LabeledScene], proxy: &[LabeledScene], seed: u64) -> Result<NetParams> {
    let void = baseline.classes as u8;
    let void_masks: Vec<LabelMap> = proxy.iter().map(|s| LabelMap::filled(s.mask.height, s.mask.width, void)).collect();
    let mut data = examples(train);
    data.extend(proxy.iter().zip(&void_masks).map(|(s, m)| Example { image: &s.image, mask: m }));
    let extended = toynet::extend_head(baseline, derive_seed(seed, TAG_VOID));
    let config = seeded(&p.void, derive_seed(seed, TAG_VOID));
    Ok(toynet::train(&extended, &data, Objective::CrossEntropy, &config)?.params)
}

pub struct Models {
    pub baseline: NetParams,
    pub entmax: NetParams,
    pub void: NetParams,
}

pub fn train_models(p: &Protocol, world: &World, seed: u64) -> Result<Models> {
    let baseline = train_baseline(p, &world.train, seed)?;
    let entmax = train_entmax(p, &baseline, &world.train, &world.proxy, seed)?;
    let void = train_void(p, &baseline, &world.train, &world.proxy, seed)?;
    Ok(Models { baseline, entmax, void })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Baseline,
    Entmax,
    Void,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Entmax => "entmax",
            ModelKind::Void => "void",
        }
    }

    pub fn pick(self, models: &Models) -> &NetParams {
        match self {
            ModelKind::Baseline => &models.baseline,
            ModelKind::Entmax => &models.entmax,
            ModelKind::Void => &models.void,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ModelKind::Baseline, ModelKind::Entmax, ModelKind::Void]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model {s:?}")))
    }
}

impl Models {
    pub fn all(&self) -> Vec<(ModelKind, &NetParams)> {
        [ModelKind::Baseline, ModelKind::Entmax, ModelKind::Void].into_iter().map(|k| (k, k.pick(self))).collect()
    }
}

/// Every scorer on the model it belongs to, plus the entropy score of the
/// entropy-maximized model.
pub fn default_entries() -> Vec<(Method, ModelKind)> {
    let mut entries: Vec<_> = Method::ALL
        .into_iter()
        .map(|m| (m, if m == Method::Void { ModelKind::Void } else { ModelKind::Baseline }))
        .collect();
    entries.push((Method::Entropy, ModelKind::Entmax));
    entries
}

/// Gaussian fits over penultimate features of training scenes.
pub struct FeatureModels {
    pub classes: ClassGaussians,
    pub pooled: GaussianModel,
}

pub fn fit_feature_models(model: &NetParams, scenes: &[LabeledScene]) -> Result<FeatureModels> {
    let features: Vec<Grid> =
        scenes.par_iter().map(|s| Ok(toynet::forward(model, &s.image, Dropout::Off)?.1)).collect::<Result<_>>()?;
    let pairs: Vec<(&Grid, &LabelMap)> = features.iter().zip(scenes).map(|(f, s)| (f, &s.mask)).collect();
    Ok(FeatureModels {
        classes: scoring::fit_class_gaussians(&pairs, model.classes)?,
        pooled: scoring::fit_pooled_gaussian(&pairs)?,
    })
}

/// Anomaly map of one image. `seed` drives MC dropout only.
pub fn score_image(
    p: &Protocol,
    method: Method,
    model: &NetParams,
    features: Option<&FeatureModels>,
    image: &Grid,
    seed: u64,
) -> Result<AnomalyMap> {
    let need_features = || features.ok_or_else(|| Error::InvalidArgument(format!("{method} needs fitted feature models")));
    match method {
        Method::Odin => scoring::score_odin(model, image, p.odin_t, p.odin_eps),
        Method::McDropout => {
            let samples = scoring::mc_dropout_samples(model, image, p.mc_rate, p.mc_samples, seed)?;
            scoring::score_mc_dropout(&samples)
        }
        Method::Mahalanobis => {
            let (_, f) = toynet::forward(model, image, Dropout::Off)?;
            scoring::score_mahalanobis(&f, &need_features()?.classes)
        }
        Method::Density => {
            let (_, f) = toynet::forward(model, image, Dropout::Off)?;
            scoring::score_embedding_density(&f, &need_features()?.pooled, image.height, image.width)
        }
        Method::Msp | Method::Entropy | Method::Margin | Method::Void => {
            let probs = toynet::softmax_map(&toynet::logits(model, image)?);
            Ok(match method {
                Method::Msp => scoring::score_msp(&probs),
                Method::Entropy => scoring::score_entropy(&probs, true),
                Method::Margin => scoring::score_margin(&probs),
                _ => scoring::score_void(&probs, p.world.classes)?,
            })
        }
    }
}

/// Score maps for every scene; scene `i` uses MC-dropout seed `derive_seed(seed, i)`.
pub fn score_scenes(
    p: &Protocol,
    method: Method,
    model: &NetParams,
    features: Option<&FeatureModels>,
    scenes: &[LabeledScene],
    seed: u64,
) -> Result<Vec<AnomalyMap>> {
    let seed = derive_seed(seed, TAG_MC);
    (0..scenes.len())
        .into_par_iter()
        .map(|i| score_image(p, method, model, features, &scenes[i].image, derive_seed(seed, i as u64)))
        .collect()
}

pub fn evaluate_maps(maps: &[AnomalyMap], scenes: &[LabeledScene]) -> Result<CurveResult> {
    let map_refs: Vec<&Grid> = maps.iter().collect();
    let ann: Vec<&LabelMap> = scenes.iter().map(|s| &s.anomaly_mask).collect();
    roc_pr_curves(&build_evalset(&map_refs, &ann, None)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub method: Method,
    pub model: ModelKind,
    pub curve: CurveResult,
}

impl BenchmarkRow {
    pub fn summary(&self) -> Summary {
        self.curve.summary()
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.method, self.model.as_str())
    }
}

/// Score `test` with every entry whose model is available; feature models are
/// fitted on `fit` scenes.
pub fn benchmark(
    p: &Protocol,
    models: &[(ModelKind, &NetParams)],
    test: &[LabeledScene],
    fit: &[LabeledScene],
    entries: &[(Method, ModelKind)],
    seed: u64,
) -> Result<Vec<BenchmarkRow>> {
    let lookup = |kind: ModelKind| {
        models
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, m)| *m)
            .ok_or_else(|| Error::InvalidArgument(format!("no {} model supplied", kind.as_str())))
    };
    let mut fitted: Vec<(ModelKind, FeatureModels)> = Vec::new();
    for &(_, kind) in entries.iter().filter(|(m, _)| matches!(m, Method::Mahalanobis | Method::Density)) {
        if !fitted.iter().any(|(k, _)| *k == kind) {
            fitted.push((kind, fit_feature_models(lookup(kind)?, fit)?));
        }
    }
    entries
        .iter()
        .map(|&(method, kind)| {
            let features = fitted.iter().find(|(k, _)| *k == kind).map(|(_, f)| f);
            let maps = score_scenes(p, method, lookup(kind)?, features, test, seed)?;
            Ok(BenchmarkRow { method, model: kind, curve: evaluate_maps(&maps, test)? })
        })
        .collect()
}

/// Mean normalized softmax entropy over held-out anomaly pixels.
pub fn anomaly_entropy(model: &NetParams, scenes: &[LabeledScene]) -> Result<f64> {
    let sums: Vec<(f64, usize)> = scenes
        .par_iter()
        .map(|s| {
            let probs = toynet::softmax_map(&toynet::logits(model, &s.image)?);
            let h = scoring::score_entropy(&probs, true);
            let mut acc = (0.0, 0usize);
            for (v, &a) in h.data.iter().zip(&s.anomaly_mask.data) {
                if a == 1 {
                    acc.0 += v;
                    acc.1 += 1;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let (total, count) = sums.iter().fold((0.0, 0), |(t, c), (a, b)| (t + a, c + b));
    if count == 0 {
        return Err(Error::EmptyEvalSet);
    }
    Ok(total / count as f64)
}

/// Softmax output, prediction and normalized-entropy anomaly map of one scene.
pub struct SceneAnalysis {
    pub probs: Grid,
    pub predicted: LabelMap,
    pub anomaly: AnomalyMap,
}

pub fn analyse(model: &NetParams, images: &[&Grid]) -> Result<Vec<SceneAnalysis>> {
    images
        .par_iter()
        .map(|image| {
            let logits = toynet::logits(model, image)?;
            let probs = toynet::softmax_map(&logits);
            let anomaly = scoring::score_entropy(&probs, true);
            Ok(SceneAnalysis { predicted: toynet::predict_mask(&logits), probs, anomaly })
        })
        .collect()
}

pub fn scene_outputs<'a>(analysis: &'a [SceneAnalysis], scenes: &'a [LabeledScene]) -> Vec<SceneOutputs<'a>> {
    analysis
        .iter()
        .zip(scenes)
        .map(|(a, s)| SceneOutputs { anomaly: &a.anomaly, probs: &a.probs, predicted: &a.predicted, gt_anomaly: &s.anomaly_mask })
        .collect()
}

/// Meta model on segments of `{a ≥ tau}` over annotated scenes.
pub fn fit_meta(model: &NetParams, scenes: &[LabeledScene], tau: f64, config: &MetaConfig) -> Result<MetaModel> {
    let images: Vec<&Grid> = scenes.iter().map(|s| &s.image).collect();
    let analysis = analyse(model, &images)?;
    let segments = scored_segments(&scene_outputs(&analysis, scenes), tau);
    let metrics: Vec<Vec<f64>> = segments.iter().map(|s| s.metrics.clone()).collect();
    let ious: Vec<f64> = segments.iter().map(|s| s.iou).collect();
    meta_fit(&metrics, &ious, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub tau: f64,
    pub meta: bool,
    #[serde(flatten)]
    pub counts: ObjectCounts,
    pub delta: f64,
}

/// Object-level FP / FN / F1 and original-task loss δ at each threshold, with
/// and without meta filtering.
pub fn segment_rows(model: &NetParams, scenes: &[LabeledScene], taus: &[f64], meta: Option<&MetaModel>) -> Result<Vec<SegmentRow>> {
    let images: Vec<&Grid> = scenes.iter().map(|s| &s.image).collect();
    let analysis = analyse(model, &images)?;
    let outputs = scene_outputs(&analysis, scenes);
    let truth: Vec<&LabelMap> = scenes.iter().map(|s| &s.mask).collect();
    let classes = model.classes;
    let mut rows = Vec::new();
    for &tau in taus {
        let variants: Vec<Option<&MetaModel>> = std::iter::once(None).chain(meta.map(Some)).collect();
        for m in variants {
            let (counts, kept) = object_level_counts(&outputs, tau, m);
            let delta = meta_delta(&outputs, &truth, &kept, classes);
            rows.push(SegmentRow { tau, meta: m.is_some(), counts, delta });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub id: usize,
    pub scene: usize,
    pub x: f64,
    pub y: f64,
    pub cluster: Option<usize>,
}

/// Outcome of the unsupervised discovery stage on unlabeled images.
pub struct Discovery {
    pub components: Vec<AnomalyComponent>,
    pub embedding: Vec<EmbeddingPoint>,
    pub clusters: Option<ClusterSet>,
    pub selected: Option<usize>,
    /// Prediction of the initial model per image.
    pub predicted: Vec<LabelMap>,
    /// Pseudo-label map for every image holding a component of the selected cluster.
    pub pseudo: Vec<(usize, LabelMap)>,
    /// Why no cluster was selected, if none was.
    pub failure: Option<String>,
}

/// Anomaly segments (optionally meta filtered) → crops → embedding → PCA →
/// t-SNE → DBSCAN → densest cluster → pseudo labels. No annotation is read.
pub fn discover(
    config: &DiscoveryConfig,
    model: &NetParams,
    meta: Option<&MetaModel>,
    images: &[&Grid],
    seed: u64,
) -> Result<Discovery> {
    let analysis = analyse(model, images)?;
    let predicted: Vec<LabelMap> = analysis.iter().map(|a| a.predicted.clone()).collect();
    // Keep only segments the meta model accepts, then extract crops from the filtered maps.
    let filtered: Vec<Grid> = analysis
        .iter()
        .map(|a| {
            let mut map = Grid::zeros(a.anomaly.height, a.anomaly.width, 1);
            for seg in anomseg::segments::threshold_components(&a.anomaly, config.tau) {
                let metrics = anomseg::segments::segment_metrics(&seg, &a.probs, &a.predicted);
                if meta.is_none_or(|m| m.probability(&metrics) >= 0.5) {
                    seg.pixels.iter().for_each(|&p| map.data[p] = 1.0);
                }
            }
            map
        })
        .collect();
    let map_refs: Vec<&Grid> = filtered.iter().collect();
    let components = extract_components(&map_refs, images, 0.5, config.min_component)?;

    let mut out = Discovery {
        components,
        embedding: Vec::new(),
        clusters: None,
        selected: None,
        predicted,
        pseudo: Vec::new(),
        failure: None,
    };
    let count = out.components.len();
    let perplexity = config.perplexity.min(count as f64 / 3.0);
    if count < 6 {
        out.failure = Some(format!("only {count} anomaly components, too few to cluster"));
        return Ok(out);
    }
    let features = embed_crops(&out.components, model)?;
    let dims = config.pca_dims.min(model.hidden).min(count - 1);
    let reduced = pca_reduce(&features, dims)?.projected;
    let tsne_config = TsneConfig {
        perplexity,
        iterations: config.tsne_iterations,
        lr: config.tsne_lr,
        seed: derive_seed(seed, TAG_TSNE),
    };
    let (points, _) = normalize_embedding(&tsne(&reduced, &tsne_config)?.points)?;
    let clusters = dbscan(&points, config.eps, config.delta_for(count))?;
    out.embedding = points
        .iter()
        .enumerate()
        .map(|(id, pt)| EmbeddingPoint { id, scene: out.components[id].image, x: pt[0], y: pt[1], cluster: clusters.labels[id] })
        .collect();
    match select_cluster(&clusters, config.statistic, config.min_cluster) {
        Ok(chosen) => {
            let new_class = model.classes as u8;
            let members = &clusters.clusters[chosen].members;
            for (scene, mask) in out.predicted.iter().enumerate() {
                let segs: Vec<&Segment> =
                    members.iter().map(|&i| &out.components[i]).filter(|c| c.image == scene).map(|c| &c.segment).collect();
                if !segs.is_empty() {
                    out.pseudo.push((scene, pseudo_labels(mask, &segs, new_class)));
                }
            }
            out.selected = Some(chosen);
        }
        Err(e @ Error::NoQualifyingCluster { .. }) => out.failure = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    out.clusters = Some(clusters);
    Ok(out)
}

/// A discovered image with its pseudo labels and the initial model's prediction.
pub struct PseudoScene<'a> {
    pub image: &'a Grid,
    pub pseudo: &'a LabelMap,
    pub predicted: &'a LabelMap,
}

/// Rehearsal quotas and the sampled subset of old training images.
pub fn plan_rehearsal(
    pseudo: &[&LabelMap],
    predicted: &[&LabelMap],
    new_class: u8,
    old_masks: &[&LabelMap],
    seed: u64,
) -> Result<RehearsalPlan> {
    rehearsal_quota(pseudo, predicted, new_class, old_masks, derive_seed(seed, TAG_QUOTA))
}

/// Extend the head by one class and train on pseudo-labeled images plus a
/// rehearsal subset of the old training set, distilling from `initial`.
pub fn incremental_train(
    p: &Protocol,
    initial: &NetParams,
    pseudo: &[PseudoScene],
    old: &[LabeledScene],
    seed: u64,
) -> Result<(NetParams, RehearsalPlan)> {
    let pseudo_refs: Vec<&LabelMap> = pseudo.iter().map(|s| s.pseudo).collect();
    let predicted_refs: Vec<&LabelMap> = pseudo.iter().map(|s| s.predicted).collect();
    let old_masks: Vec<&LabelMap> = old.iter().map(|s| &s.mask).collect();
    let plan = plan_rehearsal(&pseudo_refs, &predicted_refs, initial.classes as u8, &old_masks, seed)?;

    let mut data: Vec<Example> = pseudo.iter().map(|s| Example { image: s.image, mask: s.pseudo }).collect();
    data.extend(plan.subset.iter().map(|&i| Example { image: &old[i].image, mask: &old[i].mask }));
    let extended = toynet::extend_head(initial, derive_seed(seed, TAG_HEAD));
    let config = seeded(&p.incremental, derive_seed(seed, TAG_INCREMENTAL));
    let objective = Objective::Incremental { lambda: p.incremental_lambda, teacher: initial };
    Ok((toynet::train(&extended, &data, objective, &config)?.params, plan))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub name: String,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalEval {
    /// One row per class of the extended model, then the old-class means of
    /// the initial and the extended model.
    pub rows: Vec<ClassRow>,
    pub new_iou: f64,
    pub old_miou_initial: f64,
    pub old_miou_extended: f64,
    /// Old-class mean IoU lost by the extension, in IoU points (×100).
    pub old_miou_drop: f64,
}

struct Confusion {
    tp: Vec<usize>,
    fp: Vec<usize>,
    fn_: Vec<usize>,
}

fn confusion(predicted: &[LabelMap], truth: &[LabelMap], classes: usize) -> Confusion {
    let mut c = Confusion { tp: vec![0; classes], fp: vec![0; classes], fn_: vec![0; classes] };
    for (p, t) in predicted.iter().zip(truth) {
        for (&a, &b) in p.data.iter().zip(&t.data) {
            if b == IGNORE_LABEL {
                continue;
            }
            let (a, b) = (a as usize, b as usize);
            if a == b {
                c.tp[a] += 1;
            } else {
                if a < classes {
                    c.fp[a] += 1;
                }
                if b < classes {
                    c.fn_[b] += 1;
                }
            }
        }
    }
    c
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per-class IoU / precision / recall of the extended model on held-out novel
/// scenes, where held-out anomaly pixels count as the new class. Old-class
/// means leave those pixels out so both models are compared on the same pixels.
pub fn evaluate_incremental(initial: &NetParams, extended: &NetParams, scenes: &[LabeledScene], names: &[String]) -> Result<IncrementalEval> {
    let old = initial.classes;
    let images: Vec<&Grid> = scenes.iter().map(|s| &s.image).collect();
    let pred_ext: Vec<LabelMap> = analyse(extended, &images)?.into_iter().map(|a| a.predicted).collect();
    let pred_init: Vec<LabelMap> = analyse(initial, &images)?.into_iter().map(|a| a.predicted).collect();
    let truth_new: Vec<LabelMap> = scenes
        .iter()
        .map(|s| {
            let mut m = s.mask.clone();
            m.data.iter_mut().zip(&s.anomaly_mask.data).filter(|(_, &a)| a == 1).for_each(|(v, _)| *v = old as u8);
            m
        })
        .collect();
    let truth_old: Vec<LabelMap> = scenes.iter().map(|s| s.mask.clone()).collect();

    let all = confusion(&pred_ext, &truth_new, old + 1);
    let mut rows: Vec<ClassRow> = (0..=old)
        .map(|c| ClassRow {
            name: names.get(c).cloned().unwrap_or_else(|| format!("class{c}")),
            iou: ratio(all.tp[c], all.tp[c] + all.fp[c] + all.fn_[c]),
            precision: ratio(all.tp[c], all.tp[c] + all.fp[c]),
            recall: ratio(all.tp[c], all.tp[c] + all.fn_[c]),
        })
        .collect();
    let old_mean = |pred: &[LabelMap]| {
        let c = confusion(pred, &truth_old, old);
        let ious: Vec<f64> = (0..old).filter_map(|k| ratio(c.tp[k], c.tp[k] + c.fp[k] + c.fn_[k])).collect();
        ious.iter().sum::<f64>() / ious.len().max(1) as f64
    };
    let old_miou_initial = old_mean(&pred_init);
    let old_miou_extended = old_mean(&pred_ext);
    rows.push(ClassRow { name: "old-mean-initial".into(), iou: Some(old_miou_initial), precision: None, recall: None });
    rows.push(ClassRow { name: "old-mean-extended".into(), iou: Some(old_miou_extended), precision: None, recall: None });
    Ok(IncrementalEval {
        new_iou: rows[old].iou.unwrap_or(0.0),
        rows,
        old_miou_initial,
        old_miou_extended,
        old_miou_drop: 100.0 * (old_miou_initial - old_miou_extended),
    })
}

/// Summary of a full discovery + incremental-learning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub status: String,
    pub components: usize,
    pub clusters: usize,
    pub selected_size: Option<usize>,
    /// Fraction of selected-cluster pixels on held-out anomalies; computed for
    /// reporting only, never used by the pipeline.
    pub purity: Option<f64>,
    pub pseudo_labeled_images: usize,
    pub plan: Option<RehearsalPlan>,
    pub eval: Option<IncrementalEval>,
}

pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub discovery: Discovery,
    pub extended: Option<NetParams>,
}

pub fn cluster_purity(discovery: &Discovery, scenes: &[LabeledScene]) -> Option<f64> {
    let chosen = discovery.selected?;
    let clusters = discovery.clusters.as_ref()?;
    let (mut hit, mut total) = (0usize, 0usize);
    for &i in &clusters.clusters[chosen].members {
        let c = &discovery.components[i];
        // pixels on the ignored rim around an anomaly count for neither side
        for &p in &c.segment.pixels {
            match scenes[c.image].anomaly_mask.data[p] {
                IGNORE_LABEL => {}
                label => {
                    total += 1;
                    hit += usize::from(label == 1);
                }
            }
        }
    }
    ratio(hit, total)
}

/// Discovery on the novel split, incremental training, and evaluation on
/// held-out novel scenes. A run that finds no cluster is reported, not failed.
pub fn pipeline_c(p: &Protocol, initial: &NetParams, meta: Option<&MetaModel>, world: &World, seed: u64) -> Result<PipelineOutcome> {
    let images: Vec<&Grid> = world.novel.iter().map(|s| &s.image).collect();
    let discovery = discover(&p.discovery, initial, meta, &images, seed)?;
    let mut report = PipelineReport {
        status: String::new(),
        components: discovery.components.len(),
        clusters: discovery.clusters.as_ref().map_or(0, |c| c.clusters.len()),
        selected_size: discovery.selected.zip(discovery.clusters.as_ref()).map(|(i, c)| c.clusters[i].members.len()),
        purity: cluster_purity(&discovery, &world.novel),
        pseudo_labeled_images: discovery.pseudo.len(),
        plan: None,
        eval: None,
    };
    if let Some(reason) = &discovery.failure {
        report.status = format!("no cluster: {reason}");
        return Ok(PipelineOutcome { report, discovery, extended: None });
    }
    let pseudo: Vec<PseudoScene> = discovery
        .pseudo
        .iter()
        .map(|(i, m)| PseudoScene { image: images[*i], pseudo: m, predicted: &discovery.predicted[*i] })
        .collect();
    let (extended, plan) = incremental_train(p, initial, &pseudo, &world.train, seed)?;
    let mut names = p.world.class_names();
    names.push("novel".into());
    report.eval = Some(evaluate_incremental(initial, &extended, &world.novel_eval, &names)?);
    report.plan = Some(plan);
    report.status = "ok".into();
    Ok(PipelineOutcome { report, discovery, extended: Some(extended) })
}
