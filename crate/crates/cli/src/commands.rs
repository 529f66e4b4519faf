//! Command-line definitions and the implementation of every subcommand.

use std::path::{Path, PathBuf};

use anomseg::discovery::DensityStatistic;
use anomseg::evalmetrics::{build_evalset, roc_pr_curves};
use anomseg::infostat::{self, GaussianModel};
use anomseg::scoring::Method;
use anomseg::segments::{scored_segments, MetaModel};
use anomseg::synthworld::{load_split, save_scenes, LabeledScene};
use anomseg::tensorio::{load_manifest, read_tensor, write_tensor, DatasetManifest, Split};
use anomseg::toynet::NetParams;
use anomseg::{Grid, LabelMap};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::artifacts::{curves_svg, read_json, write_pr_csv, write_roc_csv, RunDir};
use crate::experiment::{self as exp, ModelKind, Protocol, PseudoScene, World};

#[derive(Parser, Debug, Serialize)]
#[command(name = "anomseg", version, about = "Anomaly segmentation experiments on synthetic scenes")]
pub struct Cli {
    /// Worker threads for per-image stages (defaults to all cores).
    #[arg(long, env = "ANOMSEG_JOBS", global = true)]
    pub jobs: Option<usize>,
    /// Seed every random stream of the run is derived from.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// JSON file overriding protocol defaults; missing keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset with tensors and a manifest.
    SynthGen(SynthGenArgs),
    /// Train the baseline network with cross-entropy.
    Train(TrainArgs),
    /// Fine-tune with entropy maximization on proxy-anomaly scenes.
    TrainEntmax(TrainEntmaxArgs),
    /// Fine-tune with an extra void class for proxy-anomaly pixels.
    TrainVoid(ModelArgs),
    /// Write per-pixel anomaly score maps.
    Score(ScoreArgs),
    /// Pixel-level ROC / PR evaluation of written score maps.
    EvalPixel(EvalPixelArgs),
    /// Object-level FP / FN / F1 and original-task loss per threshold.
    EvalSegment(EvalSegmentArgs),
    /// Fit the segment meta classifier.
    MetaTrain(MetaTrainArgs),
    /// Apply a meta classifier to thresholded segments.
    MetaApply(MetaApplyArgs),
    /// Cluster anomaly segments of the novel split and write pseudo labels.
    Discover(DiscoverArgs),
    /// Rehearsal quotas for a discovery result.
    PseudoLabel(PseudoLabelArgs),
    /// Add the discovered class and train incrementally.
    ExtendTrain(ExtendTrainArgs),
    /// Run every scorer and evaluate it on the test split.
    Benchmark(BenchmarkArgs),
    /// Discovery, incremental training and per-class evaluation in one run.
    Report(ReportArgs),
    /// Information statistics of vector data given as CSV.
    Infostat(InfostatArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthGen(_) => "synth-gen",
            Command::Train(_) => "train",
            Command::TrainEntmax(_) => "train-entmax",
            Command::TrainVoid(_) => "train-void",
            Command::Score(_) => "score",
            Command::EvalPixel(_) => "eval-pixel",
            Command::EvalSegment(_) => "eval-segment",
            Command::MetaTrain(_) => "meta-train",
            Command::MetaApply(_) => "meta-apply",
            Command::Discover(_) => "discover",
            Command::PseudoLabel(_) => "pseudo-label",
            Command::ExtendTrain(_) => "extend-train",
            Command::Benchmark(_) => "benchmark",
            Command::Report(_) => "report",
            Command::Infostat(_) => "infostat",
        }
    }
}

/// Error raised for invalid configuration, as opposed to bad data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Args, Debug, Serialize)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_proxy: Option<usize>,
    /// Test scenes for evaluation; the meta-fitting scenes are added on top.
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Novel scenes for discovery; the held-out evaluation scenes are added on top.
    #[arg(long)]
    pub n_novel: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding the model to start from.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainEntmaxArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Weight of the entropy term.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct ScoreArgs {
    #[arg(long, value_parser = parse_method)]
    #[serde(serialize_with = "ser_display")]
    pub method: Method,
    #[arg(long = "in", alias = "manifest")]
    pub input: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    #[serde(serialize_with = "ser_display")]
    pub split: Split,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalPixelArgs {
    /// Output directory of a `score` run.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also draw both curves as `curves.svg`.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalSegmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Thresholds on normalized entropy; repeat for several rows.
    #[arg(long = "tau")]
    pub taus: Vec<f64>,
    /// Meta model from `meta-train`; adds a filtered row per threshold.
    #[arg(long)]
    pub meta: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct MetaTrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct MetaApplyArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    /// `meta.json` written by `meta-train`.
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct DiscoveryArgs {
    /// Threshold on normalized entropy for anomaly segments.
    #[arg(long)]
    pub tau: Option<f64>,
    /// DBSCAN radius in median nearest-neighbor distances.
    #[arg(long)]
    pub eps: Option<f64>,
    /// DBSCAN core-point count.
    #[arg(long)]
    pub delta: Option<usize>,
    #[arg(long)]
    pub perplexity: Option<f64>,
    /// Cluster density statistic: max or average.
    #[arg(long, value_parser = parse_statistic)]
    #[serde(serialize_with = "ser_option_debug")]
    pub statistic: Option<DensityStatistic>,
    /// Meta model filtering segments before clustering; by default one is
    /// fitted on the test scenes reserved for meta fitting.
    #[arg(long, conflicts_with = "no_meta")]
    pub meta: Option<PathBuf>,
    /// Cluster every anomaly segment without meta filtering.
    #[arg(long)]
    pub no_meta: bool,
}

impl DiscoveryArgs {
    fn apply(&self, p: &mut Protocol) {
        let d = &mut p.discovery;
        if let Some(v) = self.tau {
            d.tau = v;
        }
        if let Some(v) = self.eps {
            d.eps = v;
        }
        if let Some(v) = self.delta {
            d.delta = Some(v);
        }
        if let Some(v) = self.perplexity {
            d.perplexity = v;
        }
        if let Some(v) = self.statistic {
            d.statistic = v;
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct DiscoverArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub discovery: DiscoveryArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct PseudoLabelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory of a `discover` run.
    #[arg(long)]
    pub discovery: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ExtendTrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// The initial model the discovery ran with.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub discovery: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub entmax: Option<PathBuf>,
    #[arg(long)]
    pub void: Option<PathBuf>,
    /// `method@model` entries, e.g. `entropy@entmax`; defaults to every
    /// scorer the supplied models allow.
    #[arg(long = "method")]
    pub methods: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Initial model trained on the known classes.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub discovery: DiscoveryArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct InfostatArgs {
    /// CSV of reference vectors, one sample per row.
    #[arg(long)]
    pub train: PathBuf,
    /// CSV of vectors to test.
    #[arg(long)]
    pub test: PathBuf,
    /// CSV of anomaly-reference vectors; adds relative information.
    #[arg(long)]
    pub anomaly: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    /// The CSV files have no header row.
    #[arg(long)]
    pub no_header: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: anomseg::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: anomseg::Error| e.to_string())
}

fn parse_statistic(s: &str) -> Result<DensityStatistic, String> {
    s.parse().map_err(|e: anomseg::Error| e.to_string())
}

fn ser_display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn ser_option_debug<T: std::fmt::Debug, S: serde::Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.collect_str(&format_args!("{v:?}")),
        None => s.serialize_none(),
    }
}

/// Everything that determined a run, echoed into `run.json`.
#[derive(Serialize)]
struct RunConfig<'a> {
    command: &'static str,
    seed: u64,
    jobs: Option<usize>,
    config: Option<&'a Path>,
    protocol: &'a Protocol,
    args: &'a Command,
}

struct Ctx<'a> {
    cli: &'a Cli,
    protocol: Protocol,
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.cli.seed
    }

    fn finish(&self, run: RunDir) -> Result<PathBuf> {
        let echo = RunConfig {
            command: self.cli.command.name(),
            seed: self.cli.seed,
            jobs: self.cli.jobs,
            config: self.cli.config.as_deref(),
            protocol: &self.protocol,
            args: &self.cli.command,
        };
        run.write_json("run.json", &echo)?;
        run.commit()
    }
}

/// Validate the configuration, run the command and return the output directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    if cli.jobs == Some(0) {
        return Err(config_error("--jobs must be at least 1"));
    }
    if let Some(jobs) = cli.jobs {
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let mut protocol = match &cli.config {
        Some(path) => read_json::<Protocol>(path).map_err(|e| config_error(format!("{e:#}")))?,
        None => Protocol::default(),
    };
    apply_overrides(&cli.command, &mut protocol);
    protocol.validate().map_err(|e| config_error(e.to_string()))?;
    let ctx = Ctx { cli, protocol };
    match &cli.command {
        Command::SynthGen(a) => synth_gen(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::TrainEntmax(a) => train_entmax(&ctx, a),
        Command::TrainVoid(a) => train_void(&ctx, a),
        Command::Score(a) => score(&ctx, a),
        Command::EvalPixel(a) => eval_pixel(&ctx, a),
        Command::EvalSegment(a) => eval_segment(&ctx, a),
        Command::MetaTrain(a) => meta_train(&ctx, a),
        Command::MetaApply(a) => meta_apply(&ctx, a),
        Command::Discover(a) => discover(&ctx, a),
        Command::PseudoLabel(a) => pseudo_label(&ctx, a),
        Command::ExtendTrain(a) => extend_train(&ctx, a),
        Command::Benchmark(a) => benchmark(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::Infostat(a) => infostat_cmd(&ctx, a),
    }
}

fn apply_overrides(command: &Command, p: &mut Protocol) {
    match command {
        Command::SynthGen(a) => {
            let pairs = [(&mut p.n_train, a.n_train), (&mut p.n_proxy, a.n_proxy), (&mut p.n_test, a.n_test), (&mut p.n_novel, a.n_novel)];
            for (field, value) in pairs {
                if let Some(v) = value {
                    *field = v;
                }
            }
        }
        Command::Train(a) => {
            if let Some(v) = a.epochs {
                p.base.epochs = v;
            }
            if let Some(v) = a.lr {
                p.base.lr = v;
            }
        }
        Command::TrainEntmax(a) => {
            if let Some(v) = a.lambda {
                p.lambda = v;
            }
            if let Some(v) = a.epochs {
                p.finetune.epochs = v;
            }
        }
        Command::Discover(a) => a.discovery.apply(p),
        Command::Report(a) => a.discovery.apply(p),
        _ => {}
    }
}

fn manifest(path: &Path) -> Result<DatasetManifest> {
    Ok(load_manifest(path)?)
}

fn params(dir: &Path) -> Result<NetParams> {
    NetParams::load(dir).with_context(|| format!("loading model from {}", dir.display()))
}

/// Test scenes for evaluation and the tail reserved for fitting meta models.
fn test_and_meta(p: &Protocol, m: &DatasetManifest) -> Result<(Vec<LabeledScene>, Vec<LabeledScene>)> {
    let mut test = load_split(m, Split::Test)?;
    if test.len() <= p.n_meta {
        bail!("manifest has {} test scenes, need more than the {} reserved for meta fitting", test.len(), p.n_meta);
    }
    let meta = test.split_off(test.len() - p.n_meta);
    Ok((test, meta))
}

fn scene_file(i: usize) -> String {
    format!("{i:05}.ant")
}

fn synth_gen(ctx: &Ctx, a: &SynthGenArgs) -> Result<PathBuf> {
    let p = &ctx.protocol;
    let world = exp::generate_world(p, ctx.seed())?;
    let run = RunDir::create(&a.out)?;
    let scenes: Vec<LabeledScene> = world.all_scenes().cloned().collect();
    let manifest = save_scenes(&run.path(""), &scenes, p.world.class_names())?;
    manifest.save(run.path("manifest.json"))?;
    ctx.finish(run)
}

fn save_model(run: &RunDir, model: &NetParams) -> Result<()> {
    model.save(&run.path(""))?;
    Ok(())
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<PathBuf> {
    let train = load_split(&manifest(&a.manifest)?, Split::Train)?;
    let model = exp::train_baseline(&ctx.protocol, &train, ctx.seed())?;
    let run = RunDir::create(&a.out)?;
    save_model(&run, &model)?;
    ctx.finish(run)
}

fn train_entmax(ctx: &Ctx, a: &TrainEntmaxArgs) -> Result<PathBuf> {
    let m = manifest(&a.model.manifest)?;
    let (train, proxy) = (load_split(&m, Split::Train)?, load_split(&m, Split::ProxyAnom)?);
    let model = exp::train_entmax(&ctx.protocol, &params(&a.model.params)?, &train, &proxy, ctx.seed())?;
    let run = RunDir::create(&a.model.out)?;
    save_model(&run, &model)?;
    ctx.finish(run)
}

fn train_void(ctx: &Ctx, a: &ModelArgs) -> Result<PathBuf> {
    let m = manifest(&a.manifest)?;
    let (train, proxy) = (load_split(&m, Split::Train)?, load_split(&m, Split::ProxyAnom)?);
    let model = exp::train_void(&ctx.protocol, &params(&a.params)?, &train, &proxy, ctx.seed())?;
    let run = RunDir::create(&a.out)?;
    save_model(&run, &model)?;
    ctx.finish(run)
}

/// Index written next to score maps so `eval-pixel` can find the annotations.
#[derive(Serialize, Deserialize)]
struct ScoreIndex {
    manifest: PathBuf,
    split: Split,
    method: String,
    maps: Vec<String>,
}

fn score(ctx: &Ctx, a: &ScoreArgs) -> Result<PathBuf> {
    let p = &ctx.protocol;
    let m = manifest(&a.input)?;
    let model = params(&a.params)?;
    let scenes = load_split(&m, a.split)?;
    if scenes.is_empty() {
        bail!("split {} of {} is empty", a.split, a.input.display());
    }
    let features = match a.method {
        Method::Mahalanobis | Method::Density => {
            let train = load_split(&m, Split::Train)?;
            Some(exp::fit_feature_models(&model, &train[..p.n_fit.min(train.len())])?)
        }
        _ => None,
    };
    let maps = exp::score_scenes(p, a.method, &model, features.as_ref(), &scenes, ctx.seed())?;
    let run = RunDir::create(&a.out)?;
    let dir = run.subdir("maps")?;
    let mut names = Vec::with_capacity(maps.len());
    for (i, map) in maps.iter().enumerate() {
        write_tensor(dir.join(scene_file(i)), &map.to_tensor())?;
        names.push(format!("maps/{}", scene_file(i)));
    }
    let index = ScoreIndex {
        manifest: std::fs::canonicalize(&a.input)?,
        split: a.split,
        method: a.method.to_string(),
        maps: names,
    };
    run.write_json("scores.json", &index)?;
    ctx.finish(run)
}

fn eval_pixel(ctx: &Ctx, a: &EvalPixelArgs) -> Result<PathBuf> {
    let index: ScoreIndex = read_json(&a.scores.join("scores.json"))?;
    let m = manifest(&index.manifest)?;
    let scenes = load_split(&m, index.split)?;
    if scenes.len() != index.maps.len() {
        bail!("{} score maps for {} scenes", index.maps.len(), scenes.len());
    }
    let maps: Vec<Grid> =
        index.maps.iter().map(|f| Ok(Grid::from_tensor(&read_tensor(a.scores.join(f))?)?)).collect::<Result<_>>()?;
    let roi = match &m.roi {
        Some(path) => Some(LabelMap::from_tensor(&read_tensor(m.resolve(path))?)?),
        None => None,
    };
    let map_refs: Vec<&Grid> = maps.iter().collect();
    let ann: Vec<&LabelMap> = scenes.iter().map(|s| &s.anomaly_mask).collect();
    let roi_refs: Option<Vec<&LabelMap>> = roi.as_ref().map(|r| vec![r; scenes.len()]);
    let set = build_evalset(&map_refs, &ann, roi_refs.as_deref())?;
    let curve = roc_pr_curves(&set)?;

    let run = RunDir::create(&a.out)?;
    write_roc_csv(&run.path("curve_roc.csv"), &curve)?;
    write_pr_csv(&run.path("curve_pr.csv"), &curve)?;
    run.write_json("summary.json", &curve.summary())?;
    if a.svg {
        let prevalence = set.positives() as f64 / set.len() as f64;
        run.write_text("curves.svg", &curves_svg(&curve, prevalence))?;
    }
    ctx.finish(run)
}

#[derive(Serialize)]
struct SegmentCsvRow {
    tau: f64,
    meta: bool,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    f1: f64,
    delta: f64,
}

fn eval_segment(ctx: &Ctx, a: &EvalSegmentArgs) -> Result<PathBuf> {
    let p = &ctx.protocol;
    let (test, _) = test_and_meta(p, &manifest(&a.manifest)?)?;
    let model = params(&a.params)?;
    let meta: Option<MetaModel> = a.meta.as_deref().map(read_json).transpose()?;
    let taus = if a.taus.is_empty() { vec![p.segment_tau] } else { a.taus.clone() };
    let rows: Vec<SegmentCsvRow> = exp::segment_rows(&model, &test, &taus, meta.as_ref())?
        .into_iter()
        .map(|r| SegmentCsvRow {
            tau: r.tau,
            meta: r.meta,
            tp: r.counts.tp,
            fp: r.counts.fp,
            fn_: r.counts.fn_,
            f1: r.counts.f1,
            delta: r.delta,
        })
        .collect();
    let run = RunDir::create(&a.out)?;
    run.write_csv("segments.csv", &rows)?;
    ctx.finish(run)
}

fn meta_train(ctx: &Ctx, a: &MetaTrainArgs) -> Result<PathBuf> {
    let p = &ctx.protocol;
    let (_, meta_scenes) = test_and_meta(p, &manifest(&a.manifest)?)?;
    let meta = exp::fit_meta(&params(&a.params)?, &meta_scenes, a.tau.unwrap_or(p.segment_tau), &p.meta)?;
    let run = RunDir::create(&a.out)?;
    run.write_json("meta.json", &meta)?;
    ctx.finish(run)
}

#[derive(Serialize)]
struct MetaDecision {
    scene: usize,
    segment: usize,
    size: usize,
    probability: f64,
    kept: bool,
}

fn meta_apply(ctx: &Ctx, a: &MetaApplyArgs) -> Result<PathBuf> {
    let p = &ctx.protocol;
    let (test, _) = test_and_meta(p, &manifest(&a.manifest)?)?;
    let model = params(&a.params)?;
    let meta: MetaModel = read_json(&a.meta)?;
    let images: Vec<&Grid> = test.iter().map(|s| &s.image).collect();
    let analysis = exp::analyse(&model, &images)?;
    let segments = scored_segments(&exp::scene_outputs(&analysis, &test), a.tau.unwrap_or(p.segment_tau));
    let mut counter = vec![0usize; test.len()];
    let rows: Vec<MetaDecision> = segments
        .iter()
        .map(|s| {
            let probability = meta.probability(&s.metrics);
            let segment = counter[s.scene];
            counter[s.scene] += 1;
            MetaDecision { scene: s.scene, segment, size: s.segment.size(), probability, kept: probability >= 0.5 }
        })
        .collect();
    let run = RunDir::create(&a.out)?;
    run.write_csv("segments.csv", &rows)?;
    ctx.finish(run)
}

/// The meta model used to filter discovery segments.
fn discovery_meta(p: &Protocol, args: &DiscoveryArgs, model: &NetParams, meta_scenes: &[LabeledScene]) -> Result<Option<MetaModel>> {
    if args.no_meta {
        return Ok(None);
    }
    match &args.meta {
        Some(path) => Ok(Some(read_json(path)?)),
        None => Ok(Some(exp::fit_meta(model, meta_scenes, p.discovery.tau, &p.meta)?)),
    }
}

#[derive(Serialize, Deserialize)]
struct ComponentRecord {
    id: usize,
    scene: usize,
    /// Inclusive `(row0, col0, row1, col1)`.
    bbox: (usize, usize, usize, usize),
    size: usize,
    cluster: Option<usize>,
}

#[derive(Serialize)]
struct EmbeddingRow {
    id: usize,
    x: f64,
    y: f64,
    /// Empty for noise points.
    cluster: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct PseudoRecord {
    scene: usize,
    pseudo: String,
    predicted: String,
}

/// Summary of a discovery run; `pseudo-label` and `extend-train` read it back.
#[derive(Serialize, Deserialize)]
struct DiscoverySummary {
    status: String,
    new_class: u8,
    components: usize,
    cluster_sizes: Vec<usize>,
    selected: Option<usize>,
    pseudo: Vec<PseudoRecord>,
}

/// Write components, embedding and pseudo labels of a discovery into `run`.
fn write_discovery(run: &RunDir, d: &exp::Discovery, new_class: u8) -> Result<()> {
    let cluster_of = |id: usize| d.clusters.as_ref().and_then(|c| c.labels[id]);
    let components: Vec<ComponentRecord> = d
        .components
        .iter()
        .enumerate()
        .map(|(id, c)| ComponentRecord { id, scene: c.image, bbox: c.bbox, size: c.segment.size(), cluster: cluster_of(id) })
        .collect();
    run.write_json("components.json", &components)?;
    let embedding: Vec<EmbeddingRow> = d.embedding.iter().map(|e| EmbeddingRow { id: e.id, x: e.x, y: e.y, cluster: e.cluster }).collect();
    run.write_csv("embedding.csv", &embedding)?;

    let dir = run.subdir("pseudo")?;
    let mut pseudo = Vec::new();
    for (scene, map) in &d.pseudo {
        let (label, pred) = (format!("pseudo/{scene:05}_label.ant"), format!("pseudo/{scene:05}_predicted.ant"));
        write_tensor(dir.join(format!("{scene:05}_label.ant")), &map.to_tensor())?;
        write_tensor(dir.join(format!("{scene:05}_predicted.ant")), &d.predicted[*scene].to_tensor())?;
        pseudo.push(PseudoRecord { scene: *scene, pseudo: label, predicted: pred });
    }
    let summary = DiscoverySummary {
        status: d.failure.as_ref().map_or_else(|| "ok".to_string(), |f| format!("no cluster: {f}")),
        new_class,
        components: d.components.len(),
        cluster_sizes: d.clusters.as_ref().map(|c| c.clusters.iter().map(|k| k.members.len()).collect()).unwrap_or_default(),
        selected: d.selected,
        pseudo,
    };
    run.write_json("discovery.json", &summary)
}

fn novel_split(p: &Protocol, m: &DatasetManifest) -> Result<Vec<LabeledScene>> {
    let mut novel = load_split(m, Split::Novel)?;
    if novel.len() <= p.n_novel_eval {
        bail!("manifest has {} novel scenes, need more than the {} held out for evaluation", novel.len(), p.n_novel_eval);
    }
    novel.truncate(novel.len() - p.n_novel_eval);
    Ok(novel)
}

fn discover(ctx: &Ctx, a: &DiscoverArgs) -> Result<PathBuf> {
    let p = &ctx.protocol;
    let m = manifest(&a.manifest)?;
    let novel = novel_split(p, &m)?;
    let model = params(&a.params)?;
    let (_, meta_scenes) = test_and_meta(p, &m)?;
    let meta = discovery_meta(p, &a.discovery, &model, &meta_scenes)?;
    let images: Vec<&Grid> = novel.iter().map(|s| &s.image).collect();
    let d = exp::discover(&p.discovery, &model, meta.as_ref(), &images, ctx.seed())?;
    let run = RunDir::create(&a.out)?;
    write_discovery(&run, &d, model.classes as u8)?;
    ctx.finish(run)
}

struct LoadedPseudo {
    scene: usize,
    pseudo: LabelMap,
    predicted: LabelMap,
}

fn load_discovery(dir: &Path) -> Result<(DiscoverySummary, Vec<LoadedPseudo>)> {
    let summary: DiscoverySummary = read_json(&dir.join("discovery.json"))?;
    if summary.pseudo.is_empty() {
        bail!("discovery in {} produced no pseudo labels ({})", dir.display(), summary.status);
    }
    let maps = summary
        .pseudo
        .iter()
        .map(|r| {
            Ok(LoadedPseudo {
                scene: r.scene,
                pseudo: LabelMap::from_tensor(&read_tensor(dir.join(&r.pseudo))?)?,
                predicted: LabelMap::from_tensor(&read_tensor(dir.join(&r.predicted))?)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((summary, maps))
}

#[derive(Serialize)]
struct QuotaRow {
    class: String,
    nu_tot: usize,
    nu_rel: f64,
    quota: usize,
}

fn quota_rows(plan: &anomseg::discovery::RehearsalPlan, names: &[String]) -> Vec<QuotaRow> {
    (0..plan.quota.len())
        .map(|c| QuotaRow {
            class: names.get(c).cloned().unwrap_or_else(|| format!("class{c}")),
            nu_tot: plan.nu_tot[c],
            nu_rel: plan.nu_rel[c],
            quota: plan.quota[c],
        })
        .collect()
}

fn pseudo_label(ctx: &Ctx, a: &PseudoLabelArgs) -> Result<PathBuf> {
    let m = manifest(&a.manifest)?;
    let train = load_split(&m, Split::Train)?;
    let (summary, loaded) = load_discovery(&a.discovery)?;
    let pseudo: Vec<&LabelMap> = loaded.iter().map(|l| &l.pseudo).collect();
    let predicted: Vec<&LabelMap> = loaded.iter().map(|l| &l.predicted).collect();
    let old: Vec<&LabelMap> = train.iter().map(|s| &s.mask).collect();
    let plan = exp::plan_rehearsal(&pseudo, &predicted, summary.new_class, &old, ctx.seed())?;
    let run = RunDir::create(&a.out)?;
    run.write_csv("quota.csv", &quota_rows(&plan, &m.class_names))?;
    run.write_json("plan.json", &plan)?;
    ctx.finish(run)
}

fn extend_train(ctx: &Ctx, a: &ExtendTrainArgs) -> Result<PathBuf> {
    let p = &ctx.protocol;
    let m = manifest(&a.manifest)?;
    let novel = novel_split(p, &m)?;
    let train = load_split(&m, Split::Train)?;
    let initial = params(&a.params)?;
    let (summary, loaded) = load_discovery(&a.discovery)?;
    if summary.new_class as usize != initial.classes {
        return Err(config_error(format!("discovery labels class {} but the model has {} classes", summary.new_class, initial.classes)));
    }
    let scenes = loaded
        .iter()
        .map(|l| {
            let scene = novel.get(l.scene).with_context(|| format!("pseudo labels for unknown novel scene {}", l.scene))?;
            Ok(PseudoScene { image: &scene.image, pseudo: &l.pseudo, predicted: &l.predicted })
        })
        .collect::<Result<Vec<_>>>()?;
    let (extended, plan) = exp::incremental_train(p, &initial, &scenes, &train, ctx.seed())?;
    let run = RunDir::create(&a.out)?;
    save_model(&run, &extended)?;
    run.write_json("plan.json", &plan)?;
    run.write_csv("quota.csv", &quota_rows(&plan, &m.class_names))?;
    ctx.finish(run)
}

#[derive(Serialize)]
struct BenchmarkCsvRow {
    method: String,
    model: String,
    auprc: f64,
    auroc: f64,
    fpr95: f64,
}

fn parse_entry(s: &str) -> Result<(Method, ModelKind)> {
    let (method, model) = s.split_once('@').unwrap_or((s, "baseline"));
    let method = method.parse::<Method>().map_err(|e| config_error(e.to_string()))?;
    let model = model.parse::<ModelKind>().map_err(|e| config_error(e.to_string()))?;
    Ok((method, model))
}

fn benchmark(ctx: &Ctx, a: &BenchmarkArgs) -> Result<PathBuf> {
    let p = &ctx.protocol;
    let m = manifest(&a.manifest)?;
    let mut models = vec![(ModelKind::Baseline, params(&a.baseline)?)];
    for (kind, path) in [(ModelKind::Entmax, &a.entmax), (ModelKind::Void, &a.void)] {
        if let Some(path) = path {
            models.push((kind, params(path)?));
        }
    }
    let entries: Vec<(Method, ModelKind)> = if a.methods.is_empty() {
        exp::default_entries().into_iter().filter(|(_, k)| models.iter().any(|(m, _)| m == k)).collect()
    } else {
        a.methods.iter().map(|s| parse_entry(s)).collect::<Result<_>>()?
    };
    for (method, kind) in &entries {
        if !models.iter().any(|(m, _)| m == kind) {
            return Err(config_error(format!("{method}@{} requested but no {} model given", kind.as_str(), kind.as_str())));
        }
    }
    let (test, _) = test_and_meta(p, &m)?;
    let train = load_split(&m, Split::Train)?;
    let refs: Vec<(ModelKind, &NetParams)> = models.iter().map(|(k, m)| (*k, m)).collect();
    let rows = exp::benchmark(p, &refs, &test, &train[..p.n_fit.min(train.len())], &entries, ctx.seed())?;

    let run = RunDir::create(&a.out)?;
    let curves = run.subdir("curves")?;
    for row in &rows {
        write_roc_csv(&curves.join(format!("{}_roc.csv", row.label())), &row.curve)?;
        write_pr_csv(&curves.join(format!("{}_pr.csv", row.label())), &row.curve)?;
    }
    let table: Vec<BenchmarkCsvRow> = rows
        .iter()
        .map(|r| BenchmarkCsvRow {
            method: r.method.to_string(),
            model: r.model.as_str().to_string(),
            auprc: r.curve.auprc,
            auroc: r.curve.auroc,
            fpr95: r.curve.fpr95,
        })
        .collect();
    run.write_csv("benchmark.csv", &table)?;
    ctx.finish(run)
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<PathBuf> {
    let p = &ctx.protocol;
    let world = World::load(p, &manifest(&a.manifest)?)?;
    let initial = params(&a.params)?;
    let meta = discovery_meta(p, &a.discovery, &initial, &world.meta)?;
    let outcome = exp::pipeline_c(p, &initial, meta.as_ref(), &world, ctx.seed())?;
    let run = RunDir::create(&a.out)?;
    write_discovery(&run, &outcome.discovery, initial.classes as u8)?;
    run.write_json("report.json", &outcome.report)?;
    if let Some(eval) = &outcome.report.eval {
        run.write_csv("report.csv", &eval.rows)?;
    }
    if let Some(plan) = &outcome.report.plan {
        let mut names = p.world.class_names();
        names.truncate(initial.classes);
        run.write_csv("quota.csv", &quota_rows(plan, &names))?;
    }
    if let Some(model) = &outcome.extended {
        model.save(&run.subdir("extended")?)?;
    }
    ctx.finish(run)
}

fn read_vectors(path: &Path, headers: bool) -> Result<(Vec<f64>, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(headers)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut data = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if *width.get_or_insert(record.len()) != record.len() {
            bail!("{}: row {} has {} values, expected {}", path.display(), line + 1, record.len(), width.unwrap_or(0));
        }
        for field in record.iter() {
            let v: f64 = field.trim().parse().with_context(|| format!("{}: row {}: bad number {field:?}", path.display(), line + 1))?;
            data.push(v);
        }
    }
    match width {
        Some(d) if d > 0 => Ok((data, d)),
        _ => bail!("{} holds no vectors", path.display()),
    }
}

#[derive(Serialize)]
struct InformationRow {
    row: usize,
    information: f64,
    relative_information: Option<f64>,
    novelty_fraction: f64,
    novel: bool,
    outlier_fraction: f64,
    outlier: bool,
}

#[derive(Serialize)]
struct FittedGaussian<'a> {
    mean: &'a [f64],
    cov: &'a [f64],
}

fn infostat_cmd(ctx: &Ctx, a: &InfostatArgs) -> Result<PathBuf> {
    let (train, d) = read_vectors(&a.train, !a.no_header)?;
    let (test, d_test) = read_vectors(&a.test, !a.no_header)?;
    if d_test != d {
        return Err(config_error(format!("train vectors have {d} columns, test vectors {d_test}")));
    }
    let model = infostat::fit_gaussian(&train, d)?;
    let anomaly: Option<GaussianModel> = match &a.anomaly {
        Some(path) => {
            let (values, d_anom) = read_vectors(path, !a.no_header)?;
            if d_anom != d {
                return Err(config_error(format!("anomaly vectors have {d_anom} columns, expected {d}")));
            }
            Some(infostat::fit_gaussian(&values, d)?)
        }
        None => None,
    };
    let reference: Vec<f64> = train.chunks(d).map(|z| model.information(z)).collect();
    let rows: Vec<InformationRow> = test
        .chunks(d)
        .enumerate()
        .map(|(row, z)| {
            let information = model.information(z);
            let novelty = infostat::novelty_test(&reference, information, a.alpha)?;
            let seed = anomseg::rng::derive_seed(ctx.seed(), row as u64);
            let outlier = infostat::outlier_test(&reference, information, a.alpha, a.resamples, seed)?;
            Ok(InformationRow {
                row,
                information,
                relative_information: anomaly.as_ref().map(|q| infostat::relative_information(&model, q, z)),
                novelty_fraction: novelty.fraction,
                novel: novelty.flagged,
                outlier_fraction: outlier.fraction,
                outlier: outlier.flagged,
            })
        })
        .collect::<Result<_>>()?;
    let run = RunDir::create(&a.out)?;
    run.write_csv("information.csv", &rows)?;
    run.write_json("model.json", &FittedGaussian { mean: model.mean(), cov: model.cov() })?;
    ctx.finish(run)
}

/// Process exit code: 2 for configuration errors, 3 for data errors, 4 for
/// numeric failures.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use anomseg::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<clap::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_) | E::UnknownSplit(_) | E::InfeasiblePerplexity { .. } => 2,
                E::Divergence { .. }
                | E::NotPositiveDefinite
                | E::NotNormalized(_)
                | E::InsufficientSamples { .. } => 4,
                _ => 3,
            };
        }
    }
    3
}
