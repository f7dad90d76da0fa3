//! The `weakseg` command line.
//!
//! Every verb that produces outputs resolves its options as command line >
//! `--config <json>` > built-in defaults and writes the effective options to
//! `stamp.json` next to its outputs. A stamp is itself a valid `--config`
//! file, so `weakseg <verb> --config run/stamp.json --out again` repeats a
//! run.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::Error;
use crate::gradcheck;
use crate::hypothesis::{rank_hypotheses, Hypothesis};
use crate::io;
use crate::model::{Model, ModelConfig};
use crate::overlay;
use crate::synth::{generate_dataset, Dataset, DatasetConfig, MaskMode, SplitCounts, TextureParams};
use crate::train::{grid_search, train_classifier, train_segmenter, CellOutcome, GridCell, RunMetrics, Task, TrainConfig};

pub const STAMP_FILE: &str = "stamp.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "weakseg", version, about = "Weak-label surface segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic surface dataset.
    GenData(GenDataArgs),
    /// Train the residual classifier on dataset labels.
    TrainClassifier(TrainClassifierArgs),
    /// Train the segmenter against a hypothesis function.
    TrainSeg(TrainSegArgs),
    /// Train every cell of a model grid and rank them.
    GridSearch(GridSearchArgs),
    /// Rank hypothesis functions by held-out segmenter error.
    EvalHypotheses(EvalHypothesesArgs),
    /// Render a segmenter's mask over an image as a P6 color image.
    Overlay(OverlayArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Consolidate the metrics of a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MaskModeArg {
    Blob,
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TaskArg {
    Classifier,
    Seg,
}

#[derive(Debug, Args, Serialize)]
struct ConfigArg {
    /// JSON file of options (for example a previous run's stamp.json).
    #[arg(long, value_name = "JSON")]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Number of labels.
    #[arg(long, value_name = "K")]
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<usize>,
    /// Smallest label.
    #[arg(long, value_name = "T", allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    label_min: Option<i64>,
    #[arg(long, value_name = "N")]
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<usize>,
    #[arg(long, value_name = "N")]
    #[serde(skip_serializing_if = "Option::is_none")]
    val: Option<usize>,
    #[arg(long, value_name = "N")]
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<usize>,
    /// Image height and width.
    #[arg(long, value_name = "S")]
    #[serde(skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    /// True ratio function, as a hypothesis spec.
    #[arg(long, value_name = "NAME[:PARAMS]")]
    #[serde(skip_serializing_if = "Option::is_none")]
    ftrue: Option<String>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_mode: Option<MaskModeArg>,
    #[arg(long, value_name = "N")]
    #[serde(skip_serializing_if = "Option::is_none")]
    blob_passes: Option<usize>,
    #[arg(long, value_name = "N")]
    #[serde(skip_serializing_if = "Option::is_none")]
    rough_passes: Option<usize>,
    #[arg(long, value_name = "N")]
    #[serde(skip_serializing_if = "Option::is_none")]
    smooth_passes: Option<usize>,
    #[arg(long, value_name = "REAL")]
    #[serde(skip_serializing_if = "Option::is_none")]
    amplitude: Option<f64>,
    #[arg(long, value_name = "REAL")]
    #[serde(skip_serializing_if = "Option::is_none")]
    noise: Option<f64>,
    #[arg(long, value_name = "U64")]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[command(flatten)]
    #[serde(skip)]
    config: ConfigArg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenData {
    out: Option<PathBuf>,
    labels: usize,
    label_min: i64,
    train: usize,
    val: usize,
    test: usize,
    size: usize,
    ftrue: String,
    mask_mode: MaskModeArg,
    blob_passes: usize,
    rough_passes: usize,
    smooth_passes: usize,
    amplitude: f64,
    noise: f64,
    seed: u64,
}

impl Default for GenData {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            out: None,
            labels: (d.label_range.1 - d.label_range.0 + 1) as usize,
            label_min: d.label_range.0,
            train: d.counts.train,
            val: d.counts.val,
            test: d.counts.test,
            size: d.height,
            ftrue: d.f_true.to_string(),
            mask_mode: MaskModeArg::Blob,
            blob_passes: d.blob_passes,
            rough_passes: d.texture.rough_passes,
            smooth_passes: d.texture.smooth_passes,
            amplitude: d.texture.amplitude,
            noise: d.texture.noise,
            seed: d.seed,
        }
    }
}

/// Model shape flags shared by the training verbs.
#[derive(Debug, Args, Serialize)]
struct ModelArgs {
    /// Channels per hidden layer.
    #[arg(long, value_name = "INT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    c: Option<usize>,
    /// Pooling levels.
    #[arg(long, value_name = "INT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    /// Conv-BN-ReLU stages per residual block.
    #[arg(long, value_name = "INT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    /// Residual blocks per level.
    #[arg(long, value_name = "INT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    bn: Option<usize>,
}

/// Optimization flags shared by the training verbs.
#[derive(Debug, Args, Serialize)]
struct OptimArgs {
    #[arg(long, value_name = "INT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long, value_name = "REAL")]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long, value_name = "INT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    #[arg(long, value_name = "U64")]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Shuffle the training split every epoch.
    #[arg(long, value_name = "BOOL")]
    #[serde(skip_serializing_if = "Option::is_none")]
    shuffle: Option<bool>,
}

#[derive(Debug, Args, Serialize)]
struct TrainClassifierArgs {
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    #[serde(skip)]
    config: ConfigArg,
}

#[derive(Debug, Args, Serialize)]
struct TrainSegArgs {
    #[arg(long, value_name = "NAME[:PARAMS]")]
    #[serde(skip_serializing_if = "Option::is_none")]
    hypothesis: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    common: TrainClassifierArgs,
}

/// Effective options of a training run; the stamp of train-classifier and
/// train-seg.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainRun {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    hypothesis: Option<String>,
    c: usize,
    d: usize,
    n: usize,
    bn: usize,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    shuffle: bool,
}

impl Default for TrainRun {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            data: None,
            out: None,
            hypothesis: None,
            c: m.c,
            d: m.d,
            n: m.n,
            bn: m.blocks,
            epochs: t.epochs,
            lr: t.lr,
            batch: t.batch_size,
            seed: t.seed,
            shuffle: t.shuffle,
        }
    }
}

impl TrainRun {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch,
            seed: self.seed,
            shuffle: self.shuffle,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct GridSearchArgs {
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// Grid as inline JSON or a JSON file. An object of arrays
    /// (`{"c": [8, 12], "bn": [1, 2], "lr": [0.001]}`) spans the product of
    /// its axes; an array of objects lists cells explicitly.
    #[arg(long, value_name = "JSON")]
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<String>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    task: Option<TaskArg>,
    /// Hypothesis for `--task seg`.
    #[arg(long, value_name = "NAME[:PARAMS]")]
    #[serde(skip_serializing_if = "Option::is_none")]
    hypothesis: Option<String>,
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    optim: OptimArgs,
    /// Cells trained concurrently.
    #[arg(long, value_name = "N")]
    #[serde(skip_serializing_if = "Option::is_none")]
    threads: Option<usize>,
    #[command(flatten)]
    #[serde(skip)]
    config: ConfigArg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridRun {
    data: Option<PathBuf>,
    grid: Option<Value>,
    task: Option<TaskArg>,
    hypothesis: String,
    out: Option<PathBuf>,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    shuffle: bool,
    threads: usize,
}

impl Default for GridRun {
    fn default() -> Self {
        let t = TrainRun::default();
        Self {
            data: None,
            grid: None,
            task: None,
            hypothesis: "linear".into(),
            out: None,
            epochs: t.epochs,
            lr: t.lr,
            batch: t.batch,
            seed: t.seed,
            shuffle: t.shuffle,
            threads: 1,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct EvalHypothesesArgs {
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// Comma-separated hypothesis specs.
    #[arg(long, value_name = "CSV-LIST")]
    #[serde(skip_serializing_if = "Option::is_none")]
    hypotheses: Option<String>,
    #[arg(long, value_name = "DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    optim: OptimArgs,
    /// Hypotheses evaluated concurrently.
    #[arg(long, value_name = "N")]
    #[serde(skip_serializing_if = "Option::is_none")]
    threads: Option<usize>,
    #[command(flatten)]
    #[serde(skip)]
    config: ConfigArg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalRun {
    data: Option<PathBuf>,
    hypotheses: Option<String>,
    out: Option<PathBuf>,
    c: usize,
    d: usize,
    n: usize,
    bn: usize,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    shuffle: bool,
    threads: usize,
}

impl Default for EvalRun {
    fn default() -> Self {
        let t = TrainRun::default();
        Self {
            data: None,
            hypotheses: None,
            out: None,
            c: t.c,
            d: t.d,
            n: t.n,
            bn: t.bn,
            epochs: t.epochs,
            lr: t.lr,
            batch: t.batch,
            seed: t.seed,
            shuffle: t.shuffle,
            threads: 1,
        }
    }
}

#[derive(Debug, Args)]
struct OverlayArgs {
    /// Segmenter `.wsm` file.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Binary PGM input image.
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    /// Output PPM file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Relative-error bound for layer checks; the end-to-end check uses ten
    /// times this value.
    #[arg(long, value_name = "REAL", default_value_t = gradcheck::LAYER_TOLERANCE)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directory written by a training verb, grid-search or
    /// eval-hypotheses.
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
}

/// Parses `args` (program name first), runs the verb and returns the exit
/// code. Errors go to standard error.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            2
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData(a) => {
            let r: GenData = resolve("gen-data", &a, a.config.config.as_deref())?;
            gen_data(&r)
        }
        Command::TrainClassifier(a) => {
            let r: TrainRun = resolve("train-classifier", &a, a.config.config.as_deref())?;
            train_run("train-classifier", &r).map(|_| ())
        }
        Command::TrainSeg(a) => {
            let r: TrainRun = resolve("train-seg", &a, a.common.config.config.as_deref())?;
            train_run("train-seg", &r).map(|_| ())
        }
        Command::GridSearch(a) => {
            let r: GridRun = resolve("grid-search", &a, a.config.config.as_deref())?;
            grid(&r)
        }
        Command::EvalHypotheses(a) => {
            let r: EvalRun = resolve("eval-hypotheses", &a, a.config.config.as_deref())?;
            eval_hypotheses(&r)
        }
        Command::Overlay(a) => {
            overlay::render_overlay(&a.model, &a.image, &a.out)?;
            println!("wrote {}", a.out.display());
            Ok(())
        }
        Command::Gradcheck(a) => run_gradcheck(a.tolerance),
        Command::Report(a) => report(&a.run),
    }
}

/// Keys of a stamp that are not options.
const STAMP_META: [&str; 2] = ["verb", "version"];

fn as_map(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("option structs serialize to objects"),
    }
}

/// Merges command line > config file > defaults into `R`.
fn resolve<A, R>(verb: &str, cli: &A, config: Option<&Path>) -> CliResult<R>
where
    A: Serialize,
    R: Serialize + DeserializeOwned + Default,
{
    let mut merged = as_map(serde_json::to_value(R::default()).expect("options serialize"));
    if let Some(path) = config {
        let file: Value = io::read_json(path)?;
        let Value::Object(mut file) = file else {
            return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display())));
        };
        if let Some(v) = file.get("verb").and_then(Value::as_str) {
            if v != verb {
                return Err(CliError::Usage(format!(
                    "{}: config was written by `{v}`, not `{verb}`",
                    path.display()
                )));
            }
        }
        for k in STAMP_META {
            file.remove(k);
        }
        for (k, v) in file {
            if !merged.contains_key(&k) {
                return Err(CliError::Usage(format!("{}: unknown option `{k}`", path.display())));
            }
            merged.insert(k, v);
        }
    }
    for (k, v) in as_map(serde_json::to_value(cli).expect("options serialize")) {
        merged.insert(k, v);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("invalid option value: {e}")))
}

/// Absolute form of an input path, so stamps work from any directory.
fn absolute(path: &Path) -> CliResult<PathBuf> {
    Ok(std::fs::canonicalize(path).map_err(|e| Error::io(path, e))?)
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref()
        .ok_or_else(|| CliError::Usage(format!("the following required argument was not provided: --{flag}")))
}

fn write_stamp<R: Serialize>(dir: &Path, verb: &str, options: &R) -> CliResult<()> {
    let mut map = Map::new();
    map.insert("verb".into(), verb.into());
    map.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    map.extend(as_map(serde_json::to_value(options).expect("options serialize")));
    io::write_json(dir.join(STAMP_FILE), &Value::Object(map))?;
    Ok(())
}

fn gen_data(r: &GenData) -> CliResult<()> {
    let out = required(&r.out, "out")?;
    if r.labels == 0 {
        return Err(CliError::Usage("--labels must be >= 1".into()));
    }
    let config = DatasetConfig {
        label_range: (r.label_min, r.label_min + r.labels as i64 - 1),
        counts: SplitCounts {
            train: r.train,
            val: r.val,
            test: r.test,
        },
        height: r.size,
        width: r.size,
        f_true: r.ftrue.parse()?,
        mask_mode: match r.mask_mode {
            MaskModeArg::Blob => MaskMode::Blob,
            MaskModeArg::Bernoulli => MaskMode::Bernoulli,
        },
        blob_passes: r.blob_passes,
        texture: TextureParams {
            rough_passes: r.rough_passes,
            smooth_passes: r.smooth_passes,
            amplitude: r.amplitude,
            noise: r.noise,
        },
        seed: r.seed,
    };
    let manifest = generate_dataset(&config, out)?;
    write_stamp(out, "gen-data", r)?;
    println!(
        "wrote {} samples to {} (manifest sha256 {})",
        manifest.samples.len(),
        out.display(),
        manifest.checksum()
    );
    Ok(())
}

fn model_config(r: &TrainRun, dataset: &Dataset) -> ModelConfig {
    ModelConfig {
        c: r.c,
        d: r.d,
        n: r.n,
        blocks: r.bn,
        num_classes: dataset.label_count(),
        input_size: (dataset.config.height, dataset.config.width),
    }
}

fn parse_hypothesis(spec: &str, dataset: &Dataset) -> CliResult<Hypothesis> {
    Ok(Hypothesis::parse(spec, dataset.config.label_range)?)
}

/// Trains one model and writes `model.wsm`, metrics and the stamp to the
/// run's output directory.
fn train_run(verb: &str, r: &TrainRun) -> CliResult<RunMetrics> {
    let data = required(&r.data, "data")?;
    let out = required(&r.out, "out")?;
    let segmenter = verb == "train-seg";
    let hypothesis = if segmenter {
        Some(required(&r.hypothesis, "hypothesis")?.as_str())
    } else {
        None
    };
    let dataset = Dataset::load(data)?;
    let r = &TrainRun {
        data: Some(absolute(data)?),
        ..r.clone()
    };
    let config = model_config(r, &dataset);
    let train = r.train_config();
    let (metrics, model) = match hypothesis {
        Some(spec) => {
            let h = parse_hypothesis(spec, &dataset)?;
            let mut model = Model::segmenter(config, r.seed)?;
            (train_segmenter(&mut model, &dataset, &h, &train)?, model)
        }
        None => {
            let mut model = Model::classifier(config, r.seed)?;
            (train_classifier(&mut model, &dataset, &train)?, model)
        }
    };
    write_run(out, verb, r, &metrics, &model)?;
    summarize(&metrics);
    Ok(metrics)
}

fn write_run(out: &Path, verb: &str, r: &TrainRun, metrics: &RunMetrics, model: &Model) -> CliResult<()> {
    io::create_dir_all(out)?;
    model.save(out.join("model.wsm"))?;
    metrics.write(out)?;
    write_stamp(out, verb, r)
}

fn summarize(m: &RunMetrics) {
    if let Some(c) = &m.classifier {
        println!(
            "accuracy train {:.4} val {:.4} test {:.4} (best val {:.4} at epoch {})",
            c.final_accuracy.train, c.final_accuracy.val, c.final_accuracy.test, c.best_val_accuracy, c.best_epoch
        );
    }
    if let Some(s) = &m.segmenter {
        println!(
            "mse train {:.6} val {:.6} test {:.6}; pixel agreement test {:.4}",
            s.final_mse.train, s.final_mse.val, s.final_mse.test, s.pixel_agreement.test
        );
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridAxes {
    #[serde(default)]
    c: Vec<usize>,
    #[serde(default)]
    d: Vec<usize>,
    #[serde(default)]
    n: Vec<usize>,
    #[serde(default, alias = "blocks")]
    bn: Vec<usize>,
    #[serde(default)]
    lr: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridPoint {
    c: Option<usize>,
    d: Option<usize>,
    n: Option<usize>,
    #[serde(alias = "blocks")]
    bn: Option<usize>,
    lr: Option<f64>,
}

/// Reads `--grid`: inline JSON when it starts with `{` or `[`, else a file.
fn grid_value(spec: &Value) -> CliResult<Value> {
    match spec {
        Value::String(s) if !s.trim_start().starts_with(['{', '[']) => Ok(io::read_json(s)?),
        Value::String(s) => serde_json::from_str(s).map_err(|e| CliError::Usage(format!("--grid: {e}"))),
        other => Ok(other.clone()),
    }
}

fn grid_cells(grid: &Value, base: &ModelConfig) -> CliResult<Vec<GridCell>> {
    let bad = |e: serde_json::Error| CliError::Usage(format!("--grid: {e}"));
    let cell = |c: Option<usize>, d: Option<usize>, n: Option<usize>, bn: Option<usize>, lr: Option<f64>| GridCell {
        model: ModelConfig {
            c: c.unwrap_or(base.c),
            d: d.unwrap_or(base.d),
            n: n.unwrap_or(base.n),
            blocks: bn.unwrap_or(base.blocks),
            ..*base
        },
        lr,
    };
    let cells = match grid {
        Value::Array(_) => {
            let points: Vec<GridPoint> = serde_json::from_value(grid.clone()).map_err(bad)?;
            points.into_iter().map(|p| cell(p.c, p.d, p.n, p.bn, p.lr)).collect()
        }
        _ => {
            let axes: GridAxes = serde_json::from_value(grid.clone()).map_err(bad)?;
            let opt = |v: Vec<usize>| if v.is_empty() { vec![None] } else { v.into_iter().map(Some).collect() };
            let lrs: Vec<Option<f64>> = if axes.lr.is_empty() {
                vec![None]
            } else {
                axes.lr.iter().copied().map(Some).collect()
            };
            let mut out = Vec::new();
            for &c in &opt(axes.c) {
                for &d in &opt(axes.d.clone()) {
                    for &n in &opt(axes.n.clone()) {
                        for &bn in &opt(axes.bn.clone()) {
                            for &lr in &lrs {
                                out.push(cell(c, d, n, bn, lr));
                            }
                        }
                    }
                }
            }
            out
        }
    };
    if cells.is_empty() {
        return Err(CliError::Usage("--grid describes no cells".into()));
    }
    Ok(cells)
}

fn cell_dir_name(i: usize, cell: &GridCell) -> String {
    let m = &cell.model;
    let mut name = format!("cell{i:02}_c{}_d{}_n{}_bn{}", m.c, m.d, m.n, m.blocks);
    if let Some(lr) = cell.lr {
        name.push_str(&format!("_lr{lr}"));
    }
    name
}

fn grid(r: &GridRun) -> CliResult<()> {
    let data = required(&r.data, "data")?;
    let out = required(&r.out, "out")?;
    let task_arg = *required(&r.task, "task")?;
    let grid_spec = grid_value(required(&r.grid, "grid")?)?;
    let dataset = Dataset::load(data)?;
    let base_run = TrainRun {
        data: Some(absolute(data)?),
        epochs: r.epochs,
        lr: r.lr,
        batch: r.batch,
        seed: r.seed,
        shuffle: r.shuffle,
        ..TrainRun::default()
    };
    let base = model_config(&base_run, &dataset);
    let cells = grid_cells(&grid_spec, &base)?;
    let (task, verb, hypothesis) = match task_arg {
        TaskArg::Classifier => (Task::Classifier, "train-classifier", None),
        TaskArg::Seg => (
            Task::Segmenter(parse_hypothesis(&r.hypothesis, &dataset)?),
            "train-seg",
            Some(r.hypothesis.clone()),
        ),
    };
    let ranked = grid_search(&cells, &dataset, &task, &base_run.train_config(), r.threads)?;
    io::create_dir_all(out)?;
    let mut csv = String::from("rank,cell,c,d,n,bn,lr,status,metric,param_count\n");
    let mut rank = 0;
    for entry in &ranked {
        let i = cells.iter().position(|c| c == &entry.cell).expect("entry comes from the grid");
        let name = cell_dir_name(i, &entry.cell);
        let dir = out.join("cells").join(&name);
        let m = &entry.cell.model;
        let cell_run = TrainRun {
            out: Some(dir.clone()),
            hypothesis: hypothesis.clone(),
            c: m.c,
            d: m.d,
            n: m.n,
            bn: m.blocks,
            lr: entry.cell.lr.unwrap_or(r.lr),
            ..base_run.clone()
        };
        let lr = cell_run.lr;
        match &entry.outcome {
            CellOutcome::Trained {
                metric,
                param_count,
                metrics,
                model,
            } => {
                rank += 1;
                write_run(&dir, verb, &cell_run, metrics, model)?;
                csv.push_str(&format!(
                    "{rank},{name},{},{},{},{},{lr},ok,{metric},{param_count}\n",
                    m.c, m.d, m.n, m.blocks
                ));
            }
            CellOutcome::Failed(msg) => {
                io::create_dir_all(&dir)?;
                io::write_text(dir.join("error.txt"), &format!("{msg}\n"))?;
                write_stamp(&dir, verb, &cell_run)?;
                csv.push_str(&format!(",{name},{},{},{},{},{lr},failed,,\n", m.c, m.d, m.n, m.blocks));
            }
        }
    }
    io::write_text(out.join("grid.csv"), &csv)?;
    let stamp = GridRun {
        data: base_run.data.clone(),
        grid: Some(grid_spec),
        ..r.clone()
    };
    write_stamp(out, "grid-search", &stamp)?;
    print!("{csv}");
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

fn eval_hypotheses(r: &EvalRun) -> CliResult<()> {
    let data = required(&r.data, "data")?;
    let out = required(&r.out, "out")?;
    let list = required(&r.hypotheses, "hypotheses")?;
    let dataset = Dataset::load(data)?;
    let hyps = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_hypothesis(s, &dataset))
        .collect::<CliResult<Vec<_>>>()?;
    if hyps.is_empty() {
        return Err(CliError::Usage("--hypotheses lists no hypothesis".into()));
    }
    let as_train = TrainRun {
        c: r.c,
        d: r.d,
        n: r.n,
        bn: r.bn,
        epochs: r.epochs,
        lr: r.lr,
        batch: r.batch,
        seed: r.seed,
        shuffle: r.shuffle,
        ..TrainRun::default()
    };
    let (report, runs) = rank_hypotheses(
        &hyps,
        &dataset,
        &model_config(&as_train, &dataset),
        &as_train.train_config(),
        r.threads,
    )?;
    io::create_dir_all(out)?;
    report.write(out)?;
    for (i, (entry, metrics)) in report.entries.iter().zip(&runs).enumerate() {
        metrics.write(&out.join("runs").join(format!("{:02}_{}", i + 1, sanitize(&entry.name))))?;
    }
    let stamp = EvalRun {
        data: Some(absolute(data)?),
        ..r.clone()
    };
    write_stamp(out, "eval-hypotheses", &stamp)?;
    println!("rank,hypothesis,val_mse,monotonicity");
    for (i, e) in report.entries.iter().enumerate() {
        println!("{},{},{},{:?}", i + 1, e.name, e.val_mse, e.monotonicity.direction);
    }
    Ok(())
}

fn run_gradcheck(tolerance: f64) -> CliResult<()> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(CliError::Usage("--tolerance must be > 0".into()));
    }
    let results = gradcheck::run_suite(tolerance)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!("{status} {:<32} max rel error {:.3e} (tolerance {:.0e})", r.name, r.max_rel_error, r.tolerance);
    }
    if failed > 0 {
        return Err(Error::Invalid(format!("{failed} of {} gradient checks failed", results.len())).into());
    }
    Ok(())
}

/// Rows of `predictions.csv` as `split,label,prediction`.
fn regression_csv(predictions: &str) -> CliResult<String> {
    let mut out = String::from("split,label,prediction\n");
    for (i, line) in predictions.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Invalid(format!("predictions.csv line {}: expected 4 fields", i + 1)).into());
        }
        out.push_str(&format!("{},{},{}\n", f[0], f[2], f[3]));
    }
    Ok(out)
}

/// Consolidates one run directory into `<dir>/report`. Returns the files
/// written.
fn report_dir(dir: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    let pred = dir.join("predictions.csv");
    if pred.is_file() {
        let p = out.join("regression.csv");
        io::write_text(&p, &regression_csv(&io::read_text(&pred)?)?)?;
        written.push(p);
    }
    for name in ["confusion.csv", "per_label.csv", "grid.csv", "hypothesis_mse.csv", "hypothesis_labels.csv"] {
        let src = dir.join(name);
        if src.is_file() {
            let p = out.join(name);
            io::write_text(&p, &io::read_text(&src)?)?;
            written.push(p);
        }
    }
    let ranking = dir.join("hypothesis_ranking.json");
    if ranking.is_file() {
        let p = out.join("ranking.json");
        io::write_text(&p, &io::read_text(&ranking)?)?;
        written.push(p);
    }
    Ok(written)
}

fn report(run: &Path) -> CliResult<()> {
    let out = run.join("report");
    let mut written = report_dir(run, &out)?;
    for sub in ["cells", "runs"] {
        let Ok(entries) = std::fs::read_dir(run.join(sub)) else {
            continue;
        };
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        dirs.sort();
        for d in dirs {
            let name = d.file_name().expect("read_dir entries have names").to_owned();
            written.extend(report_dir(&d, &out.join(sub).join(name))?);
        }
    }
    if written.is_empty() {
        return Err(Error::Invalid(format!("no metrics found in {}", run.display())).into());
    }
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> i32 {
        dispatch(std::iter::once("weakseg").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(code(&["frobnicate"]), 2);
        assert_eq!(code(&[]), 2);
        assert_eq!(code(&["gen-data"]), 2);
        assert_eq!(code(&["gen-data", "--out", "x", "--bogus"]), 2);
        assert_eq!(code(&["train-seg", "--data", "d", "--out", "o"]), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(code(&["--help"]), 0);
        assert_eq!(code(&["gen-data", "--help"]), 0);
    }

    #[test]
    fn missing_flag_is_named() {
        let err = resolve::<_, GenData>("gen-data", &serde_json::json!({}), None).unwrap();
        let msg = gen_data(&err).unwrap_err().to_string();
        assert!(msg.contains("--out"), "{msg}");
    }

    #[test]
    fn precedence_cli_over_config_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"verb": "gen-data", "labels": 3, "train": 7}"#).unwrap();
        let cli = serde_json::json!({"train": 9});
        let r: GenData = resolve("gen-data", &cli, Some(&cfg)).unwrap();
        assert_eq!(r.labels, 3);
        assert_eq!(r.train, 9);
        assert_eq!(r.val, DatasetConfig::default().counts.val);
    }

    #[test]
    fn config_for_other_verb_or_unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"verb": "train-seg"}"#).unwrap();
        let r = resolve::<_, GenData>("gen-data", &serde_json::json!({}), Some(&cfg));
        assert!(matches!(r, Err(CliError::Usage(_))));
        std::fs::write(&cfg, r#"{"colour": 3}"#).unwrap();
        let r = resolve::<_, GenData>("gen-data", &serde_json::json!({}), Some(&cfg));
        assert!(matches!(r, Err(CliError::Usage(_))));
    }

    #[test]
    fn grid_axes_expand_to_product() {
        let base = ModelConfig::default();
        let cells = grid_cells(&serde_json::json!({"c": [4, 8], "bn": [1, 2], "lr": [0.1]}), &base).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().all(|c| c.lr == Some(0.1) && c.model.d == base.d));
        let explicit = grid_cells(&serde_json::json!([{"c": 3}, {"d": 1, "n": 2}]), &base).unwrap();
        assert_eq!(explicit[0].model.c, 3);
        assert_eq!(explicit[1].model.n, 2);
        assert_eq!(explicit[1].lr, None);
        assert!(grid_cells(&serde_json::json!([]), &base).is_err());
        assert!(grid_cells(&serde_json::json!({"q": [1]}), &base).is_err());
    }

    #[test]
    fn regression_rows_drop_index() {
        let csv = regression_csv("split,index,label,prediction\nval,0,3,0.5\n").unwrap();
        assert_eq!(csv, "split,label,prediction\nval,3,0.5\n");
    }
}
