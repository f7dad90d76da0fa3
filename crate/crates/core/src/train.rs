//! Adam, losses, training loops, grid search and evaluation metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::hypothesis::{Hypothesis, LabelMean};
use crate::io;
use crate::model::{Model, ModelConfig, ModelKind};
use crate::rng::{derive_seed, SplitMix64};
use crate::synth::{Dataset, Split, SurfaceSample};
use crate::tensor::Tensor;

/// Samples per forward pass when evaluating a split.
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted: it is the null-update probe.
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.batch_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid training config {self:?}")))
        }
    }
}

/// First and second moment buffers, one per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Invalid(format!(
            "optimizer state holds {} buffers for {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    for (p, m) in store.iter().zip(&state.m) {
        if p.tensor.grad().is_none() {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        if m.len() != p.tensor.len() {
            return Err(Error::ShapeMismatch(vec![m.len()], p.tensor.shape().to_vec()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn cross_entropy_loss(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    g.nll(probs, labels)
}

/// `mean_b (spatial_mean(mask_b) - target_b)^2`.
pub fn weak_label_loss(g: &mut Graph, mask: Var, targets: &[f64]) -> Result<Var> {
    if let Some(&t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::TargetOutOfRange(t));
    }
    let m = g.spatial_mean(mask)?;
    let t = g.input(Tensor::from_vec(&[targets.len()], targets.to_vec())?);
    let diff = g.sub(m, t)?;
    let sq = g.square(diff)?;
    g.mean(sq)
}

/// Entry `(i, j)` counts samples of true class `i` predicted as `j`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0usize; k]; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        if let Some(&bad) = [l, p].iter().find(|&&v| v >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad as i64,
                min: 0,
                max: k as i64 - 1,
            });
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: Split,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub split: Split,
    pub index: usize,
    pub label: i64,
    /// Predicted label for the classifier, spatial mean for the segmenter.
    pub prediction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitValues {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitValues {
    fn set(&mut self, split: Split, v: f64) {
        match split {
            Split::Train => self.train = v,
            Split::Val => self.val = v,
            Split::Test => self.test = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub final_loss: SplitValues,
    pub final_accuracy: SplitValues,
    /// Test-split confusion matrix over class indices `label - t_min`.
    pub confusion: Vec<Vec<usize>>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterMetrics {
    pub hypothesis: String,
    pub final_mse: SplitValues,
    /// Validation split.
    pub per_label: Vec<LabelMean>,
    /// Fraction of pixels where `mask >= 0.5` matches the true mask.
    pub pixel_agreement: SplitValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub kind: ModelKind,
    pub records: Vec<MetricRecord>,
    pub predictions: Vec<Prediction>,
    pub classifier: Option<ClassifierMetrics>,
    pub segmenter: Option<SegmenterMetrics>,
}

impl RunMetrics {
    fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            records: Vec::new(),
            predictions: Vec::new(),
            classifier: None,
            segmenter: None,
        }
    }

    fn record(&mut self, epoch: usize, split: Split, metric: &str, value: f64) {
        self.records.push(MetricRecord {
            epoch,
            split,
            metric: metric.to_string(),
            value,
        });
    }

    /// Loss curve of `split` for `metric`, in epoch order.
    pub fn curve(&self, split: Split, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,split,metric,value\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.metric, r.value));
        }
        s
    }

    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("split,index,label,prediction\n");
        for p in &self.predictions {
            s.push_str(&format!("{},{},{},{}\n", p.split, p.index, p.label, p.prediction));
        }
        s
    }

    /// Writes `metrics.csv`, `predictions.csv`, `summary.json`, and either
    /// `confusion.csv` or `per_label.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_text(dir.join("metrics.csv"), &self.metrics_csv())?;
        io::write_text(dir.join("predictions.csv"), &self.predictions_csv())?;
        if let Some(c) = &self.classifier {
            io::write_text(dir.join("confusion.csv"), &confusion_csv(&c.confusion))?;
        }
        if let Some(s) = &self.segmenter {
            io::write_text(dir.join("per_label.csv"), &per_label_csv(&s.per_label))?;
        }
        let summary = serde_json::json!({
            "kind": self.kind,
            "classifier": self.classifier,
            "segmenter": self.segmenter,
        });
        io::write_json(dir.join("summary.json"), &summary)
    }
}

/// `k` rows of `k` comma-separated counts.
pub fn confusion_csv(m: &[Vec<usize>]) -> String {
    m.iter()
        .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

pub fn per_label_csv(rows: &[LabelMean]) -> String {
    let mut s = String::from("label,target_g,mean_prediction\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.label, r.target_g, r.mean_prediction));
    }
    s
}

fn check_compat(model: &Model, dataset: &Dataset, kind: ModelKind, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if model.kind() != kind {
        return Err(Error::Invalid(format!("expected a {kind:?} model, got {:?}", model.kind())));
    }
    let dc = &dataset.config;
    let (h, w) = model.config().input_size;
    if (h, w) != (dc.height, dc.width) {
        return Err(Error::ShapeMismatch(vec![h, w], vec![dc.height, dc.width]));
    }
    for split in Split::ALL {
        if dataset.split(split).is_empty() {
            return Err(Error::EmptySplit(split.name()));
        }
    }
    Ok(())
}

/// Deterministic epoch ordering of the training split.
struct Batcher {
    rng: SplitMix64,
    order: Vec<usize>,
    shuffle: bool,
}

impl Batcher {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            rng: SplitMix64::new(derive_seed(cfg.seed, &[0x5348_5546])),
            order: (0..n).collect(),
            shuffle: cfg.shuffle,
        }
    }

    fn epoch(&mut self) -> &[usize] {
        if self.shuffle {
            self.rng.shuffle(&mut self.order);
        }
        &self.order
    }
}

/// One optimizer step on `batch`; returns the batch loss.
fn train_step<F>(model: &mut Model, adam: &mut AdamState, cfg: &TrainConfig, images: Tensor, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.input(images);
    let y = model.forward_train(&mut g, x)?;
    let loss = loss_fn(&mut g, y)?;
    let value = g.value(loss)?.data()[0];
    model.params_mut().zero_grad();
    g.backward_into(loss, model.params_mut())?;
    adam_step(model.params_mut(), adam, cfg)?;
    Ok(value)
}

/// Eval-mode outputs for every sample of a split, in order.
fn infer_split(model: &Model, dataset: &Dataset, samples: &[&SurfaceSample]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let y = model.infer(dataset.batch_tensor(chunk)?)?;
        let per = y.len() / chunk.len();
        out.extend(y.data().chunks_exact(per).map(<[f64]>::to_vec));
    }
    Ok(out)
}

fn class_index(dataset: &Dataset, s: &SurfaceSample) -> usize {
    (s.label - dataset.config.label_range.0) as usize
}

struct ClassEval {
    loss: f64,
    accuracy: f64,
    predicted: Vec<usize>,
    truth: Vec<usize>,
}

fn eval_classifier(model: &Model, dataset: &Dataset, split: Split) -> Result<ClassEval> {
    let samples = dataset.split(split);
    let probs = infer_split(model, dataset, &samples)?;
    let truth: Vec<usize> = samples.iter().map(|s| class_index(dataset, s)).collect();
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let loss = probs
        .iter()
        .zip(&truth)
        .map(|(p, &l)| -p[l].max(crate::nn::PROB_FLOOR).ln())
        .sum::<f64>()
        / samples.len() as f64;
    let correct = predicted.iter().zip(&truth).filter(|(p, t)| p == t).count();
    Ok(ClassEval {
        loss,
        accuracy: correct as f64 / samples.len() as f64,
        predicted,
        truth,
    })
}

/// Trains with shuffled mini-batch Adam on cross-entropy. Class index is
/// `label - t_min`. Records train loss and val loss/accuracy per epoch; the
/// final evaluation covers all splits in eval mode.
pub fn train_classifier(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<RunMetrics> {
    check_compat(model, dataset, ModelKind::Classifier, cfg)?;
    let k = dataset.label_count();
    if model.config().num_classes != k {
        return Err(Error::Invalid(format!(
            "model has {} classes, dataset has {k} labels",
            model.config().num_classes
        )));
    }
    let train = dataset.split(Split::Train);
    let mut adam = AdamState::new(model.params());
    let mut batcher = Batcher::new(train.len(), cfg);
    let mut metrics = RunMetrics::new(ModelKind::Classifier);
    let mut best = (0usize, f64::NEG_INFINITY);
    for epoch in 1..=cfg.epochs {
        let order = batcher.epoch().to_vec();
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SurfaceSample> = idx.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| class_index(dataset, s)).collect();
            let images = dataset.batch_tensor(&batch)?;
            let loss = train_step(model, &mut adam, cfg, images, |g, y| cross_entropy_loss(g, y, &labels))?;
            total += loss * batch.len() as f64;
        }
        metrics.record(epoch, Split::Train, "loss", total / train.len() as f64);
        let val = eval_classifier(model, dataset, Split::Val)?;
        metrics.record(epoch, Split::Val, "loss", val.loss);
        metrics.record(epoch, Split::Val, "accuracy", val.accuracy);
        if val.accuracy > best.1 {
            best = (epoch, val.accuracy);
        }
        log::info!(
            "epoch {epoch}/{}: train loss {:.4}, val loss {:.4}, val accuracy {:.3}",
            cfg.epochs,
            total / train.len() as f64,
            val.loss,
            val.accuracy
        );
    }
    let mut loss = SplitValues::default();
    let mut accuracy = SplitValues::default();
    let mut confusion = Vec::new();
    let t_min = dataset.config.label_range.0;
    for split in Split::ALL {
        let e = eval_classifier(model, dataset, split)?;
        loss.set(split, e.loss);
        accuracy.set(split, e.accuracy);
        metrics.record(cfg.epochs, split, "final_loss", e.loss);
        metrics.record(cfg.epochs, split, "final_accuracy", e.accuracy);
        for (s, &p) in dataset.split(split).iter().zip(&e.predicted) {
            metrics.predictions.push(Prediction {
                split,
                index: s.index,
                label: s.label,
                prediction: (p as i64 + t_min) as f64,
            });
        }
        if split == Split::Test {
            confusion = confusion_matrix(&e.predicted, &e.truth, k)?;
        }
    }
    if cfg.epochs == 0 {
        best = (0, accuracy.val);
    }
    metrics.classifier = Some(ClassifierMetrics {
        final_loss: loss,
        final_accuracy: accuracy,
        confusion,
        best_epoch: best.0,
        best_val_accuracy: best.1,
    });
    Ok(metrics)
}

struct SegEval {
    mse: f64,
    means: Vec<f64>,
    agreement: f64,
}

fn eval_segmenter(model: &Model, dataset: &Dataset, h: &Hypothesis, split: Split) -> Result<SegEval> {
    let samples = dataset.split(split);
    let masks = infer_split(model, dataset, &samples)?;
    let mut sq = 0.0;
    let mut agree = 0usize;
    let mut means = Vec::with_capacity(samples.len());
    for (s, m) in samples.iter().zip(&masks) {
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        sq += (mean - h.g(s.label)?).powi(2);
        agree += m.iter().zip(&s.mask).filter(|(&p, &t)| (p >= 0.5) == (t == 1)).count();
        means.push(mean);
    }
    let pixels = samples.len() * dataset.config.height * dataset.config.width;
    Ok(SegEval {
        mse: sq / samples.len() as f64,
        means,
        agreement: agree as f64 / pixels as f64,
    })
}

/// Trains on `weak_label_loss` against `g(t)`. Records per-split MSE per
/// epoch (train from the training batches, val and test in eval mode) and
/// the final per-label means on the validation split.
pub fn train_segmenter(model: &mut Model, dataset: &Dataset, h: &Hypothesis, cfg: &TrainConfig) -> Result<RunMetrics> {
    check_compat(model, dataset, ModelKind::Segmenter, cfg)?;
    for s in dataset.samples() {
        h.g(s.label)?;
    }
    let train = dataset.split(Split::Train);
    let mut adam = AdamState::new(model.params());
    let mut batcher = Batcher::new(train.len(), cfg);
    let mut metrics = RunMetrics::new(ModelKind::Segmenter);
    for epoch in 1..=cfg.epochs {
        let order = batcher.epoch().to_vec();
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SurfaceSample> = idx.iter().map(|&i| train[i]).collect();
            let targets = batch.iter().map(|s| h.g(s.label)).collect::<Result<Vec<_>>>()?;
            let images = dataset.batch_tensor(&batch)?;
            let loss = train_step(model, &mut adam, cfg, images, |g, y| weak_label_loss(g, y, &targets))?;
            total += loss * batch.len() as f64;
        }
        metrics.record(epoch, Split::Train, "mse", total / train.len() as f64);
        let val = eval_segmenter(model, dataset, h, Split::Val)?.mse;
        let test = eval_segmenter(model, dataset, h, Split::Test)?.mse;
        metrics.record(epoch, Split::Val, "mse", val);
        metrics.record(epoch, Split::Test, "mse", test);
        log::info!(
            "epoch {epoch}/{}: train mse {:.5}, val mse {val:.5}",
            cfg.epochs,
            total / train.len() as f64
        );
    }
    let mut mse = SplitValues::default();
    let mut agreement = SplitValues::default();
    let mut per_label = Vec::new();
    for split in Split::ALL {
        let e = eval_segmenter(model, dataset, h, split)?;
        mse.set(split, e.mse);
        agreement.set(split, e.agreement);
        metrics.record(cfg.epochs, split, "final_mse", e.mse);
        metrics.record(cfg.epochs, split, "pixel_agreement", e.agreement);
        let samples = dataset.split(split);
        for (s, &m) in samples.iter().zip(&e.means) {
            metrics.predictions.push(Prediction {
                split,
                index: s.index,
                label: s.label,
                prediction: m,
            });
        }
        if split == Split::Val {
            per_label = label_means(h, &samples, &e.means)?;
        }
    }
    metrics.segmenter = Some(SegmenterMetrics {
        hypothesis: h.name.clone(),
        final_mse: mse,
        per_label,
        pixel_agreement: agreement,
    });
    Ok(metrics)
}

fn label_means(h: &Hypothesis, samples: &[&SurfaceSample], means: &[f64]) -> Result<Vec<LabelMean>> {
    let mut out = Vec::new();
    for t in h.labels() {
        let vals: Vec<f64> = samples
            .iter()
            .zip(means)
            .filter(|(s, _)| s.label == t)
            .map(|(_, &m)| m)
            .collect();
        if vals.is_empty() {
            continue;
        }
        out.push(LabelMean {
            label: t,
            target_g: h.g(t)?,
            mean_prediction: vals.iter().sum::<f64>() / vals.len() as f64,
        });
    }
    Ok(out)
}

/// What a grid search trains.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Classifier,
    Segmenter(Hypothesis),
}

/// One grid point: a model shape and an optional learning-rate override.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub model: ModelConfig,
    pub lr: Option<f64>,
}

impl GridCell {
    fn sort_key(&self) -> (ModelConfig, u64) {
        (self.model, self.lr.map_or(0, f64::to_bits))
    }
}

#[derive(Debug, Clone)]
pub enum CellOutcome {
    Trained {
        /// Validation accuracy (classifier) or validation MSE (segmenter).
        metric: f64,
        param_count: usize,
        metrics: Box<RunMetrics>,
        model: Box<Model>,
    },
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct GridEntry {
    pub cell: GridCell,
    pub outcome: CellOutcome,
}

impl GridEntry {
    pub fn metric(&self) -> Option<f64> {
        match &self.outcome {
            CellOutcome::Trained { metric, .. } => Some(*metric),
            CellOutcome::Failed(_) => None,
        }
    }
}

/// Trains every cell with the same seed. The result lists trained cells
/// best first (higher val accuracy or lower val MSE, then fewer parameters,
/// then config order), followed by failed cells in input order.
pub fn grid_search(
    cells: &[GridCell],
    dataset: &Dataset,
    task: &Task,
    cfg: &TrainConfig,
    threads: usize,
) -> Result<Vec<GridEntry>> {
    if cells.is_empty() {
        return Err(Error::Invalid("empty grid".into()));
    }
    let run = |cell: &GridCell| -> GridEntry {
        let outcome = match run_cell(cell, dataset, task, cfg) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("grid cell {:?} failed: {e}", cell.model);
                CellOutcome::Failed(e.to_string())
            }
        };
        GridEntry { cell: *cell, outcome }
    };
    let mut entries: Vec<GridEntry> = if threads <= 1 {
        cells.iter().map(run).collect()
    } else {
        let chunk = cells.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = cells
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("grid worker panicked"))
                .collect()
        })
    };
    let higher_is_better = matches!(task, Task::Classifier);
    let rank = |e: &GridEntry| match &e.outcome {
        CellOutcome::Trained { metric, param_count, .. } => {
            let m = if higher_is_better { -metric } else { *metric };
            (0u8, m, *param_count)
        }
        CellOutcome::Failed(_) => (1, 0.0, 0),
    };
    entries.sort_by(|a, b| {
        let (fa, ma, pa) = rank(a);
        let (fb, mb, pb) = rank(b);
        fa.cmp(&fb).then(if fa == 0 {
            ma.total_cmp(&mb)
                .then(pa.cmp(&pb))
                .then_with(|| a.cell.sort_key().cmp(&b.cell.sort_key()))
        } else {
            std::cmp::Ordering::Equal
        })
    });
    Ok(entries)
}

fn run_cell(cell: &GridCell, dataset: &Dataset, task: &Task, cfg: &TrainConfig) -> Result<CellOutcome> {
    let cfg = TrainConfig {
        lr: cell.lr.unwrap_or(cfg.lr),
        ..*cfg
    };
    let (metrics, model) = match task {
        Task::Classifier => {
            let mut model = Model::classifier(cell.model, cfg.seed)?;
            (train_classifier(&mut model, dataset, &cfg)?, model)
        }
        Task::Segmenter(h) => {
            let mut model = Model::segmenter(cell.model, cfg.seed)?;
            (train_segmenter(&mut model, dataset, h, &cfg)?, model)
        }
    };
    let metric = match (&metrics.classifier, &metrics.segmenter) {
        (Some(c), _) => c.final_accuracy.val,
        (_, Some(s)) => s.final_mse.val,
        _ => unreachable!("training always records task metrics"),
    };
    Ok(CellOutcome::Trained {
        metric,
        param_count: model.params().scalar_count(),
        metrics: Box::new(metrics),
        model: Box::new(model),
    })
}
