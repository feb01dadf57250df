//! Training loop: Adam over the recorded graph, exponential learning-rate
//! decay, per-epoch checkpoints and CSV history, and paired comparison
//! runs that differ in exactly one setting.
//!
//! Everything is keyed off one seed. Shuffle order and per-sample
//! augmentation draw from seeds derived per epoch and sample, so a
//! resumed run replays the exact remaining epochs.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::io::{load_checkpoint, save_checkpoint, write_json_atomic, CheckpointMeta};
use crate::losses::{dice_ce_loss, hierarchical_loss, HierarchyWeights, LossValue, Normalization};
use crate::mask::{Mask, MaskBatch};
use crate::metrics::{evaluate, MetricsReport};
use crate::models::{build_model, GraphExec, Mode, Model, ModelSpec, ProcessorSpec, TinyUNetSpec};
use crate::nn::ParamSet;
use crate::synth::{augment, derive_seed, Dataset, SplitId};
use crate::tensor::{Element, Tensor};

/// Objective to optimize.
#[derive(Copy, Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Species, genus, and taxon cross entropies, blended.
    Hloss,
    /// Soft Dice plus species cross entropy.
    DiceCe,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Hloss => "hloss",
            LossKind::DiceCe => "dice_ce",
        }
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_gamma() -> f64 {
    0.99
}
fn default_epochs() -> usize {
    300
}
fn default_batch() -> usize {
    4
}
fn default_augment() -> bool {
    true
}
fn default_base_channels() -> usize {
    16
}
fn default_depth() -> usize {
    3
}

/// One training run, fully specified. Deserializes from JSON with every
/// field optional except the two directories.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "Mode::time_series_default")]
    pub mode: Mode,
    #[serde(default = "TrainConfig::default_loss")]
    pub loss: LossKind,
    #[serde(default = "TrainConfig::default_normalization")]
    pub normalization: Normalization,
    #[serde(default)]
    pub weights: HierarchyWeights,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_gamma")]
    pub lr_decay_gamma: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_augment")]
    pub augment: bool,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Stop once the epoch's evaluation reaches this mIoU.
    #[serde(default)]
    pub stop_at_miou: Option<f64>,
    /// Checkpoint to continue from; epochs already run count toward
    /// `epochs`.
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

impl TrainConfig {
    fn default_loss() -> LossKind {
        LossKind::Hloss
    }
    fn default_normalization() -> Normalization {
        Normalization::ByPixels
    }

    pub fn new(data_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            data_dir: data_dir.into(),
            out_dir: out_dir.into(),
            mode: Mode::TimeSeries,
            loss: Self::default_loss(),
            normalization: Self::default_normalization(),
            weights: HierarchyWeights::default(),
            lr: default_lr(),
            lr_decay_gamma: default_gamma(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            augment: default_augment(),
            base_channels: default_base_channels(),
            depth: default_depth(),
            stop_at_miou: None,
            resume: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push(format!("lr {} must be positive", self.lr));
        }
        if !(self.lr_decay_gamma > 0.0 && self.lr_decay_gamma <= 1.0) {
            problems.push(format!(
                "lr_decay_gamma {} must sit in (0, 1]",
                self.lr_decay_gamma
            ));
        }
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if let Some(t) = self.stop_at_miou {
            if !(0.0..=1.0).contains(&t) {
                problems.push(format!("stop_at_miou {t} must sit in [0, 1]"));
            }
        }
        let w = &self.weights;
        if [w.lambda1, w.lambda2, w.lambda3]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            problems.push("hierarchy weights must be finite and nonnegative".to_string());
        }
        if self.base_channels == 0 {
            problems.push("base_channels must be positive".to_string());
        }
        if !(1..=6).contains(&self.depth) {
            problems.push(format!("depth {} must be in 1..=6", self.depth));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

impl Mode {
    fn time_series_default() -> Mode {
        Mode::TimeSeries
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. Moments are stored at the parameter dtype;
/// the update itself runs in f64.
pub struct AdamState<E: Element> {
    pub step: u64,
    pub m: ParamSet<E>,
    pub v: ParamSet<E>,
}

impl<E: Element> AdamState<E> {
    pub fn new(params: &ParamSet<E>) -> Self {
        let zeros_like = |src: &ParamSet<E>| {
            let mut out = ParamSet::new();
            for (name, t) in src.iter() {
                out.insert(name, Tensor::zeros(t.shape())).expect("unique names");
            }
            out
        };
        AdamState {
            step: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }

    pub fn from_parts(step: u64, m: ParamSet<E>, v: ParamSet<E>) -> Self {
        AdamState { step, m, v }
    }

    /// One update over every parameter. Rejects non-finite gradients by
    /// parameter name.
    pub fn apply(
        &mut self,
        params: &mut ParamSet<E>,
        grads: &[Vec<E>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let (name, p) = params.entry_mut(i);
            if grads[i].len() != p.numel() {
                return Err(Error::invalid(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    grads[i].len(),
                    p.numel()
                )));
            }
            let name = name.to_string();
            let m = self.m.entry_mut(i).1.data_mut();
            let v = self.v.entry_mut(i).1.data_mut();
            let (_, p) = params.entry_mut(i);
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let g = grads[i][j].as_f64();
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient for {name}")));
                }
                let mj = BETA1 * m[j].as_f64() + (1.0 - BETA1) * g;
                let vj = BETA2 * v[j].as_f64() + (1.0 - BETA2) * g * g;
                m[j] = E::from_f64(mj);
                v[j] = E::from_f64(vj);
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
                pd[j] = E::from_f64(pd[j].as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Learning rate for a 0-based epoch: `lr * gamma^epoch`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay_gamma.powi(epoch as i32)
}

/// Builds the model description a config implies for a dataset.
pub fn model_spec_for(cfg: &TrainConfig, ds: &Dataset) -> Result<ModelSpec> {
    let classes = ds.taxonomy.num_species();
    let mut unet = TinyUNetSpec::new(3, classes);
    unet.base_channels = cfg.base_channels;
    unet.depth = cfg.depth;
    let spec = match cfg.mode {
        Mode::SingleImage => ModelSpec::single_image(unet),
        Mode::TimeSeries => {
            let processor = ProcessorSpec::default();
            if ds.manifest.time_steps != processor.time_steps {
                return Err(Error::invalid(format!(
                    "dataset holds {} time steps, the temporal collapse wants {}",
                    ds.manifest.time_steps, processor.time_steps
                )));
            }
            unet.in_channels = processor.out_channels;
            ModelSpec::time_series(processor, unet)
        }
    };
    spec.validate()?;
    let div = spec.unet.spatial_divisor();
    let (h, w) = (ds.manifest.tile_height, ds.manifest.tile_width);
    if h % div != 0 || w % div != 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} tiles are not divisible by {div} (depth {})",
            spec.unet.depth
        )));
    }
    Ok(spec)
}

/// Shapes one raw (T, C, H, W) tile into a single-sample model input:
/// the full stack for the time-series mode, the reference frame alone for
/// the single-image mode.
pub fn model_input(
    mode: Mode,
    image: &Tensor<f32>,
    reference_index: usize,
) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!(
            "tile wants shape (T, C, H, W), got {s:?}"
        )));
    }
    match mode {
        Mode::TimeSeries => image.reshaped(&[1, s[0], s[1], s[2], s[3]]),
        Mode::SingleImage => {
            if reference_index >= s[0] {
                return Err(Error::invalid(format!(
                    "reference frame {reference_index} outside the {} steps",
                    s[0]
                )));
            }
            let plane = s[1] * s[2] * s[3];
            let data = image.data()[reference_index * plane..(reference_index + 1) * plane].to_vec();
            Tensor::new(vec![1, s[1], s[2], s[3]], data)
        }
    }
}

/// Stacks samples into one batch input plus the matching label batch.
pub fn batch_input(
    mode: Mode,
    samples: &[(Tensor<f32>, Mask)],
    reference_index: usize,
) -> Result<(Tensor<f32>, MaskBatch)> {
    let Some(first) = samples.first() else {
        return Err(Error::invalid("empty batch"));
    };
    let first_in = model_input(mode, &first.0, reference_index)?;
    let mut shape = first_in.shape().to_vec();
    let mut data = Vec::with_capacity(first_in.numel() * samples.len());
    data.extend_from_slice(first_in.data());
    for (i, (img, _)) in samples.iter().enumerate().skip(1) {
        let one = model_input(mode, img, reference_index)?;
        if one.shape() != first_in.shape() {
            return Err(Error::invalid(format!(
                "sample {i} input is {:?}, batch is {:?}",
                one.shape(),
                first_in.shape()
            )));
        }
        data.extend_from_slice(one.data());
    }
    shape[0] = samples.len();
    let input = Tensor::new(shape, data)?;
    let masks: Vec<Mask> = samples.iter().map(|(_, m)| m.clone()).collect();
    Ok((input, MaskBatch::from_masks(&masks)?))
}

fn build_loss(
    g: &mut Graph<f32>,
    cfg: &TrainConfig,
    probs: crate::graph::NodeId,
    labels: &MaskBatch,
    ds: &Dataset,
) -> Result<LossValue> {
    match cfg.loss {
        LossKind::Hloss => {
            hierarchical_loss(g, probs, labels, &ds.taxonomy, &cfg.weights, cfg.normalization)
        }
        LossKind::DiceCe => dice_ce_loss(g, probs, labels),
    }
}

/// Scores a model over one split of a dataset.
pub fn evaluate_split(model: &Model<f32>, ds: &Dataset, split: SplitId) -> Result<MetricsReport> {
    let reference = ds.manifest.reference_time_index;
    let mode = model.spec.mode;
    evaluate(
        ds.iter_split(split),
        |image| {
            let input = model_input(mode, image, reference)?;
            let out = model.predict_mask(input)?;
            Mask::new(out.h, out.w, out.data)
        },
        &ds.taxonomy,
    )
}

/// Loads a checkpoint and scores it over one split.
pub fn evaluate_checkpoint(
    ckpt: &Path,
    data_dir: &Path,
    split: SplitId,
) -> Result<(MetricsReport, CheckpointMeta)> {
    let loaded = load_checkpoint::<f32>(ckpt)?;
    let ds = Dataset::open(data_dir)?;
    if ds.indices_of(split).is_empty() {
        return Err(Error::invalid(format!(
            "the {} split is empty; assign splits first",
            split.name()
        )));
    }
    let model = Model {
        spec: loaded.meta.model,
        params: loaded.params,
    };
    let report = evaluate_split(&model, &ds, split)?;
    let meta = CheckpointMeta {
        model: model.spec,
        ..loaded.meta
    };
    Ok((report, meta))
}

pub const CSV_HEADER: &str =
    "epoch,lr,loss_total,loss_species,loss_genus,loss_taxon,loss_dice,loss_ce,val_miou";

/// Component columns in CSV order.
const COMPONENT_COLUMNS: [&str; 5] = ["species", "genus", "taxon", "dice", "ce"];

fn csv_row(epoch: usize, lr: f64, total: f64, components: &[(String, f64)], miou: f64) -> String {
    let mut row = format!("{epoch},{lr},{total}");
    for col in COMPONENT_COLUMNS {
        match components.iter().find(|(n, _)| n == col) {
            Some((_, v)) => row.push_str(&format!(",{v}")),
            None => row.push(','),
        }
    }
    row.push_str(&format!(",{miou}"));
    row
}

/// Outcome of a [`train`] call.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_val_miou: f64,
    pub best_epoch: usize,
    pub final_loss: f64,
    pub stopped_early: bool,
    /// Split the per-epoch score was computed on: val when present,
    /// otherwise train.
    pub eval_split: String,
    pub csv_path: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Runs the full loop: shuffled minibatches, Adam, exponential decay,
/// per-epoch evaluation, `last.ckpt`/`best.ckpt`, and `training_log.csv`
/// under `cfg.out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.data_dir)?;
    let spec = model_spec_for(cfg, &ds)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_json_atomic(&cfg.out_dir.join("resolved_config.json"), cfg)?;

    let train_idx = ds.indices_of(SplitId::Train);
    if train_idx.is_empty() {
        return Err(Error::invalid("the train split is empty"));
    }
    let eval_split = if ds.indices_of(SplitId::Val).is_empty() {
        SplitId::Train
    } else {
        SplitId::Val
    };

    let csv_path = cfg.out_dir.join("training_log.csv");
    let last_path = cfg.out_dir.join("last.ckpt");
    let best_path = cfg.out_dir.join("best.ckpt");

    let mut model: Model<f32>;
    let mut adam: AdamState<f32>;
    let mut best_miou: f64;
    let mut best_epoch: usize;
    let start_epoch: usize;
    let mut csv_rows: Vec<String>;

    match &cfg.resume {
        None => {
            model = build_model(&spec, cfg.seed)?;
            adam = AdamState::new(&model.params);
            best_miou = f64::NEG_INFINITY;
            best_epoch = 0;
            start_epoch = 0;
            csv_rows = Vec::new();
        }
        Some(path) => {
            let loaded = load_checkpoint::<f32>(path)?;
            if loaded.meta.model != spec {
                return Err(Error::invalid(format!(
                    "checkpoint was trained as {:?}, this config wants {:?}",
                    loaded.meta.model, spec
                )));
            }
            let (Some(m), Some(v)) = (loaded.adam_m, loaded.adam_v) else {
                return Err(Error::invalid(
                    "checkpoint carries no optimizer state, cannot resume",
                ));
            };
            start_epoch = loaded.meta.epoch;
            if start_epoch >= cfg.epochs {
                return Err(Error::invalid(format!(
                    "checkpoint already ran {start_epoch} epochs, config asks for {}",
                    cfg.epochs
                )));
            }
            model = Model {
                spec: spec.clone(),
                params: loaded.params,
            };
            adam = AdamState::from_parts(loaded.meta.adam_step, m, v);
            best_miou = loaded.meta.best_val_miou.unwrap_or(f64::NEG_INFINITY);
            best_epoch = start_epoch;
            // keep history up to the resume point, drop anything later
            csv_rows = match std::fs::read_to_string(&csv_path) {
                Ok(text) => text
                    .lines()
                    .skip(1)
                    .filter(|l| {
                        l.split(',')
                            .next()
                            .and_then(|e| e.parse::<usize>().ok())
                            .is_some_and(|e| e < start_epoch)
                    })
                    .map(str::to_string)
                    .collect(),
                Err(_) => Vec::new(),
            };
        }
    }

    let reference = ds.manifest.reference_time_index;
    let mut final_loss = f64::NAN;
    let mut stopped_early = false;
    let mut epochs_run = start_epoch;

    for epoch in start_epoch..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let mut order = train_idx.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut component_sums: Vec<(String, f64)> = Vec::new();
        let mut sample_count = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let mut samples = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let (img, mask) = ds.load_sample(idx)?;
                if cfg.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        &[2, epoch as u64, idx as u64],
                    ));
                    samples.push(augment(&img, &mask, &mut rng)?);
                } else {
                    samples.push((img, mask));
                }
            }
            let (input, labels) = batch_input(cfg.mode, &samples, reference)?;

            let mut graph = Graph::new();
            // a diverging run must surface as an error, not a panic
            graph.set_check_finite(false);
            let mut ex = GraphExec::new(&mut graph, &model.params);
            let logits = model.logits(&mut ex, input)?;
            let probs = ex.graph.softmax(logits, 1)?;
            let loss = build_loss(ex.graph, cfg, probs, &labels, &ds)?;
            let total = ex.graph.value(loss.total).item()?.as_f64();
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}"
                )));
            }
            ex.graph.backward(loss.total)?;
            let ids = ex.param_ids().to_vec();
            let grads: Vec<Vec<f32>> = ids
                .iter()
                .map(|&id| graph.take_grad(id).expect("parameters are leaves"))
                .collect();
            adam.apply(&mut model.params, &grads, lr)?;

            let n = chunk.len() as f64;
            loss_sum += total * n;
            for (name, v) in &loss.components {
                match component_sums.iter_mut().find(|(n2, _)| n2 == name) {
                    Some((_, s)) => *s += v * n,
                    None => component_sums.push((name.clone(), v * n)),
                }
            }
            sample_count += chunk.len();
        }

        let denom = sample_count as f64;
        let epoch_loss = loss_sum / denom;
        let components: Vec<(String, f64)> = component_sums
            .iter()
            .map(|(n, s)| (n.clone(), s / denom))
            .collect();

        let report = evaluate_split(&model, &ds, eval_split)?;
        let miou = report.miou;

        csv_rows.push(csv_row(epoch, lr, epoch_loss, &components, miou));
        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        for row in &csv_rows {
            text.push_str(row);
            text.push('\n');
        }
        crate::io::write_atomic(&csv_path, text.as_bytes())?;

        let improved = miou > best_miou;
        if improved {
            best_miou = miou;
            best_epoch = epoch;
        }
        let meta = CheckpointMeta {
            model: spec.clone(),
            epoch: epoch + 1,
            seed: cfg.seed,
            loss: epoch_loss,
            has_optimizer: true,
            adam_step: adam.step,
            best_val_miou: Some(best_miou),
            normalization: cfg.normalization,
            weights: cfg.weights.clone(),
        };
        save_checkpoint(&last_path, &meta, &model.params, Some((&adam.m, &adam.v)))?;
        if improved {
            save_checkpoint(&best_path, &meta, &model.params, Some((&adam.m, &adam.v)))?;
        }

        final_loss = epoch_loss;
        epochs_run = epoch + 1;
        if cfg.stop_at_miou.is_some_and(|t| miou >= t) {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainSummary {
        epochs_run,
        best_val_miou: best_miou,
        best_epoch,
        final_loss,
        stopped_early,
        eval_split: eval_split.name().to_string(),
        csv_path,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
    })
}

/// Per-class comparison row between two runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareRow {
    pub class: String,
    pub iou_a: Option<f64>,
    pub iou_b: Option<f64>,
    /// `iou_a - iou_b` when both are defined.
    pub delta: Option<f64>,
}

/// IoU over the two confusable species, averaged.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairStats {
    pub names: [String; 2],
    pub mean_iou_a: f64,
    pub mean_iou_b: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeComparison {
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<CompareRow>,
    pub miou_a: f64,
    pub miou_b: f64,
    pub pair: Option<PairStats>,
}

impl ModeComparison {
    /// One row per class plus a final mIoU row; empty cells mark classes
    /// whose IoU is undefined on the test split.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = format!("class,iou_{},iou_{},delta\n", self.label_a, self.label_b);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.class,
                fmt(r.iou_a),
                fmt(r.iou_b),
                fmt(r.delta)
            ));
        }
        out.push_str(&format!(
            "mIoU,{},{},{}\n",
            self.miou_a,
            self.miou_b,
            self.miou_a - self.miou_b
        ));
        out
    }
}

fn train_and_score(cfg: &TrainConfig) -> Result<MetricsReport> {
    train(cfg)?;
    let (report, _) =
        evaluate_checkpoint(&cfg.out_dir.join("best.ckpt"), &cfg.data_dir, SplitId::Test)?;
    Ok(report)
}

fn compare_runs(
    cfg_a: &TrainConfig,
    label_a: &str,
    cfg_b: &TrainConfig,
    label_b: &str,
) -> Result<ModeComparison> {
    let ds = Dataset::open(&cfg_a.data_dir)?;
    if ds.indices_of(SplitId::Test).is_empty() {
        return Err(Error::invalid("the test split is empty; assign splits first"));
    }
    let ra = train_and_score(cfg_a)?;
    let rb = train_and_score(cfg_b)?;

    let rows: Vec<CompareRow> = ra
        .class_names
        .iter()
        .enumerate()
        .map(|(i, class)| {
            let (a, b) = (ra.per_class_iou[i], rb.per_class_iou[i]);
            CompareRow {
                class: class.clone(),
                iou_a: a,
                iou_b: b,
                delta: a.zip(b).map(|(a, b)| a - b),
            }
        })
        .collect();

    let pair_names = &ds.manifest.confusable_pair;
    let pair_iou = |r: &MetricsReport| -> f64 {
        let mut sum = 0.0;
        for name in pair_names {
            let i = r.class_names.iter().position(|n| n == name);
            sum += i.and_then(|i| r.per_class_iou[i]).unwrap_or(0.0);
        }
        sum / 2.0
    };
    let pair = Some(PairStats {
        names: pair_names.clone(),
        mean_iou_a: pair_iou(&ra),
        mean_iou_b: pair_iou(&rb),
        delta: pair_iou(&ra) - pair_iou(&rb),
    });

    Ok(ModeComparison {
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        rows,
        miou_a: ra.miou,
        miou_b: rb.miou,
        pair,
    })
}

/// Trains the full-stack and reference-frame variants under identical
/// settings and compares them on the test split.
pub fn compare_modes(base: &TrainConfig) -> Result<ModeComparison> {
    let mut a = base.clone();
    a.mode = Mode::TimeSeries;
    a.out_dir = base.out_dir.join("time_series");
    let mut b = base.clone();
    b.mode = Mode::SingleImage;
    b.out_dir = base.out_dir.join("single_image");
    compare_runs(&a, "time_series", &b, "single_image")
}

/// Trains the two objectives under identical settings and compares them
/// on the test split.
pub fn compare_losses(base: &TrainConfig) -> Result<ModeComparison> {
    let mut a = base.clone();
    a.loss = LossKind::Hloss;
    a.out_dir = base.out_dir.join("hloss");
    let mut b = base.clone();
    b.loss = LossKind::DiceCe;
    b.out_dir = base.out_dir.join("dice_ce");
    compare_runs(&a, "hloss", &b, "dice_ce")
}
