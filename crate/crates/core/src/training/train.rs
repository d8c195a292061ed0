//! Training and evaluation loops on the synthetic task, plus their CSV
//! outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::architecture::{DaeFormer, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor};
use crate::params::ParamStore;

use super::loss::segmentation_loss;
use super::metrics::{compute_metrics, MetricReport};
use super::optim::{Sgd, BASE_LR, MOMENTUM, WEIGHT_DECAY};
use super::synth::{synth_task, SegBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Shapes drawn per synthetic image.
    pub num_shapes: usize,
    /// Size of the held-out evaluation batch.
    pub eval_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            lr: BASE_LR,
            momentum: MOMENTUM,
            weight_decay: WEIGHT_DECAY,
            num_shapes: 2,
            eval_images: 16,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size: must be at least 1".to_string());
        }
        if self.eval_images == 0 {
            out.push("eval_images: must be at least 1".to_string());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            out.push(format!("lr: must be a finite non-negative number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum: must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            out.push(format!("weight_decay: must be a finite non-negative number, got {}", self.weight_decay));
        }
        out
    }
}

/// Independent seed for item `index` of stream `stream` (splitmix64 mix).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// The synthetic batch used at `step`.
pub fn train_batch<T: Scalar>(model: &ModelConfig, train: &TrainConfig, step: usize) -> Result<SegBatch<T>> {
    let seed = derive_seed(model.seed, TRAIN_STREAM, step as u64);
    synth_task(seed, train.batch_size, model.image_size, train.num_shapes, model.num_classes)
}

/// The held-out batch, disjoint in seed space from every training batch.
pub fn eval_batch<T: Scalar>(model: &ModelConfig, train: &TrainConfig) -> Result<SegBatch<T>> {
    let seed = derive_seed(model.seed, EVAL_STREAM, 0);
    synth_task(seed, train.eval_images, model.image_size, train.num_shapes, model.num_classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_dice: f64,
    pub loss_ce: f64,
    pub lr: f64,
}

/// Per-pixel argmax of `H x W x C` logits.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<u32> {
    let c = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Predicts every image of `batch` and scores the label maps.
pub fn evaluate<T: Scalar>(model: &DaeFormer, store: &ParamStore<T>, batch: &SegBatch<T>) -> Result<MetricReport> {
    if batch.num_classes != model.config.num_classes {
        return Err(Error::InvalidArgument(format!(
            "evaluate: batch has {} classes, model predicts {}",
            batch.num_classes, model.config.num_classes
        )));
    }
    let mut pred = Vec::with_capacity(batch.masks.len());
    for i in 0..batch.len() {
        pred.extend(argmax_labels(&model.predict(store, &batch.image(i))?));
    }
    compute_metrics(&pred, &batch.masks, batch.size, batch.size, batch.num_classes)
}

/// One optimizer step on `batch`; the loss is the mean over its images,
/// all recorded on one tape.
pub fn train_step<T: Scalar>(model: &DaeFormer, store: &mut ParamStore<T>, opt: &mut Sgd<T>, batch: &SegBatch<T>, step: usize) -> Result<LogRow> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let inv = T::one() / T::c(batch.len() as f64);
    let (mut dice, mut ce) = (0.0, 0.0);
    let mut objective = None;
    for i in 0..batch.len() {
        let image = tape.constant(batch.image(i));
        let logits = model.forward(&bound, image)?;
        let parts = segmentation_loss(logits, batch.mask(i))?;
        dice += parts.dice.item().as_f64();
        ce += parts.ce.item().as_f64();
        let term = parts.total.scale(inv)?;
        objective = Some(match objective {
            None => term,
            Some(acc) => term.add(acc)?,
        });
    }
    let objective = objective.ok_or_else(|| Error::InvalidArgument("train_step: empty batch".into()))?;
    let mut grads = tape.backward(objective)?;
    store.set_grads(&bound, &mut grads);
    opt.step(store)?;
    let b = batch.len() as f64;
    Ok(LogRow { step, loss_total: objective.item().as_f64(), loss_dice: dice / b, loss_ce: ce / b, lr: opt.lr })
}

pub struct TrainOutcome<T> {
    pub model: DaeFormer,
    pub store: ParamStore<T>,
    pub log: Vec<LogRow>,
    pub report: MetricReport,
}

impl<T> TrainOutcome<T> {
    /// Mean training loss of the last logged step.
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss_total)
    }
}

/// Builds a model from `model_cfg`, trains it and evaluates it on the
/// held-out batch. Fully determined by `model_cfg.seed`.
pub fn train<T: Scalar>(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_with(model_cfg, train_cfg, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with<T: Scalar>(model_cfg: &ModelConfig, train_cfg: &TrainConfig, mut on_step: impl FnMut(&LogRow)) -> Result<TrainOutcome<T>> {
    let problems = train_cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let (model, mut store) = DaeFormer::build::<T>(model_cfg)?;
    let mut opt = Sgd::new(train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay);
    let mut log = Vec::with_capacity(train_cfg.steps);
    for step in 0..train_cfg.steps {
        let batch = train_batch(model_cfg, train_cfg, step)?;
        let row = train_step(&model, &mut store, &mut opt, &batch, step)?;
        on_step(&row);
        log.push(row);
    }
    let report = evaluate(&model, &store, &eval_batch(model_cfg, train_cfg)?)?;
    Ok(TrainOutcome { model, store, log, report })
}

pub const TRAIN_LOG_HEADER: [&str; 5] = ["step", "loss_total", "loss_dice", "loss_ce", "lr"];
pub const EVAL_HEADER: [&str; 6] = ["class", "dsc", "se", "sp", "acc", "hd"];

pub fn write_train_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per present class followed by a `macro` row; absent classes
/// and undefined Hausdorff distances are left empty.
pub fn write_eval_report(path: impl AsRef<Path>, report: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(EVAL_HEADER).map_err(csv_error)?;
    let fmt = |m: &super::metrics::ClassMetrics, label: String| {
        vec![
            label,
            m.dsc.to_string(),
            m.sensitivity.to_string(),
            m.specificity.to_string(),
            m.accuracy.to_string(),
            m.hausdorff.map(|h| h.to_string()).unwrap_or_default(),
        ]
    };
    for (class, m) in report.per_class.iter().enumerate() {
        let record = match m {
            Some(m) => fmt(m, class.to_string()),
            None => vec![class.to_string(), String::new(), String::new(), String::new(), String::new(), String::new()],
        };
        w.write_record(record).map_err(csv_error)?;
    }
    w.write_record(fmt(&report.mean, "macro".to_string())).map_err(csv_error)?;
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("csv: {other:?}")),
    }
}
