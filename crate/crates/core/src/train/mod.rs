//! Mini-batch SGD training loop and evaluation.

mod metrics;
mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use metrics::{read_metrics_csv, MetricsRecord, MetricsWriter, TrainSummary, CSV_HEADER};
pub use optim::{sgd_step, LrSchedule, Sgd};

use crate::data::{random_augment, AugmentOp, Dataset};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::layers::{softmax_cross_entropy, Mode};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Batch size used for evaluation passes (no effect on results).
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: LrSchedule,
    pub seed: u64,
    /// Geometric augmentations, each applied to a training sample with
    /// probability 1/2.
    pub augment: Vec<AugmentOp>,
    /// When false the `wall_time_s` column is written as 0 so that metrics
    /// files from identical runs compare equal byte for byte.
    pub record_wall_time: bool,
    pub train_metrics: TrainMetrics,
}

/// How `train_loss` and `train_accuracy` are measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMetrics {
    /// Averages over the epoch's mini-batches as they were trained, in train
    /// mode (dropout on, batch statistics). Free, but noisy.
    #[default]
    Running,
    /// An extra eval-mode pass over the whole training set once the epoch's
    /// updates are done. Costs about a third of an epoch.
    EvalPass,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay: LrSchedule::default(),
            seed: 0,
            augment: Vec::new(),
            record_wall_time: true,
            train_metrics: TrainMetrics::Running,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted: it turns training into a parameter no-op, which
    /// is useful as a control.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a finite non-negative number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let LrSchedule::Step { every_n_epochs, factor } = self.lr_decay {
            if every_n_epochs == 0 || !(factor > 0.0) {
                return bad("step decay needs every_n_epochs > 0 and factor > 0".into());
            }
        }
        Ok(())
    }
}

/// Anything that maps an `N×H×W×C` batch to `N×K` logits.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f64>>;
}

impl<T: Element> Predictor for ModelGraph<T> {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f64>> {
        Ok(self.infer(&batch.cast())?.logits.cast())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss, accuracy and confusion matrix over a dataset. Only reads the model.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let k = model.num_classes();
    if data.num_classes() != k {
        return Err(Error::Dataset(format!("dataset has {} classes, model head has {k}", data.num_classes())));
    }
    let mut confusion = vec![vec![0; k]; k];
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.logits(&x)?;
        loss_sum += softmax_cross_entropy(&logits, &labels)?.loss * chunk.len() as f64;
        for (row, &y) in logits.data().chunks_exact(k).zip(&labels) {
            confusion[y][argmax(row)] += 1;
        }
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    Ok(Evaluation { loss: loss_sum / data.len() as f64, accuracy: correct as f64 / data.len() as f64, confusion })
}

fn check_compatible<T: Element>(graph: &ModelGraph<T>, data: &Dataset, role: &str) -> Result<()> {
    let cfg = graph.config();
    if data.num_classes() != cfg.num_classes {
        return Err(Error::Dataset(format!(
            "{role} set has {} classes but the model head has {}",
            data.num_classes(),
            cfg.num_classes
        )));
    }
    if data.colorspace().channels() != cfg.input_channels {
        return Err(Error::ColorspaceMismatch {
            expected: cfg.variant().map_or_else(|| format!("{}-channel", cfg.input_channels), |v| v.to_string()),
            found: data.colorspace().to_string(),
        });
    }
    if let Some([h, w, _]) = data.image_shape() {
        if (h, w) != (cfg.input_h, cfg.input_w) {
            return Err(Error::Dataset(format!(
                "{role} images are {h}×{w} but the model expects {}×{}",
                cfg.input_h, cfg.input_w
            )));
        }
    }
    Ok(())
}

/// Mini-batch boundaries for one epoch. The final partial batch is kept; a
/// lone trailing sample is folded into the previous batch because batch
/// normalisation needs at least two values per channel.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() >= 2 && out.last().unwrap().len() == 1 {
        out.pop();
        let start = order.len() - 1 - out.last().unwrap().len();
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Trains in place, calling `on_epoch` after each epoch's validation pass.
///
/// Each epoch reshuffles with a stream derived from `(seed, epoch)`, runs
/// forward/loss/backward/step per mini-batch in train mode, then evaluates
/// the validation set in eval mode. Train metrics follow
/// [`TrainConfig::train_metrics`]. Bit-exact for a given graph, data and config.
pub fn train_with<T: Element>(
    graph: &mut ModelGraph<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    config.validate()?;
    check_compatible(graph, train_set, "training")?;
    check_compatible(graph, val_set, "validation")?;
    if val_set.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    if config.batch_size > train_set.len() {
        return Err(Error::InvalidConfig(format!(
            "batch_size {} exceeds training set size {}",
            config.batch_size,
            train_set.len()
        )));
    }

    let start = Instant::now();
    let base = Rng::new(config.seed);
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    let k = graph.config().num_classes;

    for epoch in 0..config.epochs {
        graph.set_mode(Mode::Train);
        let lr = config.lr_decay.lr_at(config.lr, epoch);
        let stream = 3 * epoch as u64;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        base.fork(stream).shuffle(&mut order);
        let mut layer_rng = base.fork(stream + 1);
        let mut aug_rng = base.fork(stream + 2);

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in batches(&order, config.batch_size).into_iter().enumerate() {
            let (x, labels) = if config.augment.is_empty() {
                train_set.batch(idx)?
            } else {
                let samples = idx
                    .iter()
                    .map(|&i| random_augment(&train_set.samples()[i], &config.augment, &mut aug_rng))
                    .collect();
                let aug = train_set.with_samples(samples)?;
                aug.batch(&(0..idx.len()).collect::<Vec<_>>())?
            };
            let diverged = |e: Error| match e {
                Error::NonFinite(what) => {
                    log::warn!("non-finite value from {what}");
                    Error::Diverged { epoch: epoch + 1, batch: b, loss: f64::NAN }
                }
                e => e,
            };
            let out = graph.forward(&x.cast(), &mut layer_rng).map_err(diverged)?;
            let step = softmax_cross_entropy(&out.logits, &labels)?;
            if !step.loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, batch: b, loss: step.loss });
            }
            graph.zero_grads();
            graph.backward(&step.grad_logits)?;
            opt.step(graph, lr).map_err(diverged)?;
            loss_sum += step.loss * idx.len() as f64;
            correct += out.probs.data().chunks_exact(k).zip(&labels).filter(|(p, &y)| argmax(p) == y).count();
        }
        graph.clear();

        graph.set_mode(Mode::Eval);
        let (train_loss, train_accuracy) = match config.train_metrics {
            TrainMetrics::Running => (loss_sum / train_set.len() as f64, correct as f64 / train_set.len() as f64),
            TrainMetrics::EvalPass => {
                let e = evaluate(graph, train_set)?;
                (e.loss, e.accuracy)
            }
        };
        let val = evaluate(graph, val_set)?;
        let record = MetricsRecord {
            epoch: epoch + 1,
            train_loss,
            train_accuracy,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            wall_time_s: if config.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        log::info!(
            "epoch {:>3}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}",
            record.epoch,
            record.train_loss,
            record.train_accuracy,
            record.val_loss,
            record.val_accuracy
        );
        on_epoch(&record)?;
        history.push(record);
    }
    Ok(history)
}

pub fn train<T: Element>(
    graph: &mut ModelGraph<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<MetricsRecord>> {
    train_with(graph, train_set, val_set, config, |_| Ok(()))
}

#[cfg(test)]
mod tests;
