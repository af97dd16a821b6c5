//! Checkpoints, head surgery, layer freezing and the pretrain → fine-tune
//! workflow, including the scratch-versus-transfer comparison.

mod checkpoint;
mod freeze;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, ManifestEntry, Provenance, FORMAT_VERSION, MAGIC,
};
pub use freeze::{apply_freeze, FreezePlan};

use crate::data::{split, Dataset};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Variant};
use crate::layers::{FullyConnected, Layer};
use crate::rng::Rng;
use crate::tensor::Element;
use crate::train::{train, train_with, MetricsRecord, TrainConfig, TrainSummary};

/// Name of the final fully connected layer.
pub const HEAD_FC: &str = "head.fc2";
/// Rng stream for the fresh head, kept apart from the training streams.
const HEAD_STREAM: u64 = 0x4845_4144;
/// Share of the target set held out for validation by [`finetune`].
pub const VAL_FRACTION: f64 = 0.2;

/// Swaps the final FC for a freshly He-initialised one with
/// `num_classes` outputs. Every other parameter, FC1 included, is untouched.
pub fn replace_head<T: Element>(graph: &mut ModelGraph<T>, num_classes: usize, rng: &mut Rng) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::InvalidConfig(format!("a classifier head needs at least 2 classes, got {num_classes}")));
    }
    let width = graph.config().fc1_width;
    graph.replace_layer(HEAD_FC, Layer::FullyConnected(FullyConnected::new(width, num_classes, rng)?))?;
    graph.config_mut().num_classes = num_classes;
    Ok(())
}

/// Rng used for the replacement head in a run seeded with `seed`.
pub fn head_rng(seed: u64) -> Rng {
    Rng::new(seed).fork(HEAD_STREAM)
}

/// Errors unless `data` has the channel count the checkpoint was trained on.
pub fn check_colorspace(checkpoint: &Checkpoint, data: &Dataset) -> Result<()> {
    let channels = checkpoint.config.input_channels;
    if data.colorspace().channels() != channels {
        let expected = Variant::from_channels(channels).map_or_else(|| format!("{channels}-channel"), |v| v.to_string());
        return Err(Error::ColorspaceMismatch { expected, found: data.colorspace().to_string() });
    }
    Ok(())
}

/// Where a fine-tuned model came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceNote {
    pub checkpoint: PathBuf,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct FinetuneRun<T> {
    pub history: Vec<MetricsRecord>,
    pub graph: ModelGraph<T>,
    pub source: SourceNote,
}

/// Prepares a model for fine-tuning: restore, new head, freeze.
pub fn prepare_finetune<T: Element>(
    checkpoint: &Checkpoint,
    num_classes: usize,
    plan: FreezePlan,
    seed: u64,
) -> Result<ModelGraph<T>> {
    let mut graph = checkpoint.to_graph::<T>()?;
    replace_head(&mut graph, num_classes, &mut head_rng(seed))?;
    apply_freeze(&mut graph, plan)?;
    Ok(graph)
}

/// Load → replace head → freeze → train on explicit train/validation sets.
/// `on_epoch` sees each metrics record as it is produced.
pub fn finetune_split<T: Element>(
    checkpoint_path: &Path,
    train_set: &Dataset,
    val_set: &Dataset,
    num_classes: usize,
    plan: FreezePlan,
    config: &TrainConfig,
    on_epoch: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<FinetuneRun<T>> {
    let ckpt = read_checkpoint(checkpoint_path)?;
    check_colorspace(&ckpt, train_set)?;
    check_colorspace(&ckpt, val_set)?;
    let mut graph = prepare_finetune::<T>(&ckpt, num_classes, plan, config.seed)?;
    log::info!(
        "fine-tuning {} (seed {}, {} epochs) with plan {plan}",
        checkpoint_path.display(),
        ckpt.provenance.seed,
        ckpt.provenance.epochs_trained
    );
    let history = train_with(&mut graph, train_set, val_set, config, on_epoch)?;
    Ok(FinetuneRun {
        history,
        graph,
        source: SourceNote { checkpoint: checkpoint_path.to_path_buf(), provenance: ckpt.provenance },
    })
}

/// Fine-tunes on `target`, holding out a stratified validation share
/// ([`VAL_FRACTION`]) chosen by `config.seed`.
pub fn finetune<T: Element>(
    checkpoint_path: &Path,
    target: &Dataset,
    num_classes: usize,
    plan: FreezePlan,
    config: &TrainConfig,
) -> Result<FinetuneRun<T>> {
    let ckpt = read_checkpoint(checkpoint_path)?;
    check_colorspace(&ckpt, target)?;
    let parts = split(target, &[1.0 - VAL_FRACTION, VAL_FRACTION], config.seed)?;
    finetune_split(checkpoint_path, &parts[0], &parts[1], num_classes, plan, config, |_| Ok(()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub train: TrainConfig,
    pub plan: FreezePlan,
    /// Seeds `train.seed, train.seed + 1, ...`; each fixes the split, the
    /// head initialisation and the data order for both arms.
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub seed: u64,
    pub best_val_accuracy: f64,
    /// First epoch reaching `best_val_accuracy`.
    pub best_epoch: usize,
    pub history: Vec<MetricsRecord>,
}

impl ArmResult {
    fn new(seed: u64, history: Vec<MetricsRecord>) -> Self {
        let s = TrainSummary::from_history(&history);
        ArmResult { seed, best_val_accuracy: s.best_val_accuracy, best_epoch: s.best_epoch, history }
    }

    /// First epoch whose validation accuracy reaches `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.history.iter().find(|r| r.val_accuracy >= threshold).map(|r| r.epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub scratch_best_val_accuracy: f64,
    pub scratch_epochs_to_best: usize,
    /// Epochs the fine-tuned arm needs to match the scratch arm's best, if
    /// it ever does.
    pub finetuned_epochs_to_scratch_best: Option<usize>,
    /// Fine-tuned arm matched the scratch best in at most half the epochs.
    pub halved: bool,
}

impl SeedComparison {
    fn new(scratch: &ArmResult, finetuned: &ArmResult) -> Self {
        let hit = finetuned.epochs_to(scratch.best_val_accuracy);
        SeedComparison {
            seed: scratch.seed,
            scratch_best_val_accuracy: scratch.best_val_accuracy,
            scratch_epochs_to_best: scratch.best_epoch,
            finetuned_epochs_to_scratch_best: hit,
            halved: hit.is_some_and(|e| 2 * e <= scratch.best_epoch),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source_checkpoint: PathBuf,
    pub source_provenance: Provenance,
    pub config: CompareConfig,
    pub scratch: Vec<ArmResult>,
    pub finetuned: Vec<ArmResult>,
    pub comparisons: Vec<SeedComparison>,
    /// Seeds where the fine-tuned arm needed at most half the epochs.
    pub halved_count: usize,
}

impl TransferReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Trains a from-scratch arm and a fine-tuned arm per seed on identical
/// target splits.
///
/// The scratch arm starts from the source architecture initialised with the
/// source's own seed (the model as it was before pretraining), so the two
/// arms differ only in whether pretraining happened. Both get the same
/// fresh head.
pub fn compare_transfer<T: Element>(
    source_checkpoint: &Path,
    target: &Dataset,
    config: &CompareConfig,
    mut on_seed: impl FnMut(&SeedComparison),
) -> Result<TransferReport> {
    if config.n_seeds < 3 {
        return Err(Error::InvalidConfig(format!("compare needs at least 3 seeds, got {}", config.n_seeds)));
    }
    let ckpt = read_checkpoint(source_checkpoint)?;
    check_colorspace(&ckpt, target)?;
    let k = target.num_classes();
    let (mut scratch, mut finetuned, mut comparisons) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..config.n_seeds as u64 {
        let seed = config.train.seed.wrapping_add(i);
        let cfg = TrainConfig { seed, ..config.train.clone() };
        let parts = split(target, &[1.0 - VAL_FRACTION, VAL_FRACTION], seed)?;

        let mut g = ModelGraph::<T>::assemble(&ckpt.config, &mut Rng::new(ckpt.provenance.seed))?;
        replace_head(&mut g, k, &mut head_rng(seed))?;
        let s = ArmResult::new(seed, train(&mut g, &parts[0], &parts[1], &cfg)?);

        let mut g = prepare_finetune::<T>(&ckpt, k, config.plan, seed)?;
        let f = ArmResult::new(seed, train(&mut g, &parts[0], &parts[1], &cfg)?);

        let c = SeedComparison::new(&s, &f);
        log::info!(
            "seed {seed}: scratch best {:.3} at epoch {}, fine-tuned reaches it at {:?}",
            c.scratch_best_val_accuracy,
            c.scratch_epochs_to_best,
            c.finetuned_epochs_to_scratch_best
        );
        on_seed(&c);
        scratch.push(s);
        finetuned.push(f);
        comparisons.push(c);
    }
    let halved_count = comparisons.iter().filter(|c| c.halved).count();
    Ok(TransferReport {
        source_checkpoint: source_checkpoint.to_path_buf(),
        source_provenance: ckpt.provenance,
        config: config.clone(),
        scratch,
        finetuned,
        comparisons,
        halved_count,
    })
}
