//! Subcommand bodies. Each returns the files it wrote, all under the run's
//! output directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mednet_core::data::{load_image_dir, save_image_dir, split, synth_with, Dataset, SynthOptions};
use mednet_core::gradcheck::run_suite;
use mednet_core::graph::{build_mednet, MedNetConfig, ModelGraph};
use mednet_core::train::{evaluate, train_with, Evaluation, MetricsRecord, MetricsWriter, TrainSummary};
use mednet_core::transfer::{
    check_colorspace, compare_transfer, finetune_split, read_checkpoint, save_checkpoint, CompareConfig, Provenance,
    SourceNote,
};
use mednet_core::Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::Command;

pub struct Ctx {
    pub config: RunConfig,
    pub out_dir: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, file: &str) -> Result<PathBuf> {
        match &self.out_dir {
            Some(d) => Ok(d.join(file)),
            None => bail!("this command needs --out-dir"),
        }
    }

    fn synth_options(&self) -> SynthOptions {
        let c = &self.config;
        let mut o = SynthOptions::new(c.variant, c.classes, c.per_class, c.input_size, c.seed);
        o.intensity_cue = c.intensity_cue;
        o
    }

    fn load(&self, dir: &Path, size: usize) -> Result<Dataset> {
        let loaded = load_image_dir(dir, self.config.variant, (size, size))
            .with_context(|| format!("loading dataset {}", dir.display()))?;
        if !loaded.skipped.is_empty() {
            log::warn!("{} unreadable files skipped", loaded.skipped.len());
        }
        log::info!("{}: {} images, classes {:?}", dir.display(), loaded.dataset.len(), loaded.dataset.class_names());
        Ok(loaded.dataset)
    }

    fn split(&self, data: &Dataset) -> Result<(Dataset, Dataset)> {
        let vf = self.config.val_fraction;
        let mut parts = split(data, &[1.0 - vf, vf], self.config.seed)?.into_iter();
        Ok((parts.next().unwrap(), parts.next().unwrap()))
    }
}

pub fn dispatch(ctx: &Ctx, cmd: &Command) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::Summary { .. } => summary(ctx),
        Command::SynthData { .. } => synth_data(ctx),
        Command::Pretrain { data, .. } => pretrain(ctx, data.as_deref()),
        Command::Finetune { checkpoint, data, .. } => finetune(ctx, checkpoint, data),
        Command::Eval { checkpoint, data } => eval(ctx, checkpoint.as_deref(), data),
        Command::Gradcheck { .. } => gradcheck(ctx),
        Command::Compare { checkpoint, data, .. } => compare(ctx, checkpoint, data),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn summary(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let c = &ctx.config;
    let cfg = MedNetConfig::canonical_with_input(c.variant, c.classes, c.input_size);
    let graph = build_mednet::<f32>(&cfg, &mut Rng::new(c.seed))?;
    println!("{}", graph.summary(1));
    Ok(Vec::new())
}

fn synth_data(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let dir = ctx.out_dir.clone().context("synth-data needs --out-dir")?;
    let data = synth_with(&ctx.synth_options())?;
    save_image_dir(&data, &dir)?;
    println!("wrote {} images in {} classes to {}", data.len(), data.num_classes(), dir.display());
    Ok(data.class_names().iter().map(|n| dir.join(n)).collect())
}

/// Per-epoch callback: log a line and append the record to the metrics CSV.
fn epoch_logger(path: &Path) -> Result<impl FnMut(&MetricsRecord) -> mednet_core::Result<()>> {
    let mut writer = MetricsWriter::create(path)?;
    Ok(move |r: &MetricsRecord| {
        log::info!(
            "epoch {:>3}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.val_loss,
            r.val_accuracy
        );
        writer.append(r)
    })
}

fn pretrain(ctx: &Ctx, data_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    let c = &ctx.config;
    let (data, tag) = match data_dir {
        Some(dir) => (ctx.load(dir, c.input_size)?, dir.display().to_string()),
        None => {
            let o = ctx.synth_options();
            let tag = format!("synth-{}-{}x{}-{}px-seed{}", o.colorspace, o.num_classes, o.samples_per_class, o.size, o.seed);
            (synth_with(&o)?, tag)
        }
    };
    let (train_set, val_set) = ctx.split(&data)?;
    let cfg = MedNetConfig::canonical_with_input(c.variant, data.num_classes(), c.input_size);
    let mut graph = build_mednet::<f32>(&cfg, &mut Rng::new(c.seed))?;

    let metrics = ctx.out("metrics.csv")?;
    let history = train_with(&mut graph, &train_set, &val_set, &c.train, epoch_logger(&metrics)?)?;
    let ckpt = ctx.out("model.mdnt")?;
    save_checkpoint(&graph, &ckpt, Provenance::new(c.seed, c.train.epochs, &tag))?;
    let summary = ctx.out("summary.json")?;
    let s = TrainSummary::from_history(&history);
    s.write(&summary)?;
    println!("best val accuracy {:.4} at epoch {}; checkpoint {}", s.best_val_accuracy, s.best_epoch, ckpt.display());
    Ok(vec![metrics, ckpt, summary])
}

#[derive(Serialize)]
struct FinetuneSummary {
    source: SourceNote,
    freeze: String,
    #[serde(flatten)]
    train: TrainSummary,
}

fn finetune(ctx: &Ctx, checkpoint: &Path, data_dir: &Path) -> Result<Vec<PathBuf>> {
    let c = &ctx.config;
    let size = read_checkpoint(checkpoint)?.config.input_h;
    let data = ctx.load(data_dir, size)?;
    let (train_set, val_set) = ctx.split(&data)?;
    let metrics = ctx.out("metrics.csv")?;
    let run = finetune_split::<f32>(
        checkpoint,
        &train_set,
        &val_set,
        data.num_classes(),
        c.freeze,
        &c.train,
        epoch_logger(&metrics)?,
    )?;
    let ckpt = ctx.out("model.mdnt")?;
    let tag = format!("finetune:{}", data_dir.display());
    save_checkpoint(&run.graph, &ckpt, Provenance::new(c.seed, c.train.epochs, &tag))?;
    let summary = ctx.out("summary.json")?;
    let s = FinetuneSummary { source: run.source, freeze: c.freeze.to_string(), train: TrainSummary::from_history(&run.history) };
    write_json(&summary, &s)?;
    println!("best val accuracy {:.4} at epoch {}; checkpoint {}", s.train.best_val_accuracy, s.train.best_epoch, ckpt.display());
    Ok(vec![metrics, ckpt, summary])
}

fn print_evaluation(e: &Evaluation, names: &[String]) {
    println!("loss: {:.6}", e.loss);
    println!("accuracy: {:.4}", e.accuracy);
    println!("confusion (rows true, columns predicted):");
    let w = names.iter().map(|n| n.len()).max().unwrap_or(1);
    for (name, row) in names.iter().zip(&e.confusion) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
        println!("  {name:<w$} {}", cells.join(""));
    }
}

fn eval(ctx: &Ctx, checkpoint: Option<&Path>, data_dir: &Path) -> Result<Vec<PathBuf>> {
    let c = &ctx.config;
    let (graph, data): (ModelGraph<f32>, Dataset) = match checkpoint {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            let data = ctx.load(data_dir, ckpt.config.input_h)?;
            check_colorspace(&ckpt, &data)?;
            if ckpt.config.num_classes != data.num_classes() {
                bail!(
                    "checkpoint has {} classes but {} has {}",
                    ckpt.config.num_classes,
                    data_dir.display(),
                    data.num_classes()
                );
            }
            (ckpt.to_graph()?, data)
        }
        None => {
            let data = ctx.load(data_dir, c.input_size)?;
            log::info!("no checkpoint given; evaluating an untrained model (seed {})", c.seed);
            let cfg = MedNetConfig::canonical_with_input(c.variant, data.num_classes(), c.input_size);
            (build_mednet(&cfg, &mut Rng::new(c.seed))?, data)
        }
    };
    let e = evaluate(&graph, &data)?;
    print_evaluation(&e, data.class_names());
    match &ctx.out_dir {
        Some(dir) => {
            let path = dir.join("eval.json");
            write_json(&path, &e)?;
            Ok(vec![path])
        }
        None => Ok(Vec::new()),
    }
}

fn gradcheck(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let report = run_suite(&ctx.config.gradcheck)?;
    for r in &report.results {
        println!(
            "{:<4} {:<22} max rel error {:.3e} (tol {:.0e}, {} trials)",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.trials
        );
    }
    let mut outputs = Vec::new();
    if let Some(dir) = &ctx.out_dir {
        let path = dir.join("gradcheck.json");
        write_json(&path, &report)?;
        outputs.push(path);
    }
    if !report.passed() {
        let failed: Vec<&str> = report.results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(outputs)
}

fn compare(ctx: &Ctx, checkpoint: &Path, data_dir: &Path) -> Result<Vec<PathBuf>> {
    let c = &ctx.config;
    let size = read_checkpoint(checkpoint)?.config.input_h;
    let data = ctx.load(data_dir, size)?;
    let cfg = CompareConfig { train: c.train.clone(), plan: c.freeze, n_seeds: c.n_seeds };
    let report = compare_transfer::<f32>(checkpoint, &data, &cfg, |s| {
        let ft = s.finetuned_epochs_to_scratch_best.map_or("never".to_string(), |e| e.to_string());
        println!(
            "seed {}: scratch best {:.4} at epoch {}; fine-tuned reached it at epoch {}{}",
            s.seed,
            s.scratch_best_val_accuracy,
            s.scratch_epochs_to_best,
            ft,
            if s.halved { " (at most half)" } else { "" }
        );
    })?;
    let path = ctx.out("transfer_report.json")?;
    report.write(&path)?;
    println!("{}/{} seeds reached the scratch best in at most half the epochs", report.halved_count, c.n_seeds);
    Ok(vec![path])
}
