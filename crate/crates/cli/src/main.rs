mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mednet_core::gradcheck::{with_fault, Fault};
use mednet_core::graph::Variant;
use mednet_core::transfer::FreezePlan;

use crate::config::RunConfig;
use crate::manifest::RunManifest;

/// MedNet: build, train, fine-tune and check the network from the command line.
#[derive(Debug, Parser)]
#[command(name = "mednet", version, propagate_version = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON config file (partial configs and run manifests both work).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every file the command writes.
    #[arg(long, global = true, visible_alias = "out", value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Write wall_time_s as 0 so identical runs give identical metrics files.
    #[arg(long, global = true)]
    reproducible: bool,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[arg(long, global = true, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    ReluBackward,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: mednet_core::Error| e.to_string())
}

fn parse_plan(s: &str) -> Result<FreezePlan, String> {
    s.parse().map_err(|e: mednet_core::Error| e.to_string())
}

#[derive(Debug, Args, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args, Default)]
struct SynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Make classes differ by texture alone.
    #[arg(long)]
    texture_only: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the architecture table.
    Summary {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Write a synthetic texture dataset (one directory per class).
    SynthData {
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Train from scratch and write a checkpoint.
    Pretrain {
        /// Dataset directory; synthetic data is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Fine-tune a checkpoint on a target dataset.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// none, stem, block_k or all_but_head.
        #[arg(long, value_parser = parse_plan)]
        freeze: Option<FreezePlan>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Loss, accuracy and confusion matrix of a model on a dataset.
    Eval {
        /// Checkpoint to evaluate; an untrained model is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference checks of every backward pass.
    Gradcheck {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Scratch versus fine-tuned training over several seeds.
    Compare {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_plan)]
        freeze: Option<FreezePlan>,
        #[arg(long)]
        n_seeds: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Summary { .. } => "summary",
            Command::SynthData { .. } => "synth-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Compare { .. } => "compare",
        }
    }

    /// Commands whose whole purpose is to write files get a default
    /// output directory.
    fn writes_by_default(&self) -> bool {
        matches!(self, Command::SynthData { .. } | Command::Pretrain { .. } | Command::Finetune { .. } | Command::Compare { .. })
    }

    /// Applies this command's flags on top of the file/default config.
    fn overlay(&self, c: &mut RunConfig) {
        fn train(t: &TrainArgs, c: &mut RunConfig) {
            c.train.epochs = t.epochs.unwrap_or(c.train.epochs);
            c.train.batch_size = t.batch_size.unwrap_or(c.train.batch_size);
            c.train.lr = t.lr.unwrap_or(c.train.lr);
        }
        fn synth(s: &SynthArgs, c: &mut RunConfig) {
            c.classes = s.classes.unwrap_or(c.classes);
            c.per_class = s.per_class.unwrap_or(c.per_class);
            c.input_size = s.size.unwrap_or(c.input_size);
            if s.texture_only {
                c.intensity_cue = false;
            }
        }
        match self {
            Command::Summary { classes, size } => {
                c.classes = classes.unwrap_or(c.classes);
                c.input_size = size.unwrap_or(c.input_size);
            }
            Command::SynthData { synth: s } => synth(s, c),
            Command::Pretrain { synth: s, train: t, .. } => {
                synth(s, c);
                train(t, c);
            }
            Command::Finetune { freeze, train: t, .. } => {
                c.freeze = freeze.unwrap_or(c.freeze);
                train(t, c);
            }
            Command::Compare { freeze, n_seeds, train: t, .. } => {
                c.freeze = freeze.unwrap_or(c.freeze);
                c.n_seeds = n_seeds.unwrap_or(c.n_seeds);
                train(t, c);
            }
            Command::Gradcheck { trials } => c.gradcheck.trials = trials.unwrap_or(c.gradcheck.trials),
            Command::Eval { .. } => {}
        }
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut c = RunConfig::from_file(cli.global.config.as_deref())?;
    c.seed = cli.global.seed.unwrap_or(c.seed);
    c.variant = cli.global.variant.unwrap_or(c.variant);
    if cli.global.reproducible {
        c.train.record_wall_time = false;
    }
    cli.command.overlay(&mut c);
    c.train.seed = c.seed;
    c.gradcheck.seed = c.seed;
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = resolve(&cli)?;
    let out_dir = match &cli.global.out_dir {
        Some(d) => Some(d.clone()),
        None if cli.command.writes_by_default() => Some(PathBuf::from("mednet-out")),
        None => None,
    };
    let mut manifest = RunManifest::start(cli.command.name(), &config);
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
        manifest.write(dir)?;
    }
    let ctx = commands::Ctx { config, out_dir: out_dir.clone() };
    let result = match cli.global.inject_fault {
        Some(FaultArg::ReluBackward) => with_fault(Fault::ReluBackward, || commands::dispatch(&ctx, &cli.command)),
        None => commands::dispatch(&ctx, &cli.command),
    };
    if let Some(dir) = &out_dir {
        if let Ok(outputs) = &result {
            manifest.outputs = outputs.clone();
        }
        manifest.finish(dir, result.is_ok())?;
    }
    result.map(|_| ())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
