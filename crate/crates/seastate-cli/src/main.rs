//! `seastate`: one entry point for dataset construction, augmentation
//! preview, two-stage training, evaluation, cross-dataset comparison, size
//! ablation, resource profiling, and figure rendering.
//!
//! Every run merges one declarative TOML configuration file with command-line
//! flags (flags win), writes the resolved snapshot into its output directory
//! before doing anything else, and exits with a categorized status code:
//! 1 usage, 2 configuration, 3 data, 4 assets, 5 runtime.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seastate_core::dataset::{Split, Strategy};
use seastate_core::error::{Error, Result};
use seastate_core::model::Architecture;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "seastate",
    version,
    about = "Sea-state image classification toolkit",
    disable_help_subcommand = true
)]
struct Cli {
    /// Base directory all relative paths resolve against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Run-configuration file (TOML), resolved against --workdir.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for this run's artifacts (overrides output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DatasetFlags {
    /// Dataset directory (overrides dataset.dir).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Crop placement strategy (overrides dataset.strategy).
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Sampling seed (overrides dataset.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset name (overrides dataset.name).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct ModelFlags {
    /// Backbone architecture (overrides model.architecture).
    #[arg(long)]
    arch: Option<Architecture>,
    /// Pretrained-asset registry file (overrides model.asset_registry).
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Args)]
struct TrainFlags {
    /// Training seed (overrides training.seed).
    #[arg(long)]
    train_seed: Option<u64>,
    /// Batch size (overrides training.batch_size).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stage-1 (head-only) epochs.
    #[arg(long)]
    stage1_epochs: Option<usize>,
    /// Stage-2 (fine-tuning) epochs.
    #[arg(long)]
    stage2_epochs: Option<usize>,
    /// Stage-1 learning rate.
    #[arg(long)]
    stage1_lr: Option<f64>,
    /// Stage-2 learning rate.
    #[arg(long)]
    stage2_lr: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a balanced crop dataset from indexed video-frame sessions.
    BuildDataset {
        #[command(flatten)]
        dataset: DatasetFlags,
        /// Session index file (overrides dataset.session_index).
        #[arg(long)]
        session_index: Option<PathBuf>,
    },
    /// Generate a procedural synthetic dataset.
    Synth {
        #[command(flatten)]
        dataset: DatasetFlags,
        /// Images per class in the training split.
        #[arg(long)]
        per_class_train: Option<usize>,
        /// Images per class in the validation split.
        #[arg(long)]
        per_class_val: Option<usize>,
        /// Images per class in the test split.
        #[arg(long)]
        per_class_test: Option<usize>,
        /// Side length of generated dataset images.
        #[arg(long)]
        image_size: Option<usize>,
        /// Number of classes.
        #[arg(long)]
        classes: Option<u8>,
    },
    /// Render a contact sheet of augmented training samples.
    AugmentPreview {
        #[command(flatten)]
        dataset: DatasetFlags,
        /// Grid rows.
        #[arg(long, default_value_t = 4)]
        rows: usize,
        /// Grid columns (the first column shows unaugmented sources).
        #[arg(long, default_value_t = 6)]
        cols: usize,
    },
    /// Run the two-stage training protocol and evaluate the result.
    Train {
        #[command(flatten)]
        dataset: DatasetFlags,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate a saved model bundle on a dataset split.
    Evaluate {
        #[command(flatten)]
        dataset: DatasetFlags,
        /// Model bundle directory.
        #[arg(long)]
        bundle: PathBuf,
        /// Split to evaluate (overrides evaluation.split).
        #[arg(long)]
        split: Option<Split>,
    },
    /// Evaluate a bundle on its home dataset and a foreign one; report drops.
    CrossEval {
        /// Model bundle directory.
        #[arg(long)]
        bundle: PathBuf,
        /// Home dataset directory.
        #[arg(long)]
        home: PathBuf,
        /// Foreign dataset directory (overrides evaluation.foreign).
        #[arg(long)]
        foreign: Option<PathBuf>,
    },
    /// Re-train at several training-set sizes and tabulate F1 and time.
    AblateSize {
        #[command(flatten)]
        dataset: DatasetFlags,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Comma-separated per-class training-set sizes, e.g. 10,40,160.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
    /// Measure training time and/or inference throughput and memory.
    Profile {
        /// Model bundle directory to profile inference on.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Finished run directory to profile training from.
        #[arg(long)]
        experiment: Option<PathBuf>,
        /// Inference batch size (overrides profiling.batch_size).
        #[arg(long)]
        batch_size: Option<usize>,
        /// Timed batches (overrides profiling.num_batches).
        #[arg(long)]
        batches: Option<usize>,
        /// Untimed warmup batches (overrides profiling.warmup_batches).
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Render figures and tables from a finished run directory.
    Report {
        /// Run directory holding logs and reports.
        #[arg(long)]
        experiment: PathBuf,
    },
}

fn apply_dataset_flags(cfg: &mut RunConfig, flags: &DatasetFlags) {
    if let Some(d) = &flags.dataset {
        cfg.dataset.dir = Some(d.clone());
    }
    if let Some(s) = flags.strategy {
        cfg.dataset.strategy = s;
    }
    if let Some(s) = flags.seed {
        cfg.dataset.seed = s;
    }
    if let Some(n) = &flags.name {
        cfg.dataset.name = n.clone();
    }
}

fn apply_model_flags(cfg: &mut RunConfig, flags: &ModelFlags) {
    if let Some(a) = flags.arch {
        cfg.model.architecture = a;
    }
    if let Some(r) = &flags.registry {
        cfg.model.asset_registry = Some(r.clone());
    }
}

fn apply_train_flags(cfg: &mut RunConfig, flags: &TrainFlags) {
    let t = &mut cfg.training;
    if let Some(s) = flags.train_seed {
        t.seed = Some(s);
    }
    if let Some(b) = flags.batch_size {
        t.batch_size = Some(b);
    }
    if let Some(e) = flags.stage1_epochs {
        t.stage1.epochs = Some(e);
    }
    if let Some(e) = flags.stage2_epochs {
        t.stage2.epochs = Some(e);
    }
    if let Some(lr) = flags.stage1_lr {
        t.stage1.lr = Some(lr);
    }
    if let Some(lr) = flags.stage2_lr {
        t.stage2.lr = Some(lr);
    }
}

fn run(cli: Cli) -> Result<()> {
    let workdir = cli
        .workdir
        .canonicalize()
        .map_err(|e| Error::io(&cli.workdir, e))?;
    let mut cfg = match &cli.config {
        Some(path) => {
            let path = if path.is_absolute() {
                path.clone()
            } else {
                workdir.join(path)
            };
            RunConfig::load(&path)?
        }
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }

    match &cli.command {
        Command::BuildDataset { dataset, session_index } => {
            apply_dataset_flags(&mut cfg, dataset);
            if let Some(p) = session_index {
                cfg.dataset.session_index = Some(p.clone());
            }
            let ctx = commands::Ctx { workdir, config: cfg };
            commands::build_dataset_cmd(&ctx)
        }
        Command::Synth {
            dataset,
            per_class_train,
            per_class_val,
            per_class_test,
            image_size,
            classes,
        } => {
            apply_dataset_flags(&mut cfg, dataset);
            let synth = cfg.dataset.synth.get_or_insert_with(Default::default);
            if let Some(n) = per_class_train {
                synth.images_per_class.train = *n;
            }
            if let Some(n) = per_class_val {
                synth.images_per_class.val = *n;
            }
            if let Some(n) = per_class_test {
                synth.images_per_class.test = *n;
            }
            if let Some(s) = image_size {
                synth.image_size = *s;
            }
            if let Some(c) = classes {
                synth.num_classes = *c;
            }
            synth.seed = cfg.dataset.seed;
            let ctx = commands::Ctx { workdir, config: cfg };
            commands::synth(&ctx)
        }
        Command::AugmentPreview { dataset, rows, cols } => {
            apply_dataset_flags(&mut cfg, dataset);
            let ctx = commands::Ctx { workdir, config: cfg };
            commands::augment_preview(&ctx, *rows, *cols)
        }
        Command::Train { dataset, model, train } => {
            apply_dataset_flags(&mut cfg, dataset);
            apply_model_flags(&mut cfg, model);
            apply_train_flags(&mut cfg, train);
            let ctx = commands::Ctx { workdir, config: cfg };
            commands::train(&ctx)
        }
        Command::Evaluate { dataset, bundle, split } => {
            apply_dataset_flags(&mut cfg, dataset);
            if let Some(s) = split {
                cfg.evaluation.split = *s;
            }
            let ctx = commands::Ctx { workdir, config: cfg };
            commands::evaluate(&ctx, bundle)
        }
        Command::CrossEval { bundle, home, foreign } => {
            let ctx = commands::Ctx { workdir, config: cfg };
            commands::cross_eval(&ctx, bundle, home, foreign.as_deref())
        }
        Command::AblateSize { dataset, model, train, sizes } => {
            apply_dataset_flags(&mut cfg, dataset);
            apply_model_flags(&mut cfg, model);
            apply_train_flags(&mut cfg, train);
            let ctx = commands::Ctx { workdir, config: cfg };
            commands::ablate_size(&ctx, sizes)
        }
        Command::Profile { bundle, experiment, batch_size, batches, warmup } => {
            if let Some(b) = batch_size {
                cfg.profiling.batch_size = *b;
            }
            if let Some(n) = batches {
                cfg.profiling.num_batches = *n;
            }
            if let Some(w) = warmup {
                cfg.profiling.warmup_batches = *w;
            }
            let ctx = commands::Ctx { workdir, config: cfg };
            commands::profile(&ctx, bundle.as_deref(), experiment.as_deref())
        }
        Command::Report { experiment } => {
            let ctx = commands::Ctx { workdir, config: cfg };
            commands::report(&ctx, experiment)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage/help text; help and version requests
            // are successes, anything else is a usage error (exit 1)
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error [{}]: {err}", category_name(&err));
            ExitCode::from(err.category().exit_code() as u8)
        }
    }
}

fn category_name(err: &Error) -> &'static str {
    match err.category() {
        seastate_core::ErrorCategory::Usage => "usage",
        seastate_core::ErrorCategory::Config => "config",
        seastate_core::ErrorCategory::Data => "data",
        seastate_core::ErrorCategory::Asset => "asset",
        seastate_core::ErrorCategory::Runtime => "runtime",
    }
}
