use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cryoseg::data::synthetic::{write_corpus, SyntheticConfig, ORGANS};
use cryoseg::data::{load_dataset_with, FoldSplit};
use cryoseg::model::Checkpoint;
use cryoseg::pipeline::crossval::{fold_dir, load_split, REPORT_FILE, SUMMARY_FILE};
use cryoseg::pipeline::infer::checkpoint_postprocess;
use cryoseg::pipeline::train::{BEST_CHECKPOINT, RUN_RECORD};
use cryoseg::pipeline::{crossval, evaluate_dirs, infer_dir, prepare, train_fold, write_report, TrainConfig};
use cryoseg::{Error, Result};

/// Nuclei instance segmentation for H&E stained cryosections.
#[derive(Parser)]
#[command(name = "cryoseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset and write its folds plus contour and hematoxylin caches.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = cryoseg::data::DEFAULT_CONTOUR_THICKNESS)]
        contour_thickness: usize,
    },
    /// Train one cross-validation fold.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fold: usize,
    },
    /// Label every image in a directory with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take post-processing settings from this config instead of the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predicted label images against ground truth and write a CSV report.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fold file used to tag each image with its fold.
        #[arg(long)]
        folds: Option<PathBuf>,
    },
    /// Run every fold: train, label the hold-out images, score and tabulate.
    Crossval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic corpus with the dataset layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        organs: usize,
        #[arg(long, default_value_t = 3)]
        per_organ: usize,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a config file holding every default.
    Config {
        #[arg(long)]
        out: PathBuf,
    },
}

fn check_device() -> Result<()> {
    match std::env::var("CRYOSEG_DEVICE") {
        Err(_) => Ok(()),
        Ok(d) if d.eq_ignore_ascii_case("cpu") || d.is_empty() => Ok(()),
        Ok(d) => Err(Error::Config(format!("CRYOSEG_DEVICE={d} is not available; only cpu is supported"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    check_device()?;
    match cli.command {
        Command::Prepare {
            data,
            out,
            contour_thickness,
        } => {
            let p = prepare(&data, &out, contour_thickness)?;
            println!(
                "{} samples, {} folds written to {}",
                p.samples,
                p.split.len(),
                p.folds_path.display()
            );
        }
        Command::Train { config, fold } => {
            let cfg = TrainConfig::load(&config)?;
            let samples = load_dataset_with(&cfg.data_root, cfg.contour_thickness)?;
            let split = load_split(&cfg, &samples)?;
            let dir = fold_dir(&cfg, fold);
            let record = train_fold(&samples, split.get(fold)?, fold, &cfg, &dir)?;
            println!(
                "fold {fold} ({}): {} epochs, best epoch {:?}, hold-out AJI {:?}",
                record.organ,
                record.epochs.len(),
                record.best_epoch,
                record.best_holdout_aji
            );
            println!("checkpoint {}", dir.join(BEST_CHECKPOINT).display());
            println!("run record {}", dir.join(RUN_RECORD).display());
        }
        Command::Infer {
            ckpt,
            images,
            out,
            config,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let post = match config {
                Some(path) => TrainConfig::load(&path)?.postprocess(),
                None => checkpoint_postprocess(&checkpoint)?,
            };
            let (model, _) = checkpoint.into_model()?;
            let written = infer_dir(&model, &post, &images, &out)?;
            println!("{} label images written to {}", written.len(), out.display());
        }
        Command::Evaluate { pred, gt, out, folds } => {
            let split = folds.map(|p| FoldSplit::load(&p)).transpose()?;
            let eval = evaluate_dirs(&pred, &gt, split.as_ref())?;
            write_report(&out, &eval.images, &eval.aggregate)?;
            let o = &eval.aggregate.overall;
            println!(
                "{} images: AJI {:.4} PQ {:.4} Dice {:.4}; report {}",
                eval.images.len(),
                o.aji,
                o.pq,
                o.dice,
                out.display()
            );
        }
        Command::Crossval { config } => {
            let cfg = TrainConfig::load(&config)?;
            let outcome = crossval(&cfg)?;
            for t in &outcome.tables {
                println!("{}", t.to_markdown());
            }
            println!(
                "{} folds ({} reused); report {}, tables {}",
                outcome.folds.len(),
                outcome.skipped.len(),
                cfg.output_dir.join(REPORT_FILE).display(),
                cfg.output_dir.join(SUMMARY_FILE).display()
            );
        }
        Command::Synth {
            out,
            organs,
            per_organ,
            size,
            seed,
        } => {
            if organs == 0 || organs > ORGANS.len() {
                return Err(Error::invalid(format!("--organs must lie in 1..={}", ORGANS.len())));
            }
            let cfg = SyntheticConfig {
                size,
                ..SyntheticConfig::default()
            };
            let ids = write_corpus(&out, &ORGANS[..organs], per_organ, seed, &cfg)?;
            println!("{} images written to {}", ids.len(), out.display());
        }
        Command::Config { out } => {
            TrainConfig::default().save(&out)?;
            println!("default config written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
