//! `sleepev`: batch front end for synthesis, dataset building, training,
//! inference, scoring and the experiment grid.
//!
//! Exit status is 0 on success, 3 on numeric divergence and 2 for any other
//! error; errors are printed to stderr as a single JSON object.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sleep_events::codec::Assembly;
use sleep_events::experiment::{
    build_dataset, infer, read_inference, run_grid, score, summary_table, synth_records, train_dataset,
    write_inference, ExperimentConfig, SplitPart,
};
use sleep_events::dataset::load_dataset;
use sleep_events::metrics::RunMetadata;
use sleep_events::synth::montage;
use sleep_events::trainer::LossMode;
use sleep_events::{par, Error, Result};

#[derive(Parser)]
#[command(name = "sleepev", version, about = "Sleep stage and event detection pipeline")]
struct Cli {
    /// Base seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force the single-threaded path.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Experiment config (JSON with a `version` field).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic records.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Montage size (4, 6 or 8).
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        duration_s: Option<f64>,
    },
    /// Window records into a dataset directory.
    BuildDataset {
        #[arg(long = "record", required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use the first D channels of the standard montage.
        #[arg(long, default_value_t = 4)]
        channels: usize,
        /// Explicit comma-separated channel names (overrides --channels).
        #[arg(long, value_delimiter = ',')]
        channel_names: Option<Vec<String>>,
        #[arg(long, default_value = "SAR")]
        assembly: Assembly,
    },
    /// Train on a dataset's train split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Run a checkpoint over a record or a dataset split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Record or dataset directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset split to run on (ignored for records).
        #[arg(long, default_value = "test")]
        split: SplitPart,
        /// NMS overlap threshold.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Score predictions against a reference record or dataset.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Output report path.
        #[arg(long)]
        out: PathBuf,
        /// Score only reference windows that have a prediction.
        #[arg(long)]
        predicted_only: bool,
    },
    /// Run the ten (D, assembly) experiments.
    Grid {
        #[arg(long)]
        out: PathBuf,
        /// Use the desk-scale preset instead of paper-scale defaults.
        #[arg(long)]
        small: bool,
    },
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Early-stopping patience; 0 disables it.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    loss_mode: Option<LossMode>,
}

fn load_config(cli: &Cli, small: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if small => ExperimentConfig::small(),
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_report<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Invalid(format!("{}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn run(cli: &Cli) -> Result<()> {
    par::set_sequential(cli.deterministic);
    match &cli.command {
        Command::Synth {
            out,
            channels,
            records,
            duration_s,
        } => {
            let mut cfg = load_config(cli, false)?;
            if let Some(n) = records {
                cfg.synth.records = *n;
            }
            if let Some(d) = duration_s {
                cfg.synth.duration_s = *d;
            }
            cfg.validate()?;
            for dir in synth_records(&cfg, *channels, out)? {
                println!("{}", dir.display());
            }
        }
        Command::BuildDataset {
            records,
            out,
            channels,
            channel_names,
            assembly,
        } => {
            let cfg = load_config(cli, false)?;
            let names = channel_names.clone().unwrap_or_else(|| montage(*channels));
            if names.len() != *channels && channel_names.is_none() {
                return Err(Error::Invalid(format!("montage must have 4, 6 or 8 channels, got {channels}")));
            }
            let ds = build_dataset(records, cfg.dataset_config(names, *assembly), out)?;
            println!(
                "{}",
                json!({
                    "examples": ds.examples.len(),
                    "train": ds.split.train.len(),
                    "validation": ds.split.validation.len(),
                    "test": ds.split.test.len(),
                    "content_hash": ds.content_hash(),
                })
            );
        }
        Command::Train {
            dataset,
            out,
            overrides,
        } => {
            let mut cfg = load_config(cli, false)?;
            let t = &mut cfg.train;
            if let Some(v) = overrides.epochs {
                t.max_epochs = v;
            }
            if let Some(v) = overrides.batch_size {
                t.batch_size = v;
            }
            if let Some(v) = overrides.learning_rate {
                t.learning_rate = v;
            }
            if let Some(v) = overrides.momentum {
                t.momentum = v;
            }
            if let Some(v) = overrides.patience {
                t.patience = (v > 0).then_some(v);
            }
            if let Some(v) = overrides.loss_mode {
                t.loss_mode = v;
            }
            cfg.validate()?;
            let ds = load_dataset(dataset, None)?;
            let (_, log) = train_dataset(&ds, &cfg, out)?;
            println!(
                "{}",
                json!({
                    "epochs_run": log.epochs_run,
                    "stopped_early": log.stopped_early,
                    "best_epoch": log.best_epoch,
                    "best_validation_loss": log.best_validation_loss,
                })
            );
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            split,
            lambda,
        } => {
            let cfg = load_config(cli, false)?;
            let mut post = cfg.postprocess;
            if let Some(l) = lambda {
                post.lambda = *l;
            }
            let inf = infer(checkpoint, input, *split, post)?;
            write_inference(&inf, out)?;
            println!(
                "{}",
                json!({"windows": inf.hypnogram.windows.len(), "events": inf.events.len()})
            );
        }
        Command::Score {
            predictions,
            reference,
            out,
            predicted_only,
        } => {
            let cfg = load_config(cli, false)?;
            let pred = read_inference(predictions)?;
            let meta = RunMetadata {
                seeds: vec![cfg.seed],
                ..Default::default()
            };
            let report = score(&pred, reference, *predicted_only, meta)?;
            write_report(out, &report)?;
            for f in &report.families {
                println!("{} kappa {:.4} f1 {:.4}", f.family.name(), f.kappa, f.f1_macro);
            }
        }
        Command::Grid { out, small } => {
            let cfg = load_config(cli, *small)?;
            let rows = run_grid(&cfg, out)?;
            print!("{}", summary_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if matches!(e, Error::Numeric(_)) { 3 } else { 2 };
            eprintln!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string(), "exit_code": code}}));
            ExitCode::from(code)
        }
    }
}
