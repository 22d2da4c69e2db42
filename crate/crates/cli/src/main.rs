//! `ticketlab` — synthetic data, prune-and-rewind experiments, evaluation and reports.
//!
//! Results go to stdout as JSON; failures go to stderr as
//! `{"error": <kind>, "message": <text>}` with a non-zero exit code.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use ticketlab::data::{load_manifest_dataset, load_png_dir, Split, Task};
use ticketlab::experiment::{
    datagen, describe, eval_checkpoint, load_splits, report, run_lth, run_oneshot, ExperimentConfig,
};
use ticketlab::train::OneShotKind;
use ticketlab::Error;

#[derive(Parser)]
#[command(name = "ticketlab", version, about = "Lottery-ticket pruning for all-in-one image restoration")]
struct Cli {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Overrides the dataset directory.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Magnitude,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the degraded/clean datasets as PNGs.
    Datagen {
        #[arg(long)]
        force: bool,
    },
    /// Train the dense network (round 0) only.
    Train {
        #[arg(long)]
        force: bool,
    },
    /// Iterative magnitude pruning with rewinding; resumes an interrupted run.
    Lth {
        #[arg(long)]
        force: bool,
    },
    /// One-shot pruning of the trained dense network, then a short fine-tune.
    Oneshot {
        #[arg(long, value_enum, default_value = "magnitude")]
        kind: Kind,
        /// Fraction of prunable weights to remove.
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        override_digest: bool,
    },
    /// Evaluate a checkpoint on a test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the combined test split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Task label for directories without a manifest.
        #[arg(long, default_value = "denoise")]
        task: String,
        #[arg(long)]
        override_digest: bool,
    },
    /// Rebuild report.csv / report.json from the run's checkpoints.
    Report,
    /// Print the parameter table of the configured network.
    Describe,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = &cli.run_dir {
        cfg.report.run_dir = dir.clone();
    }
    if let Some(dir) = &cli.data_dir {
        cfg.data.dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_test(dir: &Path, task: &str) -> Result<ticketlab::data::Dataset, Error> {
    if dir.join("manifest.json").exists() {
        load_manifest_dataset(dir)
    } else {
        load_png_dir(dir, task.parse::<Task>()?, Split::Test)
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value, Error> {
    let cfg = load_config(cli)?;
    let run_dir = &cfg.report.run_dir;
    Ok(match &cli.command {
        Command::Datagen { force } => serde_json::to_value(datagen(&cfg, *force)?)?,
        Command::Train { force } => {
            let splits = load_splits(&cfg.data.dir)?;
            json!({ "digest": cfg.digest(), "rounds": run_lth(&cfg, &splits, run_dir, *force, true)? })
        }
        Command::Lth { force } => {
            let splits = load_splits(&cfg.data.dir)?;
            json!({ "digest": cfg.digest(), "rounds": run_lth(&cfg, &splits, run_dir, *force, false)? })
        }
        Command::Oneshot {
            kind,
            fraction,
            override_digest,
        } => {
            let kind = match kind {
                Kind::Magnitude => OneShotKind::Magnitude,
                Kind::Random => OneShotKind::Random,
            };
            let splits = load_splits(&cfg.data.dir)?;
            serde_json::to_value(run_oneshot(&cfg, &splits, run_dir, kind, *fraction, *override_digest)?)?
        }
        Command::Eval {
            checkpoint,
            data,
            task,
            override_digest,
        } => {
            let dir = data.clone().unwrap_or_else(|| cfg.data.dir.join("all").join("test"));
            let test = load_test(&dir, task)?;
            serde_json::to_value(eval_checkpoint(&cfg, checkpoint, &test, *override_digest)?)?
        }
        Command::Report => serde_json::to_value(report(run_dir)?)?,
        Command::Describe => serde_json::to_value(describe(&cfg.model)?)?,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out).expect("json value serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
