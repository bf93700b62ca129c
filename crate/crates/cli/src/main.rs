//! `ino`: synthetic data, training, propagation and evaluation from the
//! command line.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ino_core::harness::gradients::check_objective_gradients;
use ino_core::harness::{self, load_model, predict_video, EncoderFeatures, RunConfig, SCORE_REPORT};
use ino_core::views::store::{load_split, mask_name, write_pgm};
use ino_core::Error;

const GRAD_CHECK_THRESHOLD: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "ino", version, about = "Self-supervised video correspondence: train and evaluate")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Run configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one configuration key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic moving-shapes dataset under `data.root`.
    GenData,
    /// Train on `data.root/train`, writing logs and checkpoints to `out.dir`.
    Train {
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Propagate each video's first-frame mask and write PGM masks.
    Propagate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split directory; defaults to `data.root/eval`.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Output directory, one subdirectory per video.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score propagated masks with J and F and write the report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split directory; defaults to `data.root/eval`.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Report path; defaults to `out.dir/scores.tsv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the objective's gradients on a micro model.
    GradCheck,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    for kv in &g.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::GenData => {
            harness::gen_data(&cfg)?;
            println!("wrote dataset to {}", cfg.data.root.display());
        }
        Command::Train { resume } => {
            let summary = harness::train(&cfg, resume.as_deref())?;
            if let Some(last) = summary.reports.last() {
                print!("{}", last.log_line());
            }
            println!("{} steps; checkpoint {}", summary.steps, summary.last_checkpoint.display());
        }
        Command::Propagate { checkpoint, split, out } => {
            let (_, encoder, params) = load_model(&checkpoint)?;
            let split = split.unwrap_or_else(|| cfg.data.eval_dir());
            let features = EncoderFeatures {
                encoder: &encoder,
                params: &params,
            };
            for video in load_split(&split, true)? {
                let first = video
                    .masks
                    .as_ref()
                    .and_then(|m| m.first())
                    .ok_or_else(|| Failure::Runtime(format!("video {} has no first-frame mask", video.id)))?;
                let pred = predict_video(&features, &video, first, &cfg.prop)?;
                let dir = out.join(&pred.id);
                std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
                for (i, m) in pred.masks.iter().enumerate() {
                    write_pgm(&dir.join(mask_name(i)), m)?;
                }
                println!("{}: {} masks", pred.id, pred.masks.len());
            }
        }
        Command::Eval { checkpoint, split, out } => {
            let split = split.unwrap_or_else(|| cfg.data.eval_dir());
            let eval = harness::evaluate(&checkpoint, &split, &cfg.prop)?;
            let report = eval.scores.to_tsv();
            let path = out.unwrap_or_else(|| cfg.out_dir.join(SCORE_REPORT));
            write_file(&path, &report)?;
            print!("{report}");
        }
        Command::GradCheck => {
            let reports = check_objective_gradients(cfg.seed)?;
            let mut worst: f64 = 0.0;
            for (name, r) in &reports {
                println!("{name:8} max relative error {:.3e}", r.max_rel_error);
                worst = worst.max(r.max_rel_error);
            }
            println!("max relative error {worst:.3e} (threshold {GRAD_CHECK_THRESHOLD:e})");
            if !(worst < GRAD_CHECK_THRESHOLD) {
                return Err(Failure::Runtime("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
