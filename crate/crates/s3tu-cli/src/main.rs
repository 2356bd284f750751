//! Command-line interface: train, eval, predict, gradcheck, synth.
//!
//! Exit codes: 0 success, 1 usage or I/O failure, 2 numerical failure
//! (diverged training or a failed gradient check).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use s3tu::checkpoint;
use s3tu::data::{generate_synthetic, load_pgm, preprocess, save_pgm, write_dataset, SynthConfig};
use s3tu::error::{Error, Result};
use s3tu::gradcheck::CheckConfig;
use s3tu::gradsuite::run_suite;
use s3tu::metrics::HARD_THRESHOLD;
use s3tu::model::ModelConfig;

use s3tu_cli::load_dataset;
use s3tu_cli::trainer::{self, split_train_val, TrainConfig};

#[derive(Parser)]
#[command(name = "s3tu", about = "S3TU-Net segmentation: training, evaluation and checks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint plus the training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write a JSON metric report.
    Eval(EvalArgs),
    /// Segment a single PGM image with a trained checkpoint.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset as PGM files plus a manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Model configuration JSON.
    #[arg(long, value_name = "FILE")]
    model_config: PathBuf,
    /// Training configuration JSON.
    #[arg(long, value_name = "FILE")]
    train_config: PathBuf,
    /// Dataset: manifest JSON (array) or synth-config JSON (object).
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Output directory for checkpoint.s3ck and trainlog.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Where to write the JSON metric report.
    #[arg(long, value_name = "FILE")]
    report: PathBuf,
    /// Include per-sample metrics in the report.
    #[arg(long)]
    per_sample: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Input image (binary PGM, P5).
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    /// Output mask PGM ({0,255}); the raw probability tensor goes to
    /// <out>.prob.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Only run cases whose name contains this substring.
    #[arg(long)]
    scope: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// SynthConfig JSON.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not usage errors
            let _ = e.print();
            return if e.exit_code() == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let model_cfg: ModelConfig = read_json(&args.model_config)?;
    let mut train_cfg: TrainConfig = read_json(&args.train_config)?;
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    let samples = load_dataset(&args.data)?;
    let (train_set, val_set) = split_train_val(&samples, train_cfg.val_fraction);
    eprintln!(
        "training on {} samples, validating on {} ({} epochs, batch {}, seed {})",
        train_set.len(),
        val_set.len(),
        train_cfg.epochs,
        train_cfg.batch_size,
        train_cfg.seed
    );
    let outcome = trainer::train(&model_cfg, &train_cfg, &train_set, &val_set)?;
    std::fs::create_dir_all(&args.out)?;
    checkpoint::save_path(&outcome.best_model, args.out.join("checkpoint.s3ck"))?;
    std::fs::write(
        args.out.join("trainlog.json"),
        serde_json::to_string_pretty(&outcome.log)?,
    )?;
    for e in &outcome.log.epochs {
        eprintln!(
            "epoch {:>3}  train_dsc {:.4}  val_dsc {:.4}  ({} ms)",
            e.epoch, e.train_dsc, e.val.dsc, e.wall_ms
        );
    }
    eprintln!(
        "best validation dsc {:.4} at epoch {}; checkpoint written to {}",
        outcome.log.best_dsc,
        outcome.log.best_epoch,
        args.out.join("checkpoint.s3ck").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let model = checkpoint::load_path(&args.checkpoint)?;
    let samples = load_dataset(&args.data)?;
    let report = trainer::evaluate(&model, &samples, 16, args.per_sample)?;
    std::fs::write(&args.report, serde_json::to_string_pretty(&report)?)?;
    println!(
        "dsc {:.4}  acc {:.4}  miou {:.4}  precision {:.4}  sensitivity {:.4}  ({} samples)",
        report.dsc, report.acc, report.miou, report.precision, report.sensitivity, report.n_samples
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(args: PredictArgs) -> Result<ExitCode> {
    let model = checkpoint::load_path(&args.checkpoint)?;
    let raw = load_pgm(&args.image)?;
    let input = preprocess(&raw, model.cfg.input_size)?;
    let probs = trainer::predict(&model, &input)?;
    let mask = probs.map(|v| if v >= HARD_THRESHOLD { 1.0 } else { 0.0 });
    save_pgm(&mask, &args.out)?;
    let prob_path = args.out.with_extension("prob");
    probs.save(&prob_path)?;
    println!(
        "mask written to {}, probabilities to {}",
        args.out.display(),
        prob_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let reports = run_suite(args.scope.as_deref(), &CheckConfig::default())?;
    let mut all_pass = true;
    for r in &reports {
        println!("{}", r.line());
        all_pass &= r.pass;
    }
    if all_pass {
        println!("gradcheck: {} cases passed", reports.len());
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Numerical("gradient check failed".into()))
    }
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let mut cfg: SynthConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let samples = generate_synthetic(&cfg)?;
    let manifest = write_dataset(&samples, &args.out)?;
    println!("{} samples written, manifest at {}", samples.len(), manifest.display());
    Ok(ExitCode::SUCCESS)
}

