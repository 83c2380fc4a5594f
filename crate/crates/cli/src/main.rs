//! `losa`: run the sparsify-and-adapt loop, its baselines, or the layer
//! importance probe from a TOML config.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use losa_core::config::{Mode, RunConfig};
use losa_core::driver::{compare, evaluate, prepare, run};
use losa_core::model::{forward_capture, load_checkpoint, CalibBatch};
use losa_core::report::{write_comparison, write_outputs};
use losa_core::rmi::importance;
use losa_core::LosaError;

#[derive(Debug, Parser)]
#[command(name = "losa", version, about = "Dynamic low-rank sparse adaptation for layered linear models")]
struct Cli {
    /// Worker threads; falls back to LOSA_THREADS, then 1.
    #[arg(long, global = true, env = "LOSA_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the mode named in the config (default: losa).
    Run(RunArgs),
    /// Uniform one-shot pruning at the final rate, no fine-tuning.
    Oneshot(RunArgs),
    /// One-shot pruning followed by fixed-rank LoRA.
    Lora(RunArgs),
    /// The dynamic loop with mixed N:M masks.
    Nm(RunArgs),
    /// Print per-layer importance of a model as JSON.
    Importance(ImportanceArgs),
    /// Run one-shot, LoRA, and the dynamic loop side by side.
    Report(RunArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML config file; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set schedule.steps=3`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Output directory.
    #[arg(short, long, default_value = "losa-out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ImportanceArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Model checkpoint; the config's model is used when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn load_config(args: &ConfigArgs, mode: Option<Mode>) -> losa_core::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path, &args.overrides)?,
        None => RunConfig::from_toml_str("", &args.overrides)?,
    };
    if let Some(mode) = mode {
        cfg.mode = mode;
    }
    Ok(cfg)
}

fn run_mode(args: &RunArgs, mode: Option<Mode>) -> losa_core::Result<()> {
    let cfg = load_config(&args.config, mode)?;
    let (stack, calib) = prepare(&cfg)?;
    let result = run(&cfg, &stack, &calib)?;
    let eval = evaluate(&stack, &result.model, &calib, cfg.model.activation)?;
    let files = write_outputs(&args.out, &cfg, &stack, &result, &eval)?;
    println!(
        "{}: total error {:.6e}, mean sparsity {:.4}, mean rank {:.2}; wrote {}",
        cfg.mode.as_str(),
        eval.total_error,
        eval.mean_sparsity,
        eval.mean_rank,
        files.report.parent().unwrap_or(&args.out).display(),
    );
    Ok(())
}

fn run_report(args: &RunArgs) -> losa_core::Result<()> {
    let cfg = load_config(&args.config, None)?;
    let (stack, calib) = prepare(&cfg)?;
    let rows = compare(&cfg, &stack, &calib)?;
    write_comparison(&args.out, &rows)?;
    for r in &rows {
        println!(
            "{:<14} total error {:.6e}  end-to-end mse {:.6e}  sparsity {:.4}  mergeable {}",
            r.mode.as_str(),
            r.total_error,
            r.end_to_end_mse,
            r.mean_sparsity,
            r.mergeable
        );
    }
    Ok(())
}

fn run_importance(args: &ImportanceArgs) -> losa_core::Result<()> {
    let cfg = load_config(&args.config, None)?;
    let (stack, calib) = match &args.checkpoint {
        Some(path) => {
            let stack = load_checkpoint(path)?.stack;
            let calib = match &cfg.calib.file {
                Some(file) => CalibBatch::from_csv(file)?,
                None => CalibBatch::synthetic(
                    cfg.calib.samples,
                    stack.input_dim(),
                    losa_core::linalg::derive_seed(cfg.seed, "calib"),
                )?,
            };
            (stack, calib)
        }
        None => prepare(&cfg)?,
    };
    let maps = forward_capture(&stack, &calib, cfg.model.activation)?;
    let imp = importance(&maps, cfg.rmi.importance())?;
    println!("{}", serde_json::to_string_pretty(&imp)?);
    Ok(())
}

fn exit_code(err: &LosaError) -> u8 {
    match err.root() {
        LosaError::Config(_) | LosaError::InvalidArgument(_) => 2,
        LosaError::Shape { .. }
        | LosaError::RankTooLarge { .. }
        | LosaError::InfeasibleBudget { .. }
        | LosaError::UnachievableNm { .. }
        | LosaError::NonFinite(_) => 3,
        _ => 4,
    }
}

fn kind(code: u8) -> &'static str {
    match code {
        2 => "config",
        3 => "numeric",
        _ => "io",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build()
        .expect("thread pool");
    let outcome = pool.install(|| match &cli.command {
        Command::Run(a) => run_mode(a, None),
        Command::Oneshot(a) => run_mode(a, Some(Mode::Oneshot)),
        Command::Lora(a) => run_mode(a, Some(Mode::LoraBaseline)),
        Command::Nm(a) => run_mode(a, Some(Mode::NmLosa)),
        Command::Importance(a) => run_importance(a),
        Command::Report(a) => run_report(a),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            eprintln!("losa: error[{}]: {err}", kind(code));
            ExitCode::from(code)
        }
    }
}
