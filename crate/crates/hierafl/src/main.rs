//! Command-line front end: run experiments, compare distillation modes,
//! evaluate saved checkpoints, and inspect data partitions.
//!
//! Every subcommand exits 0 on success; any failure prints a single
//! `error: …` line to stderr and exits 1, so wrapper scripts can parse
//! outcomes without scraping multi-line panics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hierafl::harness::{self, ExperimentConfig};
use hierafl::model::{checkpoint, HierarchyNetSpec};
use hierafl::tensor::softmax_vec;
use hierafl::{Error, Result};

/// Environment variable that redirects experiment output (overridden by `--out`).
const OUT_ENV: &str = "HIERAFL_OUT";

#[derive(Parser)]
#[command(
    name = "hierafl",
    version,
    about = "Hierarchical federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment end to end and write metrics, summary, and checkpoint.
    Run {
        /// Path to a key=value config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory (beats the HIERAFL_OUT variable).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the same experiment under off / logits_only / full distillation and compare.
    Ablate {
        /// Path to a key=value config file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a saved checkpoint on a dataset.
    Eval {
        /// Path to a checkpoint written by `run`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset spec: `csv:<path>`, `idx:images=<path>,labels=<path>`, or `synthetic:<k=v,…>`.
        #[arg(long)]
        data: String,
    },
    /// Print per-device class histograms for the configured partition.
    PartitionReport {
        /// Path to a key=value config file.
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            apply_out_override(&mut cfg, out);
            run_one(&cfg)
        }
        Command::Ablate { config } => {
            let mut cfg = load_config(&config)?;
            apply_out_override(&mut cfg, None);
            let out = harness::run_ablation(&cfg)?;
            print!("{}", read_text(&out.summary_path)?);
            println!("summary: {}", out.summary_path.display());
            Ok(())
        }
        Command::Eval { checkpoint, data } => eval_checkpoint(&checkpoint, &data),
        Command::PartitionReport { config } => {
            let cfg = load_config(&config)?;
            print!("{}", harness::partition_report(&cfg)?);
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::parse(&read_text(path)?)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Resolve the output directory: `--out` wins, then HIERAFL_OUT, then the config.
fn apply_out_override(cfg: &mut ExperimentConfig, flag: Option<PathBuf>) {
    if let Some(dir) = flag {
        cfg.out_dir = dir;
    } else if let Some(dir) = std::env::var_os(OUT_ENV) {
        if !dir.is_empty() {
            cfg.out_dir = PathBuf::from(dir);
        }
    }
}

fn run_one(cfg: &ExperimentConfig) -> Result<()> {
    let out = harness::run_experiment(cfg)?;
    let last = out
        .rows
        .last()
        .expect("a validated config always runs at least one round");
    println!("completed {} rounds (seed {})", out.rows.len(), cfg.seed);
    for (i, acc) in last.per_exit.iter().enumerate() {
        println!("acc_{} = {acc}", i + 1);
    }
    println!("acc_ensemble = {}", last.ensemble);
    println!("metrics: {}", out.metrics_path.display());
    println!("summary: {}", out.summary_path.display());
    println!("checkpoint: {}", out.checkpoint_path.display());
    Ok(())
}

fn eval_checkpoint(path: &Path, data: &str) -> Result<()> {
    let (store, meta_logits) = checkpoint::load(path)?;
    let spec = HierarchyNetSpec::infer_from(&store)?;
    let test = harness::parse_data_spec(data)?;
    // Without a stored meta-learner the exits are mixed uniformly.
    let weights = match meta_logits {
        Some(m) => softmax_vec(&m)?.values().to_vec(),
        None => vec![1.0 / spec.num_exits as f64; spec.num_exits],
    };
    let report = harness::evaluate(&store, &spec, &weights, &test)?;
    for (i, acc) in report.per_exit.iter().enumerate() {
        println!("acc_{} = {acc}", i + 1);
    }
    println!("acc_ensemble = {}", report.ensemble);
    Ok(())
}
