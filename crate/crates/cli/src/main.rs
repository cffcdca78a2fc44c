use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use ait_core::analysis::{analyze_sparsity, inspect_memory};
use ait_core::checkpoint::Checkpoint;
use ait_core::config::TrainConfig;
use ait_core::data::{self, TriangleParams};
use ait_core::train::{evaluate, load_datasets, model_from_checkpoint, train_on, EvalReport};
use ait_core::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

/// Associative Transformer at desk scale.
#[derive(Parser)]
#[command(name = "ait", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Triangle,
    TwoBlob,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the AITDATA1 format.
    GenData {
        kind: Generator,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Blob standard deviation in pixels (triangle only).
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        /// Relative side tolerance for the positive class (triangle only).
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
    },
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `dotted.key=value`, applied after the file; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Accuracy and per-class counts of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    Inspect {
        #[command(subcommand)]
        what: Inspect,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// Per-head attention sparsity; writes the raw distribution as CSV.
    Sparsity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Inspect {
    /// Slot heatmaps (PGM), raw scores and Hopfield energy traces.
    Memory {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        trace_iters: usize,
    },
}

fn print_report(r: &EvalReport) {
    println!("accuracy {:.4}", r.accuracy);
    for c in &r.per_class {
        let acc = if c.total == 0 { 0.0 } else { c.correct as f64 / c.total as f64 };
        println!("class {} {}/{} {:.4}", c.class, c.correct, c.total, acc);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            kind,
            count,
            side,
            seed,
            out,
            spread,
            tolerance,
        } => {
            let set = match kind {
                Generator::Triangle => data::gen_triangle_with(count, side, seed, TriangleParams { spread, tolerance })?,
                Generator::TwoBlob => data::gen_two_blob(count, side, seed)?,
            };
            data::store(&set, &out)?;
            println!("wrote {} images to {}", set.len(), out.display());
        }
        Command::Train { config, overrides } => {
            let cfg = TrainConfig::load(&config, &overrides)?;
            let (train_set, test_set) = load_datasets(&cfg)?;
            let mut epoch = None;
            let (mut loss, mut acc, mut n) = (0.0, 0.0, 0usize);
            let summary = train_on(&cfg, train_set, test_set, |row| {
                if epoch.is_some_and(|e| e != row.epoch) {
                    eprintln!("epoch {} loss {:.4} acc {:.4}", epoch.unwrap(), loss / n as f64, acc / n as f64);
                    (loss, acc, n) = (0.0, 0.0, 0);
                }
                epoch = Some(row.epoch);
                loss += row.loss;
                acc += row.accuracy;
                n += 1;
            })?;
            if let Some(e) = epoch {
                eprintln!("epoch {} loss {:.4} acc {:.4}", e, loss / n.max(1) as f64, acc / n.max(1) as f64);
            }
            println!("steps {}", summary.steps);
            if let Some(p) = &summary.checkpoint {
                println!("checkpoint {}", p.display());
            }
            if let Some(r) = &summary.test {
                print_report(r);
            }
        }
        Command::Eval { ckpt, data: path } => {
            let model = model_from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            print_report(&evaluate(&model, &data::load(&path)?)?);
        }
        Command::Analyze {
            what: Analyze::Sparsity {
                ckpt,
                data: path,
                threshold,
                out,
            },
        } => {
            let model = model_from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let report = analyze_sparsity(&model, &data::load(&path)?, threshold)?;
            fs::write(&out, report.to_csv()).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            println!("layer,head,median_s");
            for h in &report.heads {
                println!("{},{},{}", h.layer, h.head, h.median);
            }
        }
        Command::Inspect {
            what: Inspect::Memory {
                ckpt,
                data: path,
                out,
                trace_iters,
            },
        } => {
            let model = model_from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let written = inspect_memory(&model, &data::load(&path)?, &out, trace_iters)?;
            println!("{} heatmaps, scores in {}", written.heatmaps.len(), written.scores_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
