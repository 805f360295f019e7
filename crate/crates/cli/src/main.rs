use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fierce_core::experiment::{export_features, run_sweep, run_train, RunConfig, SweepAxis};
use fierce_core::gradcheck::{gradient_audit, Tolerance};

/// Entropy-regularized coarse-label training and coarse-to-fine evaluation.
#[derive(Parser)]
#[command(name = "fierce", version)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one model per grid value and write a summary.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// lambda, anchors or sigma
        #[arg(long)]
        axis: SweepAxis,
        /// Comma separated grid, e.g. 0.01,0.1,1,10
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Dump forward features of a checkpoint on a dataset CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Check straight-through gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::from_file(&config)?;
            let run = run_train(&cfg, &cli.out)?;
            if let Some(last) = run.metrics.last() {
                println!(
                    "epoch {} accuracy {:.4} mse {}",
                    last.epoch,
                    last.accuracy,
                    last.headline_mse().map_or("-".into(), |v| format!("{v:.6}"))
                );
            }
            println!("wrote {}", cli.out.display());
        }
        Command::Sweep { config, axis, values } => {
            let cfg = RunConfig::from_file(&config)?;
            for r in run_sweep(&cfg, axis, &values, &cli.out)? {
                println!(
                    "{}={} final_mse {:.6} min_mse {:.6} accuracy {:.4}",
                    axis.as_str(),
                    r.value,
                    r.final_mse,
                    r.min_mse,
                    r.final_accuracy
                );
            }
            println!("wrote {}", cli.out.join("summary.csv").display());
        }
        Command::ExportFeatures { checkpoint, data } => {
            std::fs::create_dir_all(&cli.out)?;
            let path = cli.out.join("features.csv");
            let n = export_features(&checkpoint, &data, &path)
                .with_context(|| format!("exporting features of {}", checkpoint.display()))?;
            println!("wrote {n} rows to {}", path.display());
        }
        Command::Gradcheck { seed, instances } => {
            let reports = gradient_audit(seed, instances, &Tolerance::default())?;
            std::fs::create_dir_all(&cli.out)?;
            let mut csv = String::from("instance,shape,entries,failures,max_abs_error,max_rel_error\n");
            let mut failed = 0;
            for r in &reports {
                println!(
                    "{:>3} {} {} max_abs {:.2e} max_rel {:.2e} [{}]",
                    r.index,
                    if r.passed() { "ok  " } else { "FAIL" },
                    r.description,
                    r.max_abs_error,
                    r.max_rel_error,
                    r.entries
                );
                csv.push_str(&format!(
                    "{},{},{},{},{:e},{:e}\n",
                    r.index, r.description, r.entries, r.failures, r.max_abs_error, r.max_rel_error
                ));
                failed += usize::from(!r.passed());
            }
            std::fs::write(cli.out.join("gradcheck.csv"), csv)?;
            if failed > 0 {
                bail!("{failed} of {} instances exceed tolerance", reports.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
