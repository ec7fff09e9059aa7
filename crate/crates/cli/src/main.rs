//! Command-line entry point. Exit codes are stable: 0 success, 2 invalid
//! configuration, 3 numeric failure (NaN loss or gradient), 4 no
//! lambda-valid solution in a sweep.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dselect_cli::config::{ExperimentConfig, GateChoice};
use dselect_cli::error::HarnessError;
use dselect_cli::experiments;

#[derive(Parser)]
#[command(name = "dselect", about = "Sparse mixture-of-experts gating experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write trajectory, metrics and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<String>,
    },
    /// Run the hyperparameter grid in the config's sweep.* lists.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Trials per grid point (seeds derive from the base seed).
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Frozen-expert recovery: DSelect-k vs Top-k over several seeds.
    Recover {
        /// Optional config; defaults to the standard recovery setup.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seed list, e.g. "0,1,2".
        #[arg(long)]
        seeds: Option<String>,
        /// Number of seeds (0..n) when --seeds is not given.
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        out: Option<String>,
    },
    /// Group-structured synthetic comparison across gate kinds.
    GroupSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated gate kinds to compare.
        #[arg(long, default_value = "dselect_static,topk")]
        gates: String,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        out: Option<String>,
    },
    /// Recompute metrics from a checkpoint and its run config.
    Metrics {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "metrics_recomputed.json")]
        out: String,
    },
}

fn load_config(
    path: Option<&PathBuf>,
    default: ExperimentConfig,
    seed: Option<u64>,
    out: Option<String>,
) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::parse(&std::fs::read_to_string(p)?)?,
        None => default,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_seed_list(
    seeds: Option<&str>,
    trials: usize,
) -> Result<Vec<u64>, HarnessError> {
    match seeds {
        Some(text) => text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|e| HarnessError::Config(format!("bad seed '{}': {}", s, e)))
            })
            .collect(),
        None => Ok((0..trials as u64).collect()),
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load_config(Some(&config), ExperimentConfig::default(), seed, out)?;
            let result = experiments::cmd_train(&cfg)?;
            println!(
                "run complete: val_loss={:.6} lambda_valid={} -> {}",
                result.metrics.get("val_loss").unwrap_or(&f64::NAN),
                result.lambda_valid,
                result.out_dir.display()
            );
            Ok(())
        }
        Command::Sweep { config, trials, seed, out } => {
            let cfg = load_config(Some(&config), ExperimentConfig::default(), seed, out)?;
            let outcome = experiments::cmd_sweep(&cfg, trials)?;
            println!(
                "sweep complete: {} runs, {} lambda-valid, best val_loss={:.6} -> {}",
                outcome.runs,
                outcome.valid_runs,
                outcome.best.metrics.get("val_loss").unwrap_or(&f64::NAN),
                outcome.best.out_dir.display()
            );
            println!("results table: {}", outcome.table_path.display());
            Ok(())
        }
        Command::Recover { config, seeds, trials, out } => {
            let cfg = load_config(config.as_ref(), ExperimentConfig::recovery_default(), None, out)?;
            let seed_list = parse_seed_list(seeds.as_deref(), trials)?;
            let report = experiments::cmd_recover(&cfg, &seed_list)?;
            println!(
                "recovery over {} seeds: DSelect-k recovered all {} true experts in {}/{} seeds",
                report.seeds.len(),
                cfg.k,
                report.dselect_full_recoveries,
                report.seeds.len()
            );
            println!(
                "mean support oscillations: dselect={:.2} topk={:.2}",
                report.dselect_mean_oscillations, report.topk_mean_oscillations
            );
            Ok(())
        }
        Command::GroupSynth { config, gates, seeds, trials, out } => {
            let cfg =
                load_config(config.as_ref(), ExperimentConfig::group_synth_default(), None, out)?;
            let gate_list: Vec<GateChoice> = gates
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<GateChoice>()
                        .map_err(HarnessError::Config)
                })
                .collect::<Result<_, _>>()?;
            let seed_list = parse_seed_list(seeds.as_deref(), trials)?;
            let report = experiments::cmd_group_synth(&cfg, &gate_list, &seed_list)?;
            println!(
                "group synthetic: {} runs written to {}",
                report.rows.len(),
                report.table_path.display()
            );
            Ok(())
        }
        Command::Metrics { config, checkpoint, out } => {
            let metrics = experiments::cmd_metrics(&config, &checkpoint, &PathBuf::from(&out))?;
            println!("recomputed {} metrics -> {}", metrics.len(), out);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
