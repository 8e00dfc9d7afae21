//! `coremac`: train, simulate, sweep, Monte Carlo and report for the
//! single-MOSFET multiply-accumulate classifier.
//!
//! Settings come from built-in defaults, then `--config <file.json>`, then
//! command-line flags; later sources win. Every output file carries the
//! SHA-256 of the effective configuration.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coremac::variation::SweepAxis;

use crate::commands::Context;
use crate::config::{Mode, Range, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(
    name = "coremac",
    version,
    about = "Single-MOSFET multiply-accumulate classifier toolchain"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON run configuration (schema coremac/run-config, version 1)
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory holding the MNIST IDX files (overrides paths.mnist_dir)
    #[arg(long, global = true, value_name = "DIR")]
    mnist_dir: Option<PathBuf>,
    /// Output directory (overrides paths.output_dir)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Downsampled image side m (overrides pipeline.side)
    #[arg(long, global = true)]
    side: Option<usize>,
    /// Worker threads; 0 uses every available core
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one-vs-all weights and compile them to a gate program
    Train {
        /// Epochs (overrides train.epochs)
        #[arg(long)]
        epochs: Option<usize>,
        /// Learning rate (overrides train.learning_rate)
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Shuffle seed (overrides train.seed)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Calibrate the array and classify the test set
    Simulate {
        /// Ideal math on the compiled weights, or the behavioral circuit
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Evaluate only the first N test images
        #[arg(long, value_name = "N")]
        limit: Option<usize>,
        /// Write sensing-line traces (at most 100 images)
        #[arg(long)]
        waveforms: bool,
    },
    /// Accuracy over feature count, temperature or supply voltage
    Sweep {
        #[arg(value_enum)]
        axis: AxisArg,
        /// First grid value (with --hi and --step)
        #[arg(long, requires_all = ["hi", "step"], allow_negative_numbers = true)]
        lo: Option<f64>,
        /// Last grid value
        #[arg(long, requires_all = ["lo", "step"], allow_negative_numbers = true)]
        hi: Option<f64>,
        /// Grid spacing
        #[arg(long, requires_all = ["lo", "hi"])]
        step: Option<f64>,
    },
    /// Monte Carlo threshold and comparator mismatch on a balanced subset
    Montecarlo {
        /// Number of runs (overrides variation.runs)
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        runs: Option<u64>,
        /// Array threshold sigma in millivolts
        #[arg(long)]
        sigma_mv: Option<f64>,
        /// Mismatch seed
        #[arg(long)]
        seed: Option<u64>,
        /// Also search for the sigma giving this mean degradation (points)
        #[arg(long)]
        target_degradation: Option<f64>,
    },
    /// Confusion matrix, margin histograms, cost estimate and comparison table
    Report,
    /// Print the effective configuration and its hash
    Config,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    Features,
    Temperature,
    Vdd,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Features => Self::Features,
            AxisArg::Temperature => Self::Temperature,
            AxisArg::Vdd => Self::Vdd,
        }
    }
}

fn effective_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    let g = &cli.global;
    if let Some(d) = &g.mnist_dir {
        cfg.paths.mnist_dir = d.clone();
    }
    if let Some(d) = &g.out {
        cfg.paths.output_dir = d.clone();
    }
    if let Some(m) = g.side {
        cfg.pipeline.side = m;
    }
    match &cli.command {
        Command::Train {
            epochs,
            learning_rate,
            seed,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = *lr;
            }
            if let Some(s) = seed {
                cfg.train.seed = *s;
            }
        }
        Command::Simulate { mode, limit, .. } => {
            if let Some(m) = mode {
                cfg.simulate.mode = *m;
            }
            if limit.is_some() {
                cfg.simulate.limit = *limit;
            }
        }
        Command::Montecarlo {
            runs,
            sigma_mv,
            seed,
            target_degradation,
        } => {
            if let Some(r) = runs {
                cfg.variation.runs =
                    usize::try_from(*r).map_err(|_| CliError::Usage("--runs too large".into()))?;
            }
            if let Some(s) = sigma_mv {
                cfg.variation.mismatch.sigma_vth_array = s * 1e-3;
            }
            if let Some(s) = seed {
                cfg.variation.mismatch.seed = *s;
            }
            if target_degradation.is_some() {
                cfg.variation.target_degradation = *target_degradation;
            }
        }
        Command::Sweep { .. } | Command::Report | Command::Config => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.global.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.jobs)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--jobs: {e}")))?;
    }
    let ctx = Context::new(effective_config(&cli)?)?;
    match cli.command {
        Command::Train { .. } => commands::train(&ctx),
        Command::Simulate { waveforms, .. } => commands::simulate(&ctx, waveforms),
        Command::Sweep { axis, lo, hi, step } => {
            let range = match (lo, hi, step) {
                (Some(lo), Some(hi), Some(step)) => Some(Range { lo, hi, step }),
                _ => None,
            };
            commands::sweep(&ctx, axis.into(), range)
        }
        Command::Montecarlo { .. } => commands::montecarlo(&ctx),
        Command::Report => commands::report(&ctx),
        Command::Config => {
            println!("{}", ctx.cfg.to_json());
            println!("config_sha256={}", ctx.hash);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
