use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use narrank::config::RunConfig;

mod commands;

use commands::CliError;

/// Simulate logs, train the generator, evaluator and autoregressive
/// baseline, generate slates, evaluate, and benchmark latency.
#[derive(Debug, Parser)]
#[command(name = "narrank", version)]
struct Cli {
    /// TOML run configuration. Defaults apply to anything it leaves out.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.adam.lr=0.01`. Repeatable.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Shorthand for `--set paths.out_dir=DIR`.
    #[arg(short, long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write simulated train and test exposure logs.
    Simulate,
    /// Train the one-pass generator and write its checkpoint and loss curve.
    TrainGenerator,
    /// Train the listwise evaluator.
    TrainEvaluator,
    /// Train the autoregressive baseline.
    TrainAr,
    /// Generate one slate per test request with generator and evaluator.
    Generate,
    /// Compute offline metrics on the test log.
    Evaluate {
        /// Skip the oracle utility of decoded slates.
        #[arg(long)]
        no_oracle: bool,
    },
    /// Time one-pass against step-by-step generation.
    Bench,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(dir) = &cli.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::TrainGenerator => commands::train_generator(&cfg),
        Command::TrainEvaluator => commands::train_evaluator(&cfg),
        Command::TrainAr => commands::train_ar(&cfg),
        Command::Generate => commands::generate(&cfg),
        Command::Evaluate { no_oracle } => commands::evaluate(&cfg, !no_oracle),
        Command::Bench => commands::bench(&cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
