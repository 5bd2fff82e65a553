use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use npnorm_cli::commands;
use npnorm_cli::config::RunConfig;
use npnorm_cli::exit::exit_code;

/// Neural-process normative modeling of volumetric measurements.
///
/// Exit codes: 1 internal error, 2 bad input or path, 3 invalid
/// configuration, 4 numeric failure.
#[derive(Parser)]
#[command(name = "npnorm", version)]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set context.M=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed; overrides `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (cohort/, model/, eval/); for `report`, where the
    /// summary goes.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort to <out>/cohort.
    Generate,
    /// Split, fit the context set and train the model into <out>/model.
    Train,
    /// Score subjects and write metrics to <out>/eval.
    Evaluate {
        /// Rerun the whole pipeline for seeds seed .. seed+N-1 and report
        /// mean and std of each AUC.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Aggregate evaluated runs into summary.csv and auc.svg.
    Report {
        runs: Vec<PathBuf>,
    },
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    cfg.finalize()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    if cli.dump_config {
        println!("{}", cfg.dump());
        return Ok(());
    }
    match cli.command {
        Some(Command::Generate) => commands::cmd_generate(&cfg).map(|_| ()),
        Some(Command::Train) => commands::cmd_train(&cfg).map(|_| ()),
        Some(Command::Evaluate { repeats }) => commands::cmd_evaluate(&cfg, repeats).map(|_| ()),
        Some(Command::Report { runs }) => commands::cmd_report(&runs, &cfg.output),
        None => Err(npnorm_cli::exit::CliError::Config("no command given (see --help)".into()).into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
