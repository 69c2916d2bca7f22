use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pge_cli::commands::{self, Overrides, Session, Suite};
use pge_cli::config::RunConfig;
use pge_cli::CliError;
use pge_core::baselines::Metric;

#[derive(Parser)]
#[command(
    name = "pge",
    version,
    about = "Rank source datasets for transfer to a target without training"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// PGE master seed; overrides `pge.master_seed`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate PGEs for the target and every source and print the gap table.
    Estimate,
    /// Run an evaluation suite and write its JSON report and CSV curves.
    Evaluate {
        /// Which suite to run; its config section must be present.
        #[arg(long, value_enum)]
        suite: Suite,
    },
    /// Score every source with a baseline metric after pretraining on it.
    Baseline {
        /// One of leep, nce, hscore, logme, gbc.
        #[arg(long, value_parser = parse_metric)]
        metric: Metric,
        /// Score a `f0..fN,label` CSV directly instead of running the pipeline.
        #[arg(long, value_name = "PATH")]
        fixture: Option<PathBuf>,
    },
    /// Re-read every file in the output directory and summarize it.
    Report,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: pge_core::baselines::BaselineError| e.to_string())
}

fn session(cli: &Cli, command: &str) -> Result<Session, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Validation(format!("`{command}` needs --config PATH")))?;
    Session::open(
        path,
        &Overrides {
            out: cli.out.clone(),
            seed: cli.seed,
        },
    )
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Estimate => commands::estimate(&session(&cli, "estimate")?),
        Command::Evaluate { suite } => commands::evaluate(&session(&cli, "evaluate")?, *suite),
        Command::Baseline {
            metric,
            fixture: Some(path),
        } => commands::baseline_fixture(*metric, path).map(|_| ()),
        Command::Baseline { metric, fixture: None } => commands::baseline(&session(&cli, "baseline")?, *metric),
        Command::Report => {
            let out = match (&cli.out, &cli.config) {
                (Some(out), _) => out.clone(),
                (None, Some(path)) => {
                    let config = RunConfig::read(path)?;
                    path.parent()
                        .map_or_else(|| config.out_dir.clone(), |p| p.join(&config.out_dir))
                }
                (None, None) => return Err(CliError::Validation("`report` needs --out DIR or --config PATH".into())),
            };
            commands::report(&out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
