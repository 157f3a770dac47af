use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use coherent_bayes_cli::{emit_results, execute, load_config, summary, write_results, CliError, Command, Config, Format};

#[derive(Debug, Parser)]
#[command(name = "coherent-bayes", version, about = "Adaptive coherent-state identification benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// TOML configuration document; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed, overriding `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
    /// Worker threads for ensembles, overriding `ensemble.parallelism`.
    #[arg(long, global = true, env = "COHERENT_BAYES_PARALLELISM")]
    parallelism: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Sub {
    /// One estimation run.
    Run,
    /// Median error curves for every policy variant.
    Ensemble,
    /// Outlier counts per 10 000 samples.
    Table,
    /// Sweep of the focus radius parameters.
    Gridsearch,
    /// Compare the particle filter with the dense-grid posterior.
    OracleCheck,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OutputFormat {
    Csv,
    Jsonl,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(p) = cli.parallelism {
        cfg.ensemble.parallelism = p;
    }
    let command = match cli.command {
        Sub::Run => Command::Run,
        Sub::Ensemble => Command::Ensemble,
        Sub::Table => Command::Table,
        Sub::Gridsearch => Command::GridSearch,
        Sub::OracleCheck => Command::OracleCheck,
    };
    let format = match cli.format {
        OutputFormat::Csv => Format::Csv,
        OutputFormat::Jsonl => Format::JsonLines,
    };
    let results = execute(command, &cfg)?;
    match &cli.out {
        Some(path) => {
            emit_results(&results, format, path)?;
            eprintln!("{}", summary(&results));
        }
        None => write_results(&results, format, io::stdout().lock())?,
    }
    Ok(())
}
