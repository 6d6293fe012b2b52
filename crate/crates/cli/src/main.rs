use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use svyqif_cli::config::RunConfig;
use svyqif_cli::{commands, report, CliError};

#[derive(Parser)]
#[command(name = "svyqif", version, about = "Penalized survey-weighted QIF for longitudinal survey data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the penalized QIF and write estimates with sandwich standard errors.
    Fit(DataArgs),
    /// Run a Monte Carlo campaign on simulated finite populations.
    Simulate(SimArgs),
    /// Fit, then estimate standard errors with the one-step rescaling bootstrap.
    Bootstrap(DataArgs),
    /// Write WBIC and coefficients for every lambda on the tuning grid.
    LambdaPath(DataArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (text, out) = match cli.command {
        Command::Fit(a) => (commands::fit(&RunConfig::from_file(&a.config)?, &a.data)?, a.out),
        Command::Bootstrap(a) => (commands::bootstrap(&RunConfig::from_file(&a.config)?, &a.data)?, a.out),
        Command::LambdaPath(a) => (commands::lambda_path(&RunConfig::from_file(&a.config)?, &a.data)?, a.out),
        Command::Simulate(a) => (commands::simulate(&RunConfig::from_file(&a.config)?)?, a.out),
    };
    report::write_file(&out, &text)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("svyqif: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
