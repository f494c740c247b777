use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qlb_cli::{compare_command, parse_seeds, run_command, split_list, validate_command, CliError};

#[derive(Parser)]
#[command(name = "qlb", version, about = "Pull-based load balancing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its event log and reports.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's workload seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the scenario's output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a policy x seed cross product and write a comparison CSV.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated labels: PULL_RL or push policy tags (RR, WRR, ...).
        #[arg(long)]
        policies: String,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario and print its normalized form.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { scenario, seed, out } => {
            let files = run_command(&scenario, seed, out.as_deref())?;
            for p in &files.paths {
                println!("{}", p.display());
            }
        }
        Command::Compare {
            scenario,
            policies,
            seeds,
            out,
        } => {
            let seeds = parse_seeds(&seeds)?;
            let cmp = compare_command(&scenario, &split_list(&policies), &seeds, out.as_deref())?;
            print!("{}", cmp.csv);
            eprintln!("wrote {}", cmp.path.display());
        }
        Command::Validate { scenario } => print!("{}", validate_command(&scenario)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qlb: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
