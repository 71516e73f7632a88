//! `peso` command-line tool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use peso_core::harness::check::cli_check;
use peso_core::harness::commands::{cli_compare, cli_run, cli_sweep, exit_code, summary_line};
use peso_core::{Error, Tolerances};

#[derive(Parser)]
#[command(
    name = "peso",
    version,
    about = "Low-rank subspace optimizers on desk-scale problems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config and write its trace CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: current directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several configs on the same problem and align their losses.
    Compare {
        /// Config files; may be repeated or given positionally.
        #[arg(long = "config")]
        configs: Vec<PathBuf>,
        rest: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a self-check suite (or `all`).
    Check {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a tolerance, e.g. `--tol svd_reconstruction_rel=1e-12`.
        #[arg(long = "tol", value_name = "NAME=VALUE")]
        tol: Vec<String>,
    },
    /// Expand a parameter grid over a base config and run every cell.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_tolerances(items: &[String]) -> Result<Tolerances, Error> {
    let mut tol = Tolerances::default();
    for item in items {
        let (name, value) = item.split_once('=').ok_or_else(|| Error::Config {
            field: "tol".into(),
            message: format!("expected NAME=VALUE, got `{item}`"),
        })?;
        let value: f64 = value.trim().parse().map_err(|_| Error::Config {
            field: format!("tol.{name}"),
            message: format!("`{value}` is not a number"),
        })?;
        tol.set(name.trim(), value).map_err(|e| Error::Config {
            field: format!("tol.{name}"),
            message: e.to_string(),
        })?;
    }
    Ok(tol)
}

fn execute(command: Command) -> Result<i32, Error> {
    match command {
        Command::Run { config, out, seed } => {
            let outcome = cli_run(&config, out.as_deref(), seed)?;
            if let Some(summary) = &outcome.result.summary {
                println!("{}", summary_line(summary));
            }
            println!("trace: {}", outcome.trace_path.display());
            if let Some(abort) = &outcome.result.abort {
                eprintln!("error: run aborted at step {}: {}", abort.step, abort.error);
            }
            Ok(outcome.exit_code())
        }
        Command::Compare {
            mut configs,
            rest,
            out,
            seed,
        } => {
            configs.extend(rest);
            let report = cli_compare(&configs, out.as_deref(), seed)?;
            print!("{}", report.text);
            if out.is_none() {
                print!("{}", report.csv);
            }
            let aborted = report.entries.iter().any(|e| e.aborted);
            Ok(if aborted { 3 } else { 0 })
        }
        Command::Check { suite, out, tol } => {
            let tol = parse_tolerances(&tol)?;
            let report = cli_check(&suite, out.as_deref(), &tol)?;
            print!("{}", report.human_summary());
            Ok(if report.passed { 0 } else { 1 })
        }
        Command::Sweep { config, out, seed } => {
            let cells = cli_sweep(&config, &out, seed)?;
            let aborted = cells.iter().filter(|c| c.aborted).count();
            println!(
                "{} cells written to {} ({} aborted)",
                cells.len(),
                out.join("index.csv").display(),
                aborted
            );
            Ok(if aborted > 0 { 3 } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
