//! `regmis`: exact solutions, datasets, single estimates and replicate
//! sweeps for the Gridwalk off-policy evaluation benchmark.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure or a
//! violated invariant, 130 interrupted sweep (partial results are written).

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use regmis::Error;

#[derive(Debug, Parser)]
#[command(name = "regmis", version, about = "Regularized off-policy value and weight estimation")]
struct Cli {
    /// TOML config with sections gridwalk, features, regularizer, experiment, sample, mdp.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set gridwalk.width=8`; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".", global = true)]
    out: PathBuf,
    /// Master seed for experiments and the dataset seed for single estimates.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for replicate sweeps; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ground truth, closed-form duals and residual diagnostics.
    Exact,
    /// Draw a transition dataset and an initial-state sample.
    Sample,
    /// Fit one regularized value estimate.
    EstimateQ,
    /// Fit one regularized weight estimate.
    EstimateW,
    /// Value-based, weight-based and doubly robust return estimates.
    Ope,
    /// Run a replicate sweep and write the result table.
    Experiment,
    /// Run the invariant suite; exits 3 on any violation.
    Check,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_INTERRUPTED: u8 = 130;

fn fail(e: &Error) -> ExitCode {
    eprintln!("regmis: {e}");
    ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_NUMERICAL })
}

fn check_status(lines: &[commands::CheckLine]) -> u8 {
    if lines.iter().all(|l| l.pass) {
        0
    } else {
        EXIT_NUMERICAL
    }
}

fn print_json(value: &serde_json::Value) {
    // A closed stdout (e.g. piped into `head`) is not an error; the files are already written.
    let _ = writeln!(std::io::stdout().lock(), "{value:#}");
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    let cfg = config::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", cli.out.display())))?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Exact => print_json(&commands::exact(&cfg, out)?),
        Command::Sample => print_json(&commands::sample(&cfg, out)?),
        Command::EstimateQ => print_json(&commands::estimate_q(&cfg, out)?),
        Command::EstimateW => print_json(&commands::estimate_w(&cfg, out)?),
        Command::Ope => print_json(&commands::ope(&cfg, out)?),
        Command::Experiment => {
            commands::install_interrupt_handler()?;
            let files = commands::experiment(&cfg, out)?;
            println!("{} rows written to {}", files.rows, files.results.display());
            if files.truncated {
                eprintln!("regmis: interrupted; results are partial and end with the truncation marker");
                return Ok(ExitCode::from(EXIT_INTERRUPTED));
            }
        }
        Command::Check => {
            let lines = commands::check(&cfg, out)?;
            for l in &lines {
                println!("{} {}: {:.3e} (limit {:.1e})", if l.pass { "ok  " } else { "FAIL" }, l.name, l.value, l.limit);
            }
            let code = check_status(&lines);
            if code != 0 {
                eprintln!("regmis: {} invariant(s) violated", lines.iter().filter(|l| !l.pass).count());
                return Ok(ExitCode::from(code));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    run(&cli).unwrap_or_else(|e| fail(&e))
}
