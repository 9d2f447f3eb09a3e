use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cbo_core::cli::config::parse_flag_pairs;
use cbo_core::cli::{execute, Command, Invocation};

#[derive(Parser)]
#[command(name = "cbo", version, about = "Compositional bilevel optimization runs and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// CID on a random quadratic problem with analytic oracles.
    RunQuadratic(Common),
    /// Reweighted adversarial training on synthetic blobs.
    RunDone(Common),
    /// Finite-difference checks of every instance oracle.
    AuditGradients(Common),
    /// Grid of quadratic runs over T and K.
    ScalingStudy(Common),
    /// Clean and PGD accuracy of a saved model.
    Evaluate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON file with flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides as `--key value`, e.g. `--solver.eta 0.3` or `--eta 0.3`.
    #[arg(allow_hyphen_values = true, trailing_var_arg = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

/// Pulls `--config`/`--out` out of the trailing overrides when they come last.
fn split_known(common: &mut Common) -> Result<(), String> {
    let mut rest = Vec::new();
    let mut iter = std::mem::take(&mut common.overrides).into_iter();
    while let Some(arg) = iter.next() {
        match arg.as_str() {
            "--config" | "--out" => {
                let value = iter.next().ok_or_else(|| format!("{arg} is missing its value"))?;
                if arg == "--config" {
                    common.config = Some(value.into());
                } else {
                    common.out = Some(value.into());
                }
            }
            _ => rest.push(arg),
        }
    }
    common.overrides = rest;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, mut common) = match cli.command {
        Cmd::RunQuadratic(c) => (Command::RunQuadratic, c),
        Cmd::RunDone(c) => (Command::RunDone, c),
        Cmd::AuditGradients(c) => (Command::AuditGradients, c),
        Cmd::ScalingStudy(c) => (Command::ScalingStudy, c),
        Cmd::Evaluate(c) => (Command::Evaluate, c),
    };
    if let Err(msg) = split_known(&mut common) {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let flags = match parse_flag_pairs(&common.overrides) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let Some(out) = common.out else {
        eprintln!("error: --out <dir> is required");
        return ExitCode::from(2);
    };
    let inv = Invocation {
        command,
        config: common.config,
        out,
        flags,
    };
    match execute(&inv) {
        Ok(summary) => {
            println!("{}", summary.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
