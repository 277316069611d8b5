//! `rblock`: gamma solving, mask sampling, statistical verification,
//! training and method comparison.

mod commands;
mod exit;
mod manifest;

use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use exit::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "rblock", version, about = "Structured dropout with complementary sub-model masks")]
struct Cli {
    /// Print machine-readable JSON on standard output.
    #[arg(long, global = true)]
    json: bool,

    /// Seed for every random stream; overrides the config file seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Block-center probability for a target drop rate.
    Gamma(commands::gamma::Args),
    /// Mask sampling and export.
    #[command(subcommand)]
    Mask(MaskCommand),
    /// Monte Carlo check of drop rates against their closed form.
    Verify(commands::verify::Args),
    /// Train one method from a config file.
    Train(commands::train::Args),
    /// Train several methods and tabulate best accuracy per stage.
    Compare(commands::compare::Args),
}

#[derive(Debug, Subcommand)]
enum MaskCommand {
    /// Draw one mask (or mask pair) and write it as JSON.
    Sample(commands::mask::Args),
}

/// Global flags visible to every command.
#[derive(Clone, Copy, Debug)]
pub struct Globals {
    pub json: bool,
    pub seed: Option<u64>,
}

/// What a command prints: a human summary and a JSON document.
pub struct Output {
    pub text: String,
    pub json: serde_json::Value,
    /// Non-zero when the command ran but its verdict is a failure.
    pub code: u8,
}

impl Output {
    pub fn new(text: String, json: impl Serialize) -> CliResult<Self> {
        Ok(Self { text, json: serde_json::to_value(json)?, code: 0 })
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("RBLOCK_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("RBLOCK_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot configure {n} worker threads: {e}")))
}

fn run(cli: Cli) -> CliResult<Output> {
    configure_threads()?;
    let g = Globals { json: cli.json, seed: cli.seed };
    match cli.command {
        Command::Gamma(a) => commands::gamma::run(&a, g),
        Command::Mask(MaskCommand::Sample(a)) => commands::mask::run(&a, g),
        Command::Verify(a) => commands::verify::run(&a, g),
        Command::Train(a) => commands::train::run(&a, g),
        Command::Compare(a) => commands::compare::run(&a, g),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if std::env::args().any(|a| a == "--json") {
                let message = e.kind().to_string();
                let doc = serde_json::json!({ "error": message, "exit_code": exit::USAGE });
                println!("{}", serde_json::to_string_pretty(&doc).unwrap_or_default());
            }
            return ExitCode::from(exit::USAGE);
        }
    };
    let json = cli.json;
    let mut stdout = std::io::stdout().lock();
    match run(cli) {
        Ok(out) => {
            let printed = if json {
                writeln!(stdout, "{}", serde_json::to_string_pretty(&out.json).unwrap_or_default())
            } else {
                write!(stdout, "{}", out.text)
            };
            if printed.is_err() {
                return ExitCode::from(exit::DATA);
            }
            ExitCode::from(out.code)
        }
        Err(e) => {
            if json {
                let doc = serde_json::json!({ "error": e.message, "exit_code": e.code });
                let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&doc).unwrap_or_default());
            }
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
