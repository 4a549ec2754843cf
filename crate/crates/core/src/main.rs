use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use espbench::harness::{self, HarnessError, RunConfig};
use espbench::validator;

/// Desk-scale enterprise stream processing benchmark.
#[derive(Debug, Parser)]
#[command(name = "espbench", version)]
struct Cli {
    /// Configuration file with `key = value` lines.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set input_rate=10000`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Replace artifacts of an earlier invocation.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate business data and input streams.
    Generate,
    /// Stream the inputs through the engine.
    Run,
    /// Check results and compute latencies of a finished run.
    Validate {
        /// Run directory; defaults to `output_dir/run_id`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Print the validation summary of a run.
    Report {
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Generate, run, validate and report.
    All,
}

fn load(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<i32, HarnessError> {
    let cfg = load(cli)?;
    let dir = |given: &Option<PathBuf>| given.clone().unwrap_or_else(|| cfg.run_dir());
    match &cli.command {
        Command::Generate => {
            let dir = harness::cmd_generate(&cfg, cli.force)?;
            println!("generated {}", dir.0.display());
            Ok(0)
        }
        Command::Run => {
            let outcome = harness::cmd_run(&cfg, cli.force)?;
            println!("{}", outcome.sender.to_json_line());
            Ok(0)
        }
        Command::Validate { run_dir } => {
            let report = harness::cmd_validate(&dir(run_dir), cli.force)?;
            print!("{}", validator::render_text(&report));
            Ok(harness::verdict_code(&report))
        }
        Command::Report { run_dir } => {
            print!("{}", harness::cmd_report(&dir(run_dir))?);
            Ok(0)
        }
        Command::All => {
            let (report, outcome) = harness::cmd_all(&cfg, cli.force)?;
            println!("{}", outcome.sender.to_json_line());
            print!("{}", validator::render_text(&report));
            Ok(harness::verdict_code(&report))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
