//! `lograd` command-line harness: projection timing, subspace quality,
//! toy training, rank ablation and memory accounting, written as CSV or JSON.

pub mod commands;
pub mod config;
pub mod error;
pub mod table;
pub mod timing;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use clap::Parser;

pub use commands::{run, Outcome};
pub use config::{Command, OutputFormat, RunConfig};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "lograd",
    version,
    about = "Low-rank gradient projection benchmarks"
)]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML file of flat dotted keys.
    #[arg(long)]
    pub config: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<OutputFormat>,
    /// Overrides `seeds`.
    #[arg(long = "seed", num_args = 1..)]
    pub seeds: Vec<u64>,
    /// Overrides `ranks`.
    #[arg(long = "rank", num_args = 1..)]
    pub ranks: Vec<usize>,
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(cli.command, &cli.config)?;
    if let Some(f) = cli.format {
        cfg.output.format = f;
    }
    if let Some(p) = &cli.out {
        cfg.output.path = Some(p.display().to_string());
    }
    if !cli.seeds.is_empty() {
        cfg.seeds = cli.seeds.clone();
    }
    if !cli.ranks.is_empty() {
        cfg.ranks = cli.ranks.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    let outcome = run(&cfg)?;
    match &cfg.output.path {
        Some(p) => {
            let f =
                File::create(p).map_err(|e| CliError::Output(format!("cannot create {p}: {e}")))?;
            let mut w = BufWriter::new(f);
            outcome.table.write(&cfg, cfg.output.format, &mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            outcome.table.write(&cfg, cfg.output.format, &mut w)?;
            w.flush()?;
        }
    }
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Parse `args`, run, and return the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("lograd: {e}");
            e.exit_code()
        }
    }
}
