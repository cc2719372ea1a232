//! Command-line driver for `mgll-core`.
//!
//! Every run produces a [`RunReport`] whose `config` field is the parsed
//! invocation itself, so `mgll replay --report FILE` can execute it again and
//! check that the results match bit for bit.

pub mod args;
pub mod commands;
pub mod error;
pub mod report;

use std::ffi::OsString;
use std::io::Write;
use std::time::Instant;

use clap::Parser;

pub use args::Cli;
pub use commands::{execute, Outcome};
pub use error::{CliError, EXIT_DOMAIN, EXIT_OK, EXIT_USAGE};
pub use report::RunReport;

use args::OutputFormat;

fn init_logging() {
    let env = env_logger::Env::new().filter_or("MGLL_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

/// Runs a parsed invocation and writes its report.
pub fn run_cli(cli: &Cli) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let outcome = execute(cli, None)?;
    let report = RunReport {
        command: commands::command_name(&cli.command).to_string(),
        version: mgll_core::VERSION.to_string(),
        config: cli.clone(),
        results: outcome.results,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&report).expect("reports serialize");
    if let Some(path) = &cli.global.out {
        std::fs::write(path, format!("{json}\n")).map_err(CliError::io(path))?;
    }
    let mut stdout = std::io::stdout().lock();
    let printed = match cli.global.format {
        OutputFormat::Text => stdout.write_all(outcome.text.as_bytes()),
        OutputFormat::Json if cli.global.out.is_none() => writeln!(stdout, "{json}"),
        OutputFormat::Json => Ok(()),
    };
    printed.map_err(CliError::io("<stdout>"))?;
    Ok(report)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging();
    match run_cli(&cli) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
