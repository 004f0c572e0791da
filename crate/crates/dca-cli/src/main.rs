//! `dca` — command-line front end for the dca-metric toolkit.
//!
//! Settings resolve as flag, else `--config` file entry, else default; the
//! fully resolved configuration is embedded in every artifact (as `#` lines
//! in CSVs, as a `.meta` sidecar next to binary files). Log verbosity is
//! controlled by the `RUST_LOG` environment variable.
//!
//! Exit codes: 0 on success, 1 for anything the invoker can fix
//! (configuration, I/O, validation, numerics), 2 for a broken internal
//! invariant.

mod commands;
mod config;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::{CliError, FileConfig};

#[derive(Parser, Debug)]
#[command(
    name = "dca",
    version,
    about = "Train and evaluate distribution-context-aware embedding metrics"
)]
struct Cli {
    /// Flat `key = value` configuration file; flags override its entries
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic clustered dataset
    Synth(commands::SynthArgs),
    /// Train an embedder; writes a checkpoint and a loss-history CSV
    Train(commands::TrainArgs),
    /// Score retrieval of a trained model; writes a report CSV
    Eval(commands::EvalArgs),
    /// Score retrieval with context re-ranking; writes a report CSV
    Rerank(commands::RerankArgs),
    /// Validate analytic gradients against finite differences
    Gradcheck(commands::GradcheckArgs),
    /// Train every loss variant at several margins on one synthetic dataset
    Compare(commands::CompareArgs),
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Synth(args) => commands::cmd_synth(&file, args),
        Command::Train(args) => commands::cmd_train(&file, args),
        Command::Eval(args) => commands::cmd_eval(&file, args),
        Command::Rerank(args) => commands::cmd_rerank(&file, args),
        Command::Gradcheck(args) => commands::cmd_gradcheck(&file, args),
        Command::Compare(args) => commands::cmd_compare(&file, args),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err)
            if matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) =>
        {
            let _ = err.print();
            return ExitCode::SUCCESS;
        }
        Err(err) => {
            // Keep the diagnostic to one line; clap's first line carries it.
            let rendered = err.render().to_string();
            let first = rendered
                .lines()
                .find(|line| !line.trim().is_empty())
                .unwrap_or("error: invalid arguments");
            eprintln!("{first}");
            return ExitCode::from(1);
        }
    };

    // A panic past argument parsing is a broken invariant inside the
    // toolkit, not a user mistake: report one line and exit distinctly.
    std::panic::set_hook(Box::new(|_| {}));
    match catch_unwind(AssertUnwindSafe(|| dispatch(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CliError::User(message))) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Ok(Err(CliError::Internal(message))) => {
            eprintln!("internal error: {message}");
            ExitCode::from(2)
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unexpected panic".to_owned());
            // A print dying because the consumer closed stdout (`dca ... |
            // head`) is their choice, not a broken invariant; artifacts are
            // always written before the prints, so finish quietly.
            if message.contains("failed printing") {
                return ExitCode::SUCCESS;
            }
            eprintln!("internal error: {message}");
            ExitCode::from(2)
        }
    }
}
