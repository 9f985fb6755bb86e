//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation or data error, 2 transport error
//! while talking to the annotation server, 64 usage error.

mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use slidesampler_core::sync::SyncError;

const EXIT_VALIDATION: u8 = 1;
const EXIT_TRANSPORT: u8 = 2;
const EXIT_USAGE: u8 = 64;

fn main() -> ExitCode {
    let cli = match commands::Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap routes help and version to stdout, real errors to stderr.
            let _ = err.print();
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            return ExitCode::from(code);
        }
    };

    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Server-side failures get their own exit code so callers can tell a flaky
/// network from bad inputs; everything else counts as validation.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(sync) = cause.downcast_ref::<SyncError>() {
            return match sync {
                SyncError::Transport { .. }
                | SyncError::Auth { .. }
                | SyncError::PartialUpload { .. } => EXIT_TRANSPORT,
                _ => EXIT_VALIDATION,
            };
        }
    }
    EXIT_VALIDATION
}
