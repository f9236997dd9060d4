//! `atelier`: run the render service, preprocess captures offline, or
//! submit jobs to a running service.
//!
//! Exit codes: 0 success, 1 unexpected I/O failure, 2 bad arguments or
//! configuration, 3 cannot bind the listen address, 4 unreadable or
//! invalid image, 5 server unreachable, 6 job rejected (422) or ended
//! failed/canceled.

mod config;
mod preprocess;
mod serve;
mod submit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::BackendKind;

#[derive(Parser)]
#[command(name = "atelier", version, about = "Diffusion render service for CAD captures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve {
        /// JSON config file; defaults to $ATELIER_CONFIG, then built-ins.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
        #[arg(long)]
        port: Option<u16>,
        /// Store directory, overriding the config file.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        a1111_url: Option<String>,
    },
    /// Write edge.png (and depth.png) for a capture.
    Preprocess(preprocess::Args),
    /// Upload a capture and submit a generation job.
    Submit(Box<submit::Args>),
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

pub const EXIT_IO: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_BIND: u8 = 3;
pub const EXIT_IMAGE: u8 = 4;
pub const EXIT_UNREACHABLE: u8 = 5;
pub const EXIT_JOB: u8 = 6;

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Serve {
            config,
            backend,
            port,
            store,
            a1111_url,
        } => serve::run(serve::Overrides {
            config,
            backend,
            port,
            store,
            a1111_url,
        }),
        Command::Preprocess(args) => preprocess::run(args),
        Command::Submit(args) => submit::run(*args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
