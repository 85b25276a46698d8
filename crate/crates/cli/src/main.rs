//! `gear`: build vocabularies, synthesize triples, train, index, search,
//! locate, generate and evaluate from the command line.

mod args;
mod commands;
mod config;

use std::process::ExitCode;
use std::time::Instant;

use clap::{CommandFactory, FromArgMatches};
use gear_core::{CheckpointError, GearError};

use args::Cli;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(GearError),
}

impl From<GearError> for CliError {
    fn from(e: GearError) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn core_exit_code(e: &GearError) -> u8 {
    match e {
        GearError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        GearError::Fingerprint { .. } | GearError::Checkpoint(CheckpointError::VocabMismatch { .. }) => 4,
        GearError::Item { source, .. } => core_exit_code(source),
        _ => 1,
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

/// Per-phase wall-clock, reported on stderr when enabled.
pub struct Timer {
    enabled: bool,
}

impl Timer {
    pub fn phase<T>(&self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        if self.enabled {
            eprintln!("time {name}: {:.3}s", t.elapsed().as_secs_f64());
        }
        out
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    if cli.global.lanes > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.global.lanes).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let (_, sub) = matches.subcommand().expect("a subcommand is required");
    let timer = Timer { enabled: cli.global.time };
    let started = Instant::now();
    let result = commands::run(&cli, sub, &timer);
    if timer.enabled() {
        eprintln!("time total: {:.3}s", started.elapsed().as_secs_f64());
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
