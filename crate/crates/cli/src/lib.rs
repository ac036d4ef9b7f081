//! Command implementations behind the `avcl` binary.
//!
//! Each command writes `key=value` lines to the given sink, the last one
//! being the machine-readable result; errors carry the process exit code.

mod commands;
mod config;

pub use commands::{ablate, gradcheck, load_data, probe, run, spectrogram, train, AblateArgs, Cli, Command, CommonArgs, GradcheckArgs, ProbeArgs, SpectrogramArgs, TrainArgs};
pub use config::{AblationConfig, CorpusSource, Paths, RunConfig};

use avcl_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_AUDIO: i32 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Maps library errors onto the stable exit codes.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Manifest { .. } => EXIT_CONFIG,
        Error::NumericAbort { .. } | Error::Degenerate { .. } | Error::Domain { .. } => EXIT_NUMERIC,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::AudioDecode { .. } | Error::UnsupportedFormat(_) => EXIT_AUDIO,
        Error::Dimension { .. } | Error::Contract(_) | Error::Io { .. } => EXIT_FAILURE,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::new(exit_code(&e), e.to_string())
    }
}

/// Caps the global worker pool from `AVCL_THREADS`, if set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("AVCL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("AVCL_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::new(EXIT_FAILURE, format!("cannot size thread pool: {e}")))
}
