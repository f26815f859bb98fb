//! Command-line plumbing around `pcrpo-core`: run configuration, multi-seed
//! training with CSV/JSON artifacts, sweeps and the verification suites.
//!
//! Exit codes: 0 success, 1 failed assertion or runtime error, 2 usage or
//! configuration error.

use std::path::PathBuf;

use pcrpo_core::cmdp::CmdpError;
use pcrpo_core::evaluation::EvalError;
use pcrpo_core::trainer::TrainError;
use thiserror::Error;

pub mod config;
pub mod output;
pub mod run;
pub mod sweep;
pub mod verify;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read {}: {source}", path.display())]
    ReadFile { path: PathBuf, source: std::io::Error },
    #[error("config error ({origin}): {message}")]
    Config { origin: String, message: String },
    #[error("cannot write {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("assertion failed: {0}")]
    Assertion(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn config(origin: impl Into<String>, message: impl Into<String>) -> Self {
        HarnessError::Config { origin: origin.into(), message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::ReadFile { .. } | HarnessError::Config { .. } => 2,
            HarnessError::Train(TrainError::InvalidConfig(_) | TrainError::InvalidSlack(_)) => 2,
            // Specs are user input: a malformed document is a config problem.
            HarnessError::Cmdp(CmdpError::Invalid(_) | CmdpError::Parse(_) | CmdpError::BadGeometry(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
