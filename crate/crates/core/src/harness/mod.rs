//! Scenario runner, auditor and replay.

mod audit;
mod replay;
mod run;
mod scenario;

use thiserror::Error;

use crate::he::HeError;
use crate::identity::IdentityError;
use crate::protocol::{LogError, ProtocolError};

pub use audit::{audit, AuditReport, CheckResult, Finding};
pub use replay::replay;
pub use run::{run, Report, RunOptions, RunOutput, ScoreEntry, TrustFlags};
pub use scenario::{load_scenario, parse_scenario, BusinessSpec, Event, Scenario};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("{0}")]
    Io(String),
    #[error("{path}: {message} (line {line}, column {column})")]
    Schema {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("events[{event}].{field}: unknown business {name:?}")]
    UnknownBusiness { event: usize, field: String, name: String },
    #[error("events[{event}]: rating without a prior contract between voter and votee")]
    DanglingRating { event: usize },
    #[error("log and scenario disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

impl From<HeError> for HarnessError {
    fn from(e: HeError) -> Self {
        HarnessError::Protocol(e.into())
    }
}

impl From<IdentityError> for HarnessError {
    fn from(e: IdentityError) -> Self {
        HarnessError::Protocol(e.into())
    }
}
