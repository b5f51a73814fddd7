use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EntityId, Message, OpKind};
use crate::he::{BackendKind, HeParams};
use crate::identity::{AuthorityConfig, RepHandle};
use crate::reputation::SystemProfile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub seed: u64,
    pub backend: BackendKind,
    pub he_params: HeParams,
    pub profile: SystemProfile,
    pub dims: usize,
    pub authority_config: AuthorityConfig,
    pub authority_key: String,
    pub engine_keys: BTreeMap<EntityId, String>,
    /// Public directory of business names to reputation handles.
    pub directory: BTreeMap<String, RepHandle>,
    pub scenario_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Ok,
    Rejected,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub kind: String,
    pub status: OutcomeStatus,
    pub detail: Option<String>,
    pub answer: Option<bool>,
    pub version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Header(Box<Header>),
    Message {
        seq: u64,
        tick: u64,
        event: usize,
        message: Message,
    },
    /// Delivery to a departed business.
    Dropped {
        seq: u64,
        tick: u64,
        event: usize,
        message: Message,
    },
    Op {
        seq: u64,
        tick: u64,
        event: usize,
        entity: EntityId,
        op: OpKind,
        bootstrap: bool,
    },
    Fault {
        seq: u64,
        tick: u64,
        event: usize,
        entity: EntityId,
        error: String,
    },
    Outcome {
        seq: u64,
        tick: u64,
        event: usize,
        outcome: EventOutcome,
    },
    Footer {
        seq: u64,
        lines: u64,
    },
}

impl LogLine {
    pub fn seq(&self) -> u64 {
        match self {
            LogLine::Header(_) => 0,
            LogLine::Message { seq, .. }
            | LogLine::Dropped { seq, .. }
            | LogLine::Op { seq, .. }
            | LogLine::Fault { seq, .. }
            | LogLine::Outcome { seq, .. }
            | LogLine::Footer { seq, .. } => *seq,
        }
    }

    pub fn tick(&self) -> Option<u64> {
        match self {
            LogLine::Message { tick, .. }
            | LogLine::Dropped { tick, .. }
            | LogLine::Op { tick, .. }
            | LogLine::Fault { tick, .. }
            | LogLine::Outcome { tick, .. } => Some(*tick),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("log does not start with a header")]
    MissingHeader,
    #[error("sequence gap: expected {expected}, found {found}")]
    GapDetected { expected: u64, found: u64 },
    #[error("order violation at seq {seq}: {reason}")]
    OrderViolation { seq: u64, reason: String },
    #[error("log is truncated: {0}")]
    Truncated(String),
}

/// Append-only JSON-lines event log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub lines: Vec<LogLine>,
}

impl EventLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&serde_json::to_string(l).expect("log lines serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses without structural validation; see [`EventLog::validate`].
    pub fn from_jsonl(text: &str) -> Result<Self, LogError> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line = serde_json::from_str(raw).map_err(|e| LogError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            lines.push(line);
        }
        Ok(EventLog { lines })
    }

    pub fn header(&self) -> Result<&Header, LogError> {
        match self.lines.first() {
            Some(LogLine::Header(h)) => Ok(h),
            _ => Err(LogError::MissingHeader),
        }
    }

    pub fn messages(&self) -> impl Iterator<Item = (u64, usize, &Message)> {
        self.lines.iter().filter_map(|l| match l {
            LogLine::Message { seq, event, message, .. } => Some((*seq, *event, message)),
            _ => None,
        })
    }

    pub fn message_at(&self, seq: u64) -> Option<&Message> {
        self.messages().find(|(s, _, _)| *s == seq).map(|(_, _, m)| m)
    }

    /// Checks header, sequence completeness and order, tick monotonicity,
    /// per-correlator step order and the footer count.
    pub fn validate(&self) -> Result<(), LogError> {
        self.header()?;
        let seqs: Vec<u64> = self.lines.iter().map(LogLine::seq).collect();
        let mut sorted = seqs.clone();
        sorted.sort_unstable();
        for (i, s) in sorted.iter().enumerate() {
            if *s != i as u64 {
                return Err(LogError::GapDetected {
                    expected: i as u64,
                    found: *s,
                });
            }
        }
        for w in seqs.windows(2) {
            if w[1] < w[0] {
                return Err(LogError::OrderViolation {
                    seq: w[1],
                    reason: format!("appears after seq {}", w[0]),
                });
            }
        }
        let mut last_tick = 0;
        for l in &self.lines {
            if let Some(t) = l.tick() {
                if t < last_tick {
                    return Err(LogError::OrderViolation {
                        seq: l.seq(),
                        reason: "logical time went backwards".into(),
                    });
                }
                last_tick = t;
            }
        }
        let mut rank: BTreeMap<&str, u8> = BTreeMap::new();
        for (seq, _, m) in self.messages() {
            let r = m.payload.stage_rank(&m.receiver);
            let prev = rank.entry(m.correlator.as_str()).or_insert(r);
            if r < *prev {
                return Err(LogError::OrderViolation {
                    seq,
                    reason: format!("{} out of step order", m.payload.name()),
                });
            }
            *prev = r;
        }
        match self.lines.last() {
            Some(LogLine::Footer { lines, .. }) if *lines == self.lines.len() as u64 => Ok(()),
            Some(LogLine::Footer { lines, .. }) => Err(LogError::Truncated(format!(
                "footer counts {lines} lines, log has {}",
                self.lines.len()
            ))),
            _ => Err(LogError::Truncated("missing footer".into())),
        }
    }

    /// Counts non-bootstrap operations attributed to `event`.
    pub fn op_counts(&self, event: usize) -> BTreeMap<OpKind, u64> {
        let mut out = BTreeMap::new();
        for l in &self.lines {
            if let LogLine::Op {
                event: e,
                op,
                bootstrap: false,
                ..
            } = l
            {
                if *e == event {
                    *out.entry(*op).or_insert(0) += 1;
                }
            }
        }
        out
    }

    /// Messages sent or received per entity; business pseudonyms are
    /// reported individually.
    pub fn message_counts(&self) -> BTreeMap<EntityId, u64> {
        let mut out = BTreeMap::new();
        for (_, _, m) in self.messages() {
            *out.entry(m.sender.clone()).or_insert(0) += 1;
            *out.entry(m.receiver.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn events(&self) -> BTreeSet<usize> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                LogLine::Outcome { event, .. } => Some(*event),
                _ => None,
            })
            .collect()
    }
}
