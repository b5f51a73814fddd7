use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::audit::{audit, AuditReport};
use super::scenario::{Event, Scenario};
use super::HarnessError;
use crate::he::{BackendKind, HeBackend, SecretKey};
use crate::identity::{AuthoritySnapshot, RepHandle};
use crate::protocol::{
    EntityId, EventLog, EventOutcome, OutcomeStatus, Payload, QueryResult, SessionStatus, System,
    SystemConfig, TranscryptRequest,
};
use crate::reputation::{bootstrap_reputation, finalize_score, ReputationState, SystemProfile};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
    /// Overrides `he_params.backend_kind`.
    pub backend: Option<BackendKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub handle: RepHandle,
    pub version: u64,
    /// `None` when the state cannot be finalized.
    pub score: Option<Vec<f64>>,
}

/// Trust assumptions the run relied on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustFlags {
    /// The key manager saw voter weights in the clear while transcrypting.
    pub transcryption_exposure: bool,
    /// Registration, pseudonym and ticket issuance ran in one authority.
    pub merged_authority: bool,
    /// Unlinkability checks are structural, not cryptographic.
    pub structural_unlinkability: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub backend: BackendKind,
    pub scenario_digest: String,
    pub scores: BTreeMap<String, ScoreEntry>,
    pub message_counts: BTreeMap<EntityId, u64>,
    pub outcomes: Vec<EventOutcome>,
    pub audit: AuditReport,
    pub flags: TrustFlags,
}

impl Report {
    /// Assembles everything but the scores from the log.
    pub(crate) fn from_log(log: &EventLog, scores: BTreeMap<String, ScoreEntry>) -> Result<Report, HarnessError> {
        let h = log.header()?;
        let audit = audit(log, None)?;
        let transcrypted = log.messages().any(|(_, _, m)| {
            matches!(
                &m.payload,
                Payload::TranscryptRequest {
                    request: TranscryptRequest::Transcrypt { .. }
                }
            )
        });
        let outcomes = log
            .lines
            .iter()
            .filter_map(|l| match l {
                crate::protocol::LogLine::Outcome { outcome, .. } => Some(outcome.clone()),
                _ => None,
            })
            .collect();
        Ok(Report {
            seed: h.seed,
            backend: h.backend,
            scenario_digest: h.scenario_digest.clone(),
            scores,
            message_counts: log.message_counts(),
            outcomes,
            audit,
            flags: TrustFlags {
                transcryption_exposure: transcrypted,
                merged_authority: true,
                structural_unlinkability: true,
            },
        })
    }

    pub fn has_findings(&self) -> bool {
        !self.audit.findings.is_empty()
    }
}

/// Output of one scenario run.
pub struct RunOutput {
    pub report: Report,
    pub log: EventLog,
    pub authority: AuthoritySnapshot,
}

pub(crate) fn score_entry(
    be: &dyn HeBackend<f64>,
    profile: &SystemProfile,
    dims: usize,
    handle: &RepHandle,
    state: Option<(&ReputationState, &SecretKey)>,
) -> ScoreEntry {
    match state {
        Some((st, sk)) if st.version > 0 => ScoreEntry {
            handle: handle.clone(),
            version: st.version,
            score: finalize_score(be, st, sk).ok().map(|v| v.dims),
        },
        _ => ScoreEntry {
            handle: handle.clone(),
            version: 0,
            score: Some(bootstrap_reputation::<f64>(profile, dims).0.dims),
        },
    }
}

fn outcome(kind: &str, status: OutcomeStatus, detail: Option<String>) -> EventOutcome {
    EventOutcome {
        kind: kind.to_string(),
        status,
        detail,
        answer: None,
        version: None,
    }
}

fn rate_outcome(statuses: &[SessionStatus]) -> EventOutcome {
    let mut o = outcome("rate", OutcomeStatus::Rejected, None);
    let mut details = Vec::new();
    for s in statuses {
        match s {
            SessionStatus::Accepted { version } => {
                if o.version.is_none() {
                    o.version = Some(*version);
                    o.status = OutcomeStatus::Ok;
                }
                details.push(format!("accepted at version {version}"));
            }
            SessionStatus::Rejected { reason } => details.push(format!("rejected: {reason}")),
            SessionStatus::Failed { reason } => details.push(format!("failed: {reason}")),
            SessionStatus::InProgress => details.push("in progress".into()),
        }
    }
    o.detail = Some(details.join("; "));
    o
}

fn query_outcome(r: &QueryResult) -> EventOutcome {
    match r {
        QueryResult::Threshold { passed, version } => EventOutcome {
            answer: Some(*passed),
            version: Some(*version),
            ..outcome("query", OutcomeStatus::Ok, None)
        },
        QueryResult::Encrypted { version, .. } => EventOutcome {
            version: Some(*version),
            ..outcome("query", OutcomeStatus::Ok, Some("encrypted".into()))
        },
        QueryResult::Error(e) => outcome("query", OutcomeStatus::Error, Some(e.clone())),
    }
}

/// Executes every event in order. Protocol errors become outcome entries.
pub fn run(s: &Scenario, opts: &RunOptions) -> Result<RunOutput, HarnessError> {
    s.validate()?;
    let mut he_params = s.he_params;
    if let Some(b) = opts.backend {
        he_params.backend_kind = b;
    }
    let mut sys = System::new(SystemConfig {
        seed: opts.seed.unwrap_or(s.seed),
        he_params,
        profile: s.system_profile,
        dims: s.dims,
        engine_count: s.engine_count,
        engine_policy: s.engine_policy,
        authority: s.authority,
    })?;
    for b in &s.businesses {
        sys.register(&b.name, &b.jurisdiction, b.self_rating.as_deref(), b.verified)?;
    }
    sys.begin_log(&s.digest());
    for (i, e) in s.events.iter().enumerate() {
        sys.begin_event(i);
        let kind = e.kind();
        let o = match e {
            Event::Contract { a, b, metadata } => match sys.contract(a, b, metadata) {
                Ok(()) => outcome(kind, OutcomeStatus::Ok, None),
                Err(e) => outcome(kind, OutcomeStatus::Error, Some(e.to_string())),
            },
            Event::Rate { .. } => match sys.rate(&e.rate_request().expect("rate event")) {
                Ok(st) => rate_outcome(&st),
                Err(e) => outcome(kind, OutcomeStatus::Error, Some(e.to_string())),
            },
            Event::Query { requester, votee, mode } => match sys.query(requester, votee, *mode) {
                Ok(r) => query_outcome(&r),
                Err(e) => outcome(kind, OutcomeStatus::Error, Some(e.to_string())),
            },
            Event::AdvanceEpoch { count } => {
                for _ in 0..*count {
                    sys.advance_epoch();
                }
                outcome(kind, OutcomeStatus::Ok, None)
            }
            Event::Depart { business } => match sys.depart(business) {
                Ok(()) => outcome(kind, OutcomeStatus::Ok, None),
                Err(e) => outcome(kind, OutcomeStatus::Error, Some(e.to_string())),
            },
        };
        sys.record_outcome(o);
    }
    let log = sys.finish_log();
    let scores = live_scores(&sys, s);
    let report = Report::from_log(&log, scores)?;
    Ok(RunOutput {
        report,
        log,
        authority: sys.authority().snapshot(),
    })
}

fn live_scores(sys: &System, s: &Scenario) -> BTreeMap<String, ScoreEntry> {
    let be = sys.backend();
    let mut out = BTreeMap::new();
    for b in &s.businesses {
        let rep = sys.rep_of(&b.name).expect("registered").clone();
        let st = sys.reputation_manager().state(be, &rep);
        let sk = sys.key_manager().key_material(&rep).map(|k| &k.secret_key);
        let pair = match (&st, sk) {
            (Some(st), Some(sk)) => Some((st, sk)),
            _ => None,
        };
        out.insert(b.name.clone(), score_entry(be, &s.system_profile, s.dims, &rep, pair));
    }
    out
}
