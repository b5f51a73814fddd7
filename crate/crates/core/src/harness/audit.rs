use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::identity::{AuthoritySnapshot, BusinessId};
use crate::protocol::{
    detect_evidence, EntityId, Evidence, EvidenceKind, EventLog, LogError, Message, Payload, RepTarget, Role,
};

/// Numeric fields that may carry fractions without being plaintext data.
const FRACTIONAL_WHITELIST: [&str; 2] = ["error_bound", "threshold"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Sequence numbers of offending log lines.
    pub witnesses: Vec<u64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub check: String,
    pub evidence: Option<EvidenceKind>,
    pub messages: Vec<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks: Vec<CheckResult>,
    pub evidence: Vec<Evidence>,
    pub findings: Vec<Finding>,
}

impl AuditReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn check(name: &str, witnesses: Vec<u64>, note: &str) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: witnesses.is_empty(),
        witnesses,
        note: note.to_string(),
    }
}

fn text(m: &Message) -> String {
    serde_json::to_string(m).expect("message serializes")
}

fn identity_containment(log: &EventLog) -> CheckResult {
    let w = log
        .messages()
        .filter(|(_, _, m)| text(m).contains(BusinessId::PREFIX))
        .map(|(s, _, _)| s)
        .collect();
    check(
        "identity_containment",
        w,
        "no message carries a registration identity",
    )
}

fn fractional_numbers(v: &Value, key: Option<&str>, hits: &mut Vec<String>) {
    match v {
        Value::Number(n) => {
            let whitelisted = key.is_some_and(|k| FRACTIONAL_WHITELIST.contains(&k));
            if !n.is_u64() && !n.is_i64() && !whitelisted {
                hits.push(format!("{}={n}", key.unwrap_or("?")));
            }
        }
        Value::Array(a) => a.iter().for_each(|x| fractional_numbers(x, key, hits)),
        Value::Object(o) => o.iter().for_each(|(k, x)| fractional_numbers(x, Some(k), hits)),
        _ => {}
    }
}

fn plaintext_absence(log: &EventLog) -> CheckResult {
    let mut w = Vec::new();
    for (seq, _, m) in log.messages() {
        if !matches!(m.receiver.role(), Role::ReputationManager | Role::Engine) {
            continue;
        }
        let mut hits = Vec::new();
        fractional_numbers(&serde_json::to_value(&m.payload).expect("payload serializes"), None, &mut hits);
        if !hits.is_empty() {
            w.push(seq);
        }
    }
    check(
        "plaintext_absence",
        w,
        "manager and engines receive no fractional values outside ciphertext metadata",
    )
}

/// Within every manager-facing exchange the voter-linked token and the
/// votee handle never meet.
fn session_linkage(log: &EventLog) -> CheckResult {
    let mut by_corr: BTreeMap<&str, (Option<u64>, Option<u64>)> = BTreeMap::new();
    let mut w = BTreeSet::new();
    for (seq, _, m) in log.messages() {
        if m.receiver.role() != Role::ReputationManager {
            continue;
        }
        let (token, votee) = match &m.payload {
            Payload::RepRequest {
                target: RepTarget::Token(_),
            } => {
                if m.sender.role() != Role::Engine {
                    w.insert(seq);
                }
                (true, false)
            }
            Payload::RepRequest {
                target: RepTarget::Votee(_),
            }
            | Payload::SignedRating(_)
            | Payload::QueryRequest { .. } => (false, true),
            _ => (false, false),
        };
        let t = text(m);
        if t.contains("\"tok:") && (votee || t.contains("\"rep:")) {
            w.insert(seq);
        }
        let e = by_corr.entry(m.correlator.as_str()).or_default();
        if token {
            e.0.get_or_insert(seq);
        }
        if votee {
            e.1.get_or_insert(seq);
        }
        if let (Some(a), Some(b)) = *e {
            w.insert(a.max(b));
        }
    }
    check(
        "session_linkage",
        w.into_iter().collect(),
        "token redemption and votee lookup travel in separate exchanges",
    )
}

/// Distinct votes never share ciphertext bytes. A resubmission of the same
/// token is one vote.
fn vote_distinctness(log: &EventLog) -> CheckResult {
    let mut seen: BTreeMap<Vec<u8>, (u64, String)> = BTreeMap::new();
    let mut w = Vec::new();
    for (seq, _, m) in log.messages() {
        if let Payload::RatingSubmission(sub) = &m.payload {
            match seen.get(&sub.rating.payload) {
                Some((_, tok)) if *tok != sub.token.0 => w.push(seq),
                Some(_) => {}
                None => {
                    seen.insert(sub.rating.payload.clone(), (seq, sub.token.0.clone()));
                }
            }
        }
    }
    check(
        "vote_distinctness",
        w,
        "distinct votes, including equal ones, have distinct ciphertexts",
    )
}

fn evidence_check(name: &str, evidence: &[Evidence], kinds: &[EvidenceKind], note: &str) -> CheckResult {
    let w = evidence
        .iter()
        .filter(|e| kinds.contains(&e.kind))
        .flat_map(|e| e.messages.last().copied())
        .collect();
    check(name, w, note)
}

/// Pseudonyms of one business never meet in a message.
fn pseudonym_unlinkability(log: &EventLog, secrets: &AuthoritySnapshot) -> CheckResult {
    let mut w = Vec::new();
    for (seq, _, m) in log.messages() {
        let t = text(m);
        let mut owners: BTreeMap<&BusinessId, BTreeSet<String>> = BTreeMap::new();
        for h in handles(&t) {
            if let Some(b) = secrets.owner_of(&h) {
                owners.entry(b).or_default().insert(h);
            }
        }
        if owners.values().any(|hs| hs.len() > 1) {
            w.push(seq);
        }
    }
    check(
        "pseudonym_unlinkability",
        w,
        "no message names two handles of the same business",
    )
}

fn handles(t: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for prefix in ["psn:", "rep:"] {
        for (i, _) in t.match_indices(prefix) {
            let rest = &t[i + prefix.len()..];
            let n = rest.bytes().take_while(u8::is_ascii_hexdigit).count();
            out.insert(t[i..i + prefix.len() + n].to_string());
        }
    }
    out
}

/// Every nullifier the manager saw belongs to exactly one issued ticket,
/// for the votee it names.
fn ticket_bijection(log: &EventLog, secrets: &AuthoritySnapshot) -> CheckResult {
    let by_nullifier: BTreeMap<&str, _> = secrets
        .secret
        .tickets
        .values()
        .map(|t| (t.nullifier.as_str(), &t.ticket))
        .collect();
    let mut w = Vec::new();
    for (seq, _, m) in log.messages() {
        if let Payload::SignedRating(sr) = &m.payload {
            if m.receiver != EntityId::reputation_manager() {
                continue;
            }
            match by_nullifier.get(sr.tuple.nullifier.as_str()) {
                Some(t) if t.votee == sr.tuple.votee => {}
                _ => w.push(seq),
            }
        }
    }
    let mut c = check("ticket_bijection", w, "each nullifier maps to one issued ticket for its votee");
    if by_nullifier.len() != secrets.secret.tickets.len() {
        c.passed = false;
        c.note = "nullifier collision among issued tickets".into();
    }
    c
}

/// Audits a complete log. Fails only on structural problems that make the
/// log unreadable; everything else is a finding.
pub fn audit(log: &EventLog, secrets: Option<&AuthoritySnapshot>) -> Result<AuditReport, HarnessError> {
    let integrity = match log.validate() {
        Ok(()) => check("log_integrity", Vec::new(), "sequence, ticks and session order are consistent"),
        Err(LogError::Truncated(_)) | Err(LogError::MissingHeader) => {
            return Err(HarnessError::Log(log.validate().unwrap_err()))
        }
        Err(e) => {
            let seq = match &e {
                LogError::GapDetected { found, .. } => *found,
                LogError::OrderViolation { seq, .. } => *seq,
                LogError::Parse { line, .. } => *line as u64,
                _ => 0,
            };
            let mut c = check("log_integrity", vec![seq], &e.to_string());
            c.passed = false;
            c
        }
    };
    let evidence = detect_evidence(log)?;
    let mut checks = vec![
        integrity,
        identity_containment(log),
        plaintext_absence(log),
        session_linkage(log),
        evidence_check(
            "one_time_use",
            &evidence,
            &[EvidenceKind::ReplayedToken, EvidenceKind::ReplayedTicket],
            "tokens and tickets are consumed once",
        ),
        evidence_check(
            "signature_validity",
            &evidence,
            &[
                EvidenceKind::BadSignature,
                EvidenceKind::TamperedUpdate,
                EvidenceKind::DepthViolation,
            ],
            "every signed rating verifies and matches its ciphertexts",
        ),
        vote_distinctness(log),
    ];
    if let Some(s) = secrets {
        checks.push(pseudonym_unlinkability(log, s));
        checks.push(ticket_bijection(log, s));
    }
    let mut findings = Vec::new();
    for c in &checks {
        if c.name == "one_time_use" || c.name == "signature_validity" {
            continue;
        }
        if !c.passed && c.witnesses.is_empty() {
            findings.push(Finding {
                check: c.name.clone(),
                evidence: None,
                messages: Vec::new(),
                detail: c.note.clone(),
            });
        }
        for &seq in &c.witnesses {
            findings.push(Finding {
                check: c.name.clone(),
                evidence: None,
                messages: vec![seq],
                detail: c.note.clone(),
            });
        }
    }
    for e in &evidence {
        findings.push(Finding {
            check: "evidence".into(),
            evidence: Some(e.kind),
            messages: e.messages.clone(),
            detail: e.note.clone(),
        });
    }
    Ok(AuditReport {
        checks,
        evidence,
        findings,
    })
}
