use std::collections::BTreeMap;

use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};

use super::log::{EventLog, LogError};
use super::{EntityId, Payload, RatingReceipt, RepTarget, Role, SignedRating};
use crate::crypto;
use crate::he::{payload_intact, KeyId};
use crate::identity::RepHandle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EvidenceKind {
    BadSignature,
    ReplayedToken,
    ReplayedTicket,
    TamperedUpdate,
    DepthViolation,
}

/// Misbehavior proof; `messages` are log sequence numbers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub kind: EvidenceKind,
    pub messages: Vec<u64>,
    pub note: String,
}

/// Signature check over a receipt's tuple.
pub fn verify_receipt(r: &RatingReceipt, engine_pub: &VerifyingKey) -> Result<(), Evidence> {
    if crypto::verify_canonical(engine_pub, &r.tuple, &r.signature) {
        Ok(())
    } else {
        Err(Evidence {
            kind: EvidenceKind::BadSignature,
            messages: Vec::new(),
            note: format!("receipt for session {} does not verify", r.session_id),
        })
    }
}

/// Stateless checks the reputation manager applies to a forwarded signed
/// rating, in order: ciphertext integrity, engine signature, authorization,
/// levels. Nullifier uniqueness is stateful and checked separately.
pub struct RmCheck<'a> {
    pub authority: &'a VerifyingKey,
    pub engines: &'a BTreeMap<EntityId, VerifyingKey>,
    pub depth_budget: u32,
}

impl RmCheck<'_> {
    pub fn signed_rating(
        &self,
        sr: &SignedRating,
        votee_key: &KeyId,
    ) -> Result<(), (EvidenceKind, String)> {
        let t = &sr.tuple;
        for (name, ct) in [("combined", &t.combined), ("weight", &t.weight)] {
            if &ct.key_id != votee_key || !payload_intact(ct) {
                return Err((EvidenceKind::TamperedUpdate, format!("{name} ciphertext fails integrity")));
            }
        }
        let engine_ok = self
            .engines
            .get(&sr.engine)
            .map(|vk| crypto::verify_canonical(vk, t, &sr.signature))
            .unwrap_or(false);
        let auth = &sr.authorization;
        let auth_ok = auth.signature_valid(self.authority)
            && auth.votee == t.votee
            && auth.nullifier == t.nullifier;
        if !engine_ok {
            return Err((EvidenceKind::BadSignature, format!("signature of {} does not verify", sr.engine)));
        }
        if !auth_ok {
            return Err((EvidenceKind::BadSignature, "session authorization does not verify".into()));
        }
        if t.combined.level + 1 != self.depth_budget || t.weight.level != self.depth_budget {
            return Err((
                EvidenceKind::DepthViolation,
                format!(
                    "levels (S={}, W={}) do not match one multiplication",
                    t.combined.level, t.weight.level
                ),
            ));
        }
        Ok(())
    }
}

struct LogIndex {
    authority: VerifyingKey,
    engines: BTreeMap<EntityId, VerifyingKey>,
    depth_budget: u32,
    votee_keys: BTreeMap<RepHandle, KeyId>,
}

impl LogIndex {
    fn build(log: &EventLog) -> Result<Self, LogError> {
        let h = log.header()?;
        let bad = |what: &str| LogError::Parse {
            line: 1,
            reason: format!("bad {what} key in header"),
        };
        let authority = crypto::verifying_key_from_hex(&h.authority_key).ok_or_else(|| bad("authority"))?;
        let mut engines = BTreeMap::new();
        for (id, k) in &h.engine_keys {
            engines.insert(id.clone(), crypto::verifying_key_from_hex(k).ok_or_else(|| bad("engine"))?);
        }
        let mut votee_keys = BTreeMap::new();
        for (_, _, m) in log.messages() {
            if let Payload::KeyResponse { votee, public_key } = &m.payload {
                votee_keys.insert(votee.clone(), public_key.key_id.clone());
            }
        }
        Ok(LogIndex {
            authority,
            engines,
            depth_budget: h.he_params.depth_budget,
            votee_keys,
        })
    }

    fn check(&self, sr: &SignedRating) -> Result<(), (EvidenceKind, String)> {
        let Some(key) = self.votee_keys.get(&sr.tuple.votee) else {
            return Err((EvidenceKind::TamperedUpdate, "votee has no key in the log".into()));
        };
        RmCheck {
            authority: &self.authority,
            engines: &self.engines,
            depth_budget: self.depth_budget,
        }
        .signed_rating(sr, key)
    }
}

fn to_manager(m: &super::Message) -> bool {
    m.receiver.role() == Role::ReputationManager
}

/// Re-derives all evidence from the log alone.
pub fn detect_evidence(log: &EventLog) -> Result<Vec<Evidence>, LogError> {
    let idx = LogIndex::build(log)?;
    let mut out = Vec::new();
    let mut tokens: BTreeMap<String, u64> = BTreeMap::new();
    let mut nullifiers: BTreeMap<String, u64> = BTreeMap::new();
    for (seq, _, m) in log.messages() {
        if !to_manager(m) {
            continue;
        }
        match &m.payload {
            Payload::RepRequest {
                target: RepTarget::Token(t),
            } => {
                if let Some(first) = tokens.get(&t.0) {
                    out.push(Evidence {
                        kind: EvidenceKind::ReplayedToken,
                        messages: vec![*first, seq],
                        note: "access token presented twice".into(),
                    });
                } else {
                    tokens.insert(t.0.clone(), seq);
                }
            }
            Payload::SignedRating(sr) => match idx.check(sr) {
                Err((kind, note)) => out.push(Evidence {
                    kind,
                    messages: vec![seq],
                    note,
                }),
                Ok(()) => {
                    if let Some(first) = nullifiers.get(&sr.tuple.nullifier) {
                        out.push(Evidence {
                            kind: EvidenceKind::ReplayedTicket,
                            messages: vec![*first, seq],
                            note: "ticket nullifier reused".into(),
                        });
                    } else {
                        nullifiers.insert(sr.tuple.nullifier.clone(), seq);
                    }
                }
            },
            _ => {}
        }
    }
    Ok(out)
}

impl Evidence {
    /// Re-checks this evidence against the referenced log lines only.
    pub fn reverify(&self, log: &EventLog) -> bool {
        let Ok(idx) = LogIndex::build(log) else {
            return false;
        };
        let msgs: Option<Vec<_>> = self.messages.iter().map(|s| log.message_at(*s)).collect();
        let Some(msgs) = msgs else {
            return false;
        };
        if msgs.is_empty() || !msgs.iter().all(|m| to_manager(m)) {
            return false;
        }
        match self.kind {
            EvidenceKind::ReplayedToken => match msgs.as_slice() {
                [a, b] if self.messages[0] != self.messages[1] => {
                    let token = |m: &super::Message| match &m.payload {
                        Payload::RepRequest {
                            target: RepTarget::Token(t),
                        } => Some(t.clone()),
                        _ => None,
                    };
                    token(a).is_some() && token(a) == token(b)
                }
                _ => false,
            },
            EvidenceKind::ReplayedTicket => match msgs.as_slice() {
                [a, b] if self.messages[0] != self.messages[1] => match (&a.payload, &b.payload) {
                    (Payload::SignedRating(x), Payload::SignedRating(y)) => {
                        x.tuple.nullifier == y.tuple.nullifier && idx.check(x).is_ok() && idx.check(y).is_ok()
                    }
                    _ => false,
                },
                _ => false,
            },
            kind => match msgs.as_slice() {
                [m] => match &m.payload {
                    Payload::SignedRating(sr) => matches!(idx.check(sr), Err((k, _)) if k == kind),
                    _ => false,
                },
                _ => false,
            },
        }
    }
}
