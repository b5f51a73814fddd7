//! Entity state machines and the rating, query and audit-evidence paths.
//!
//! Four roles exchange [`Message`]s: the key manager (sole holder of secret
//! keys), the reputation manager (ciphertext-only state store), stateless
//! reputation engines, and business nodes addressed by pseudonyms.
//! [`System`] wires them together as a deterministic FIFO event loop and
//! records every delivery and cryptographic operation in an [`EventLog`].

mod business;
mod engine;
mod evidence;
mod key_manager;
mod log;
mod manager;
mod system;

pub use business::{BusinessNode, SessionStatus, VoterSession};
pub use engine::{Engine, EngineFault};
pub use evidence::{detect_evidence, verify_receipt, Evidence, EvidenceKind, RmCheck};
pub use key_manager::KeyManager;
pub use log::{EventLog, EventOutcome, Header, LogError, LogLine, OutcomeStatus};
pub use manager::ReputationManager;
pub use system::{Misbehavior, RateRequest, System, SystemConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::hex_bytes;
use crate::he::{Ciphertext, EvalKey, HeError, PublicKey};
use crate::identity::{IdentityError, Pseudonym, RepHandle, SessionAuthorization, TokenId};
use crate::reputation::ReputationError;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    KeyManager,
    ReputationManager,
    Engine,
    Business,
}

impl EntityId {
    pub fn key_manager() -> Self {
        EntityId("km".into())
    }

    pub fn reputation_manager() -> Self {
        EntityId("rm".into())
    }

    pub fn engine(i: usize) -> Self {
        EntityId(format!("engine:{i}"))
    }

    pub fn role(&self) -> Role {
        match self.0.as_str() {
            "km" => Role::KeyManager,
            "rm" => Role::ReputationManager,
            s if s.starts_with("engine:") => Role::Engine,
            _ => Role::Business,
        }
    }
}

impl From<&RepHandle> for EntityId {
    fn from(h: &RepHandle) -> Self {
        EntityId(h.0.clone())
    }
}

impl From<&crate::identity::PseudonymHandle> for EntityId {
    fn from(h: &crate::identity::PseudonymHandle) -> Self {
        EntityId(h.0.clone())
    }
}

impl std::fmt::Display for EntityId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("unknown votee {0}")]
    UnknownVotee(String),
    #[error("no engines configured")]
    NoEngines,
    #[error("entity {0} is unreachable")]
    Unreachable(String),
    #[error("no unspent ticket from this voter for that votee")]
    NoTicket,
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Reputation(#[from] ReputationError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepTarget {
    Votee(RepHandle),
    Token(TokenId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Encrypted,
    Threshold(f64),
}

/// Answer to a reputation query. Under global visibility the encrypted form
/// is identical for every requester at a given version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryResult {
    Encrypted {
        numerator: Ciphertext,
        denominator: Ciphertext,
        version: u64,
    },
    Threshold {
        passed: bool,
        version: u64,
    },
    Error(String),
}

/// The tuple an engine signs: `(S, W, session_id, votee, base_version,
/// nullifier)`, serialized in this field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedTuple {
    pub combined: Ciphertext,
    pub weight: Ciphertext,
    pub session_id: String,
    pub votee: RepHandle,
    pub base_version: u64,
    pub nullifier: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedRating {
    pub tuple: SignedTuple,
    pub engine: EntityId,
    #[serde(with = "hex_bytes")]
    pub signature: Vec<u8>,
    pub authorization: SessionAuthorization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub rating: Ciphertext,
    pub votee_reputation: Ciphertext,
    pub base_version: u64,
    pub token: TokenId,
    pub authorization: SessionAuthorization,
    pub request_self_rating: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TranscryptRequest {
    /// Re-encrypt a voter-key ciphertext under the votee's key.
    Transcrypt { ciphertext: Ciphertext, target: RepHandle },
    /// Finalize a proposed state, apply the profile rules, and return a fresh
    /// score snapshot. `contribution` is present when negative-impact
    /// feedback must be screened.
    Normalize {
        votee: RepHandle,
        version: u64,
        numerator: Ciphertext,
        denominator: Ciphertext,
        contribution: Option<(Ciphertext, Ciphertext)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TranscryptResponse {
    Transcrypted {
        ciphertext: Ciphertext,
        target_key: PublicKey,
        eval_key: EvalKey,
    },
    Normalized {
        votee: RepHandle,
        version: u64,
        verdict: VerdictKind,
        snapshot: Option<Ciphertext>,
        replacement_numerator: Option<Ciphertext>,
    },
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Accept,
    Reject,
    Adjusted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Payload {
    KeyRequest {
        votee: RepHandle,
    },
    KeyResponse {
        votee: RepHandle,
        public_key: PublicKey,
    },
    RepRequest {
        target: RepTarget,
    },
    RepResponse {
        reputation: Option<Ciphertext>,
        version: u64,
        error: Option<String>,
    },
    RatingSubmission(Box<RatingSubmission>),
    SelfRatingRequest {
        public_key: PublicKey,
    },
    SelfRatingResponse {
        rating: Option<Ciphertext>,
        verified: bool,
    },
    SignedRating(Box<SignedRating>),
    ReputationUpdate {
        session_id: String,
        votee: RepHandle,
        accepted: bool,
        applied_version: u64,
        reason: Option<String>,
    },
    QueryRequest {
        votee: RepHandle,
        mode: QueryMode,
        requester: Pseudonym,
    },
    QueryResponse {
        votee: RepHandle,
        result: QueryResult,
    },
    ThresholdRequest {
        votee: RepHandle,
        threshold: f64,
        version: u64,
        numerator: Ciphertext,
        denominator: Ciphertext,
    },
    ThresholdResponse {
        votee: RepHandle,
        version: u64,
        passed: Option<bool>,
        error: Option<String>,
    },
    TranscryptRequest {
        request: TranscryptRequest,
    },
    TranscryptResponse {
        response: TranscryptResponse,
    },
}

impl Payload {
    pub fn name(&self) -> &'static str {
        match self {
            Payload::KeyRequest { .. } => "KeyRequest",
            Payload::KeyResponse { .. } => "KeyResponse",
            Payload::RepRequest { .. } => "RepRequest",
            Payload::RepResponse { .. } => "RepResponse",
            Payload::RatingSubmission(_) => "RatingSubmission",
            Payload::SelfRatingRequest { .. } => "SelfRatingRequest",
            Payload::SelfRatingResponse { .. } => "SelfRatingResponse",
            Payload::SignedRating(_) => "SignedRating",
            Payload::ReputationUpdate { .. } => "ReputationUpdate",
            Payload::QueryRequest { .. } => "QueryRequest",
            Payload::QueryResponse { .. } => "QueryResponse",
            Payload::ThresholdRequest { .. } => "ThresholdRequest",
            Payload::ThresholdResponse { .. } => "ThresholdResponse",
            Payload::TranscryptRequest { .. } => "TranscryptRequest",
            Payload::TranscryptResponse { .. } => "TranscryptResponse",
        }
    }

    /// Position in the fixed step order; within one correlator the ranks of
    /// successive messages never decrease.
    pub fn stage_rank(&self, receiver: &EntityId) -> u8 {
        match self {
            Payload::KeyRequest { .. } => 0,
            Payload::KeyResponse { .. } => 1,
            Payload::RepRequest { .. } => 2,
            Payload::RepResponse { .. } => 3,
            Payload::RatingSubmission(_) => 4,
            Payload::TranscryptRequest { .. } => 5,
            Payload::TranscryptResponse { .. } => 6,
            Payload::SelfRatingRequest { .. } => 7,
            Payload::SelfRatingResponse { .. } => 8,
            Payload::SignedRating(_) if receiver.role() == Role::ReputationManager => 10,
            Payload::SignedRating(_) => 9,
            Payload::ReputationUpdate { .. } => 11,
            Payload::QueryRequest { .. } => 12,
            Payload::ThresholdRequest { .. } => 13,
            Payload::ThresholdResponse { .. } => 14,
            Payload::QueryResponse { .. } => 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: EntityId,
    pub receiver: EntityId,
    /// Unguessable per-exchange correlator.
    pub correlator: String,
    pub payload: Payload,
}

/// Voter-side proof of a completed rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingReceipt {
    pub session_id: String,
    pub engine: EntityId,
    pub votee: RepHandle,
    pub tuple: SignedTuple,
    #[serde(with = "hex_bytes")]
    pub signature: Vec<u8>,
    pub applied_version: Option<u64>,
}

/// Cryptographic operations counted in the event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Keygen,
    Encrypt,
    Decrypt,
    HeAdd,
    HeMul,
    HeScalar,
    Sign,
    Verify,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Keygen,
        OpKind::Encrypt,
        OpKind::Decrypt,
        OpKind::HeAdd,
        OpKind::HeMul,
        OpKind::HeScalar,
        OpKind::Sign,
        OpKind::Verify,
    ];

    pub fn label(self) -> &'static str {
        match self {
            OpKind::Keygen => "keygen",
            OpKind::Encrypt => "encrypt",
            OpKind::Decrypt => "decrypt",
            OpKind::HeAdd => "he_add",
            OpKind::HeMul => "he_mul",
            OpKind::HeScalar => "he_scalar",
            OpKind::Sign => "sign",
            OpKind::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum EnginePolicy {
    #[default]
    RoundRobin,
    Random { seed: u64 },
}

/// Picks the engine for each rating session.
pub struct EngineAssigner {
    policy: EnginePolicy,
    next: usize,
    rng: ChaCha20Rng,
}

impl EngineAssigner {
    pub fn new(policy: EnginePolicy) -> Self {
        let seed = match policy {
            EnginePolicy::Random { seed } => seed,
            EnginePolicy::RoundRobin => 0,
        };
        EngineAssigner {
            policy,
            next: 0,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn assign<'e>(&mut self, engines: &'e [EntityId]) -> Result<&'e EntityId, ProtocolError> {
        if engines.is_empty() {
            return Err(ProtocolError::NoEngines);
        }
        let i = match self.policy {
            EnginePolicy::RoundRobin => {
                let i = self.next % engines.len();
                self.next += 1;
                i
            }
            EnginePolicy::Random { .. } => self.rng.gen_range(0..engines.len()),
        };
        Ok(&engines[i])
    }
}

/// Minimal-state helper: one-shot assignment.
pub fn assign_engine<'e>(
    assigner: &mut EngineAssigner,
    engines: &'e [EntityId],
) -> Result<&'e EntityId, ProtocolError> {
    assigner.assign(engines)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engines() -> Vec<EntityId> {
        (1..=3).map(EntityId::engine).collect()
    }

    #[test]
    fn round_robin_rotates() {
        let es = engines();
        let mut a = EngineAssigner::new(EnginePolicy::RoundRobin);
        let picks: Vec<_> = (0..4).map(|_| assign_engine(&mut a, &es).unwrap().0.clone()).collect();
        assert_eq!(picks, ["engine:1", "engine:2", "engine:3", "engine:1"]);
    }

    #[test]
    fn random_policy_is_reproducible() {
        let es = engines();
        let run = |seed| {
            let mut a = EngineAssigner::new(EnginePolicy::Random { seed });
            (0..20).map(|_| a.assign(&es).unwrap().clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn no_engines() {
        let mut a = EngineAssigner::new(EnginePolicy::RoundRobin);
        assert_eq!(a.assign(&[]), Err(ProtocolError::NoEngines));
    }

    #[test]
    fn roles_follow_handles() {
        assert_eq!(EntityId::key_manager().role(), Role::KeyManager);
        assert_eq!(EntityId::reputation_manager().role(), Role::ReputationManager);
        assert_eq!(EntityId::engine(0).role(), Role::Engine);
        assert_eq!(EntityId("psn:ab".into()).role(), Role::Business);
    }

    #[test]
    fn signed_rating_rank_depends_on_receiver() {
        let p = Payload::KeyRequest {
            votee: RepHandle("rep:1".into()),
        };
        assert_eq!(p.stage_rank(&EntityId::key_manager()), 0);
    }
}
