use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::evidence::{verify_receipt, Evidence};
use super::system::Ctx;
use super::{
    EntityId, Message, Payload, ProtocolError, QueryMode, QueryResult, RatingReceipt,
    RatingSubmission, RepTarget,
};
use crate::crypto::{self, derive_rng};
use crate::he::Ciphertext;
use crate::identity::{Pseudonym, RepHandle, SessionAuthorization, TokenId, VotingTicket};
use crate::reputation::RatingVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SessionStatus {
    InProgress,
    Accepted { version: u64 },
    Rejected { reason: String },
    Failed { reason: String },
}

/// Voter-side view of one rating session.
#[derive(Debug, Clone)]
pub struct VoterSession {
    pub votee: RepHandle,
    pub engine: EntityId,
    pub pseudonym: EntityId,
    pub rating: RatingVector<f64>,
    pub authorization: SessionAuthorization,
    pub token: TokenId,
    pub with_self_rating: bool,
    pub status: SessionStatus,
    pub encrypted_rating: Option<Ciphertext>,
    pub submission: Option<RatingSubmission>,
    pub receipt: Option<RatingReceipt>,
    pub receipt_evidence: Option<Evidence>,
}

/// A business's own node. It knows its pseudonyms and tickets but never
/// transmits its registration identity.
pub struct BusinessNode {
    name: String,
    rep: RepHandle,
    rng: ChaCha20Rng,
    self_rating: Option<RatingVector<f64>>,
    verified: bool,
    departed: bool,
    tickets: Vec<(VotingTicket, Pseudonym)>,
    sessions: BTreeMap<String, VoterSession>,
    queries: BTreeMap<String, Option<QueryResult>>,
}

impl BusinessNode {
    pub fn new(
        seed: u64,
        name: &str,
        rep: RepHandle,
        self_rating: Option<RatingVector<f64>>,
        verified: bool,
    ) -> Self {
        BusinessNode {
            name: name.to_string(),
            rng: derive_rng(seed, &format!("node:{name}")),
            rep,
            self_rating,
            verified,
            departed: false,
            tickets: Vec::new(),
            sessions: BTreeMap::new(),
            queries: BTreeMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rep(&self) -> &RepHandle {
        &self.rep
    }

    pub fn has_self_rating(&self) -> bool {
        self.self_rating.is_some()
    }

    pub fn departed(&self) -> bool {
        self.departed
    }

    pub fn depart(&mut self) {
        self.departed = true;
    }

    pub fn hold_ticket(&mut self, t: VotingTicket, p: Pseudonym) {
        self.tickets.push((t, p));
    }

    pub fn unspent_tickets(&self) -> usize {
        self.tickets.len()
    }

    pub fn session(&self, correlator: &str) -> Option<&VoterSession> {
        self.sessions.get(correlator)
    }

    pub fn query_result(&self, correlator: &str) -> Option<&QueryResult> {
        self.queries.get(correlator).and_then(Option::as_ref)
    }

    /// Takes the oldest unspent ticket for `votee`.
    pub fn take_ticket(&mut self, votee: &RepHandle) -> Option<(VotingTicket, Pseudonym)> {
        let i = self.tickets.iter().position(|(t, _)| &t.votee == votee)?;
        Some(self.tickets.remove(i))
    }

    fn correlator(&mut self) -> String {
        crypto::random_hex(&mut self.rng, 16)
    }

    /// Opens a rating session: mints a one-time token and asks for the
    /// votee's key.
    #[allow(clippy::too_many_arguments)]
    pub fn start_rating(
        &mut self,
        ctx: &mut Ctx<'_>,
        votee: &RepHandle,
        engine: &EntityId,
        voter: &Pseudonym,
        authorization: SessionAuthorization,
        rating: RatingVector<f64>,
        with_self_rating: bool,
    ) -> Result<(String, Message), ProtocolError> {
        let token = ctx.authority.mint_access_token(&voter.handle)?;
        let c = self.correlator();
        let me = EntityId::from(&voter.handle);
        self.sessions.insert(
            c.clone(),
            VoterSession {
                votee: votee.clone(),
                engine: engine.clone(),
                pseudonym: me.clone(),
                rating,
                authorization,
                token: token.token_id,
                with_self_rating,
                status: SessionStatus::InProgress,
                encrypted_rating: None,
                submission: None,
                receipt: None,
                receipt_evidence: None,
            },
        );
        let m = Message {
            sender: me,
            receiver: EntityId::key_manager(),
            correlator: c.clone(),
            payload: Payload::KeyRequest { votee: votee.clone() },
        };
        Ok((c, m))
    }

    /// Re-sends an earlier submission under a fresh correlator.
    pub fn replay_submission(&mut self, original: &str) -> Option<(String, Message)> {
        let s = self.sessions.get(original)?.clone();
        let sub = s.submission.clone()?;
        let c = self.correlator();
        let m = Message {
            sender: s.pseudonym.clone(),
            receiver: s.engine.clone(),
            correlator: c.clone(),
            payload: Payload::RatingSubmission(Box::new(sub)),
        };
        self.sessions.insert(
            c.clone(),
            VoterSession {
                status: SessionStatus::InProgress,
                receipt: None,
                ..s
            },
        );
        Some((c, m))
    }

    pub fn start_query(&mut self, requester: &Pseudonym, votee: &RepHandle, mode: QueryMode) -> (String, Message) {
        let c = self.correlator();
        self.queries.insert(c.clone(), None);
        let m = Message {
            sender: EntityId::from(&requester.handle),
            receiver: EntityId::reputation_manager(),
            correlator: c.clone(),
            payload: Payload::QueryRequest {
                votee: votee.clone(),
                mode,
                requester: requester.clone(),
            },
        };
        (c, m)
    }

    /// Marks sessions that never completed.
    pub fn settle(&mut self) {
        for s in self.sessions.values_mut() {
            if s.status == SessionStatus::InProgress {
                s.status = SessionStatus::Failed {
                    reason: "session did not complete".into(),
                };
            }
        }
    }

    pub fn handle(
        &mut self,
        m: &Message,
        ctx: &mut Ctx<'_>,
    ) -> Result<Vec<Message>, ProtocolError> {
        if let Payload::SelfRatingRequest { public_key } = &m.payload {
            let rating: Option<Ciphertext> = match &self.self_rating {
                Some(r) => Some(ctx.encrypt(public_key, &r.dims, &mut self.rng)?),
                None => None,
            };
            return Ok(vec![Message {
                sender: m.receiver.clone(),
                receiver: m.sender.clone(),
                correlator: m.correlator.clone(),
                payload: Payload::SelfRatingResponse {
                    rating,
                    verified: self.verified,
                },
            }]);
        }
        if let Payload::QueryResponse { result, .. } = &m.payload {
            let slot = self
                .queries
                .get_mut(&m.correlator)
                .ok_or_else(|| ProtocolError::UnknownSession(m.correlator.clone()))?;
            *slot = Some(result.clone());
            return Ok(Vec::new());
        }
        let s = self
            .sessions
            .get_mut(&m.correlator)
            .ok_or_else(|| ProtocolError::UnknownSession(m.correlator.clone()))?;
        let reply = |receiver: EntityId, payload| Message {
            sender: s.pseudonym.clone(),
            receiver,
            correlator: m.correlator.clone(),
            payload,
        };
        match &m.payload {
            Payload::KeyResponse { public_key, .. } => {
                let ct = ctx.encrypt(public_key, &s.rating.dims, &mut self.rng)?;
                let out = reply(
                    EntityId::reputation_manager(),
                    Payload::RepRequest {
                        target: RepTarget::Votee(s.votee.clone()),
                    },
                );
                s.encrypted_rating = Some(ct);
                Ok(vec![out])
            }
            Payload::RepResponse { reputation, version, error } => {
                let Some(r) = reputation else {
                    s.status = SessionStatus::Failed {
                        reason: error.clone().unwrap_or_default(),
                    };
                    return Ok(Vec::new());
                };
                let rating = s
                    .encrypted_rating
                    .clone()
                    .ok_or_else(|| ProtocolError::Malformed("reputation before key".into()))?;
                let sub = RatingSubmission {
                    rating,
                    votee_reputation: r.clone(),
                    base_version: *version,
                    token: s.token.clone(),
                    authorization: s.authorization.clone(),
                    request_self_rating: s.with_self_rating,
                };
                s.submission = Some(sub.clone());
                Ok(vec![reply(s.engine.clone(), Payload::RatingSubmission(Box::new(sub)))])
            }
            Payload::SignedRating(sr) => {
                let receipt = RatingReceipt {
                    session_id: sr.tuple.session_id.clone(),
                    engine: sr.engine.clone(),
                    votee: sr.tuple.votee.clone(),
                    tuple: sr.tuple.clone(),
                    signature: sr.signature.clone(),
                    applied_version: None,
                };
                ctx.record(super::OpKind::Verify);
                s.receipt_evidence = match ctx.engine_keys.get(&sr.engine) {
                    Some(vk) => verify_receipt(&receipt, vk).err(),
                    None => Some(Evidence {
                        kind: super::EvidenceKind::BadSignature,
                        messages: vec![ctx.seq],
                        note: "unknown engine".into(),
                    }),
                };
                s.receipt = Some(receipt);
                Ok(vec![reply(EntityId::reputation_manager(), m.payload.clone())])
            }
            Payload::ReputationUpdate {
                accepted,
                applied_version,
                reason,
                ..
            } => {
                if *accepted {
                    s.status = SessionStatus::Accepted {
                        version: *applied_version,
                    };
                    if let Some(r) = s.receipt.as_mut() {
                        r.applied_version = Some(*applied_version);
                    }
                } else {
                    s.status = SessionStatus::Rejected {
                        reason: reason.clone().unwrap_or_default(),
                    };
                }
                Ok(Vec::new())
            }
            p => Err(ProtocolError::Malformed(format!("business cannot handle {}", p.name()))),
        }
    }
}
