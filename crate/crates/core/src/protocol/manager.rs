use std::collections::{BTreeMap, VecDeque};

use rand_chacha::ChaCha20Rng;

use super::evidence::{Evidence, EvidenceKind, RmCheck};
use super::system::Ctx;
use super::{
    EntityId, Message, Payload, ProtocolError, QueryMode, QueryResult, RepTarget, SignedRating,
    TranscryptRequest, TranscryptResponse, VerdictKind,
};
use crate::crypto::{self, derive_rng};
use crate::he::{Ciphertext, PublicKey};
use crate::identity::{verify_pseudonym, IdentityError, RepHandle, TokenId};
use crate::reputation::ReputationState;

/// Per-votee record. With durability the running pair lives in `base`;
/// without it, `base` is the last checkpoint and accepted contributions are
/// replayed from `history` on every read.
struct Record {
    key: PublicKey,
    base: ReputationState,
    history: Vec<(Ciphertext, Ciphertext)>,
    snapshot: Ciphertext,
    busy: bool,
    queue: VecDeque<Queued>,
}

struct Queued {
    rating: SignedRating,
    reply_to: EntityId,
    correlator: String,
}

enum Parked {
    Rep { reply_to: EntityId, correlator: String },
    Query(Message),
}

struct PendingUpdate {
    votee: RepHandle,
    reply_to: EntityId,
    correlator: String,
    session_id: String,
    state: ReputationState,
    contribution: (Ciphertext, Ciphertext),
}

struct PendingThreshold {
    reply_to: EntityId,
    correlator: String,
    votee: RepHandle,
}

/// Ciphertext-only reputation store; serializes updates per votee.
pub struct ReputationManager {
    id: EntityId,
    rng: ChaCha20Rng,
    records: BTreeMap<RepHandle, Record>,
    key_requests: BTreeMap<String, RepHandle>,
    parked: BTreeMap<RepHandle, Vec<Parked>>,
    redeemed: BTreeMap<TokenId, u64>,
    nullifiers: BTreeMap<String, u64>,
    updates: BTreeMap<String, PendingUpdate>,
    thresholds: BTreeMap<String, PendingThreshold>,
    evidence: Vec<Evidence>,
}

impl ReputationManager {
    pub fn new(seed: u64) -> Self {
        ReputationManager {
            id: EntityId::reputation_manager(),
            rng: derive_rng(seed, "entity:rm"),
            records: BTreeMap::new(),
            key_requests: BTreeMap::new(),
            parked: BTreeMap::new(),
            redeemed: BTreeMap::new(),
            nullifiers: BTreeMap::new(),
            updates: BTreeMap::new(),
            thresholds: BTreeMap::new(),
            evidence: Vec::new(),
        }
    }

    pub fn evidence(&self) -> &[Evidence] {
        &self.evidence
    }

    pub fn votees(&self) -> impl Iterator<Item = &RepHandle> {
        self.records.keys()
    }

    pub fn version(&self, votee: &RepHandle) -> Option<u64> {
        self.records.get(votee).map(|r| r.base.version)
    }

    /// Current running pair, folding history without recording operations.
    pub fn state(&self, ctx_be: &dyn crate::he::HeBackend<f64>, votee: &RepHandle) -> Option<ReputationState> {
        let r = self.records.get(votee)?;
        let mut st = r.base.clone();
        for (s, w) in &r.history {
            st.numerator = ctx_be.add(&st.numerator, s).ok()?;
            st.denominator = ctx_be.add(&st.denominator, w).ok()?;
        }
        Some(st)
    }

    fn current(&self, ctx: &mut Ctx<'_>, votee: &RepHandle) -> Result<ReputationState, ProtocolError> {
        let r = self
            .records
            .get(votee)
            .ok_or_else(|| ProtocolError::UnknownVotee(votee.0.clone()))?;
        let mut st = r.base.clone();
        for (s, w) in &r.history {
            st.numerator = ctx.add(&st.numerator, s)?;
            st.denominator = ctx.add(&st.denominator, w)?;
        }
        Ok(st)
    }

    fn send(&self, to: &EntityId, correlator: &str, payload: Payload) -> Message {
        Message {
            sender: self.id.clone(),
            receiver: to.clone(),
            correlator: correlator.to_string(),
            payload,
        }
    }

    fn fresh_correlator(&mut self) -> String {
        crypto::random_hex(&mut self.rng, 16)
    }

    /// Parks `p` until the votee's record exists, requesting its key once.
    fn park(&mut self, votee: &RepHandle, p: Parked) -> Vec<Message> {
        let first = !self.parked.contains_key(votee);
        self.parked.entry(votee.clone()).or_default().push(p);
        if !first {
            return Vec::new();
        }
        let c = self.fresh_correlator();
        self.key_requests.insert(c.clone(), votee.clone());
        vec![self.send(
            &EntityId::key_manager(),
            &c,
            Payload::KeyRequest { votee: votee.clone() },
        )]
    }

    fn rep_response(&self, votee: &RepHandle, reply_to: &EntityId, correlator: &str) -> Message {
        let r = &self.records[votee];
        self.send(
            reply_to,
            correlator,
            Payload::RepResponse {
                reputation: Some(r.snapshot.clone()),
                version: r.base.version,
                error: None,
            },
        )
    }

    fn rep_error(&self, m: &Message, error: String) -> Message {
        self.send(
            &m.sender,
            &m.correlator,
            Payload::RepResponse {
                reputation: None,
                version: 0,
                error: Some(error),
            },
        )
    }

    pub fn handle(&mut self, m: &Message, ctx: &mut Ctx<'_>) -> Result<Vec<Message>, ProtocolError> {
        match &m.payload {
            Payload::KeyResponse { votee, public_key } => self.on_key(m, ctx, votee, public_key),
            Payload::RepRequest {
                target: RepTarget::Votee(v),
            } => {
                if self.records.contains_key(v) {
                    Ok(vec![self.rep_response(v, &m.sender, &m.correlator)])
                } else {
                    Ok(self.park(
                        v,
                        Parked::Rep {
                            reply_to: m.sender.clone(),
                            correlator: m.correlator.clone(),
                        },
                    ))
                }
            }
            Payload::RepRequest {
                target: RepTarget::Token(t),
            } => self.on_token(m, ctx, t),
            Payload::SignedRating(sr) => self.on_signed(m, ctx, sr),
            Payload::TranscryptResponse { response } => self.on_normalized(m, ctx, response),
            Payload::QueryRequest { .. } => self.on_query(m, ctx),
            Payload::ThresholdResponse {
                votee,
                version,
                passed,
                error,
            } => {
                let p = self
                    .thresholds
                    .remove(&m.correlator)
                    .ok_or_else(|| ProtocolError::UnknownSession(m.correlator.clone()))?;
                debug_assert_eq!(&p.votee, votee);
                let result = match (passed, error) {
                    (Some(passed), _) => QueryResult::Threshold {
                        passed: *passed,
                        version: *version,
                    },
                    (None, e) => QueryResult::Error(e.clone().unwrap_or_else(|| "no answer".into())),
                };
                Ok(vec![self.send(
                    &p.reply_to,
                    &p.correlator,
                    Payload::QueryResponse {
                        votee: votee.clone(),
                        result,
                    },
                )])
            }
            other => Err(ProtocolError::Malformed(format!(
                "reputation manager cannot handle {}",
                other.name()
            ))),
        }
    }

    fn on_key(
        &mut self,
        m: &Message,
        ctx: &mut Ctx<'_>,
        votee: &RepHandle,
        pk: &PublicKey,
    ) -> Result<Vec<Message>, ProtocolError> {
        if self.key_requests.remove(&m.correlator).as_ref() != Some(votee) {
            return Err(ProtocolError::UnknownSession(m.correlator.clone()));
        }
        ctx.bootstrap = true;
        let built = (|| -> Result<Record, ProtocolError> {
            let base = ctx.initial_state(pk, &mut self.rng)?;
            let prior = vec![ctx.profile.prior_value.clamp(0.0, 1.0); ctx.dims];
            let snapshot = ctx.encrypt(pk, &prior, &mut self.rng)?;
            Ok(Record {
                key: pk.clone(),
                base,
                history: Vec::new(),
                snapshot,
                busy: false,
                queue: VecDeque::new(),
            })
        })();
        ctx.bootstrap = false;
        self.records.insert(votee.clone(), built?);
        let mut out = Vec::new();
        for p in self.parked.remove(votee).unwrap_or_default() {
            match p {
                Parked::Rep { reply_to, correlator } => out.push(self.rep_response(votee, &reply_to, &correlator)),
                Parked::Query(q) => out.extend(self.on_query(&q, ctx)?),
            }
        }
        Ok(out)
    }

    fn on_token(&mut self, m: &Message, ctx: &mut Ctx<'_>, t: &TokenId) -> Result<Vec<Message>, ProtocolError> {
        let record = match ctx.authority.redeem_access_token(t) {
            Ok(r) => r,
            Err(e) => {
                if e == IdentityError::AlreadyRedeemed {
                    let first = self.redeemed.get(t).copied().unwrap_or(ctx.seq);
                    self.evidence.push(Evidence {
                        kind: EvidenceKind::ReplayedToken,
                        messages: vec![first, ctx.seq],
                        note: "access token presented twice".into(),
                    });
                }
                return Ok(vec![self.rep_error(m, e.to_string())]);
            }
        };
        self.redeemed.insert(t.clone(), ctx.seq);
        let voter = match ctx.authority.resolve_record(&record) {
            Ok(v) => v,
            Err(e) => return Ok(vec![self.rep_error(m, e.to_string())]),
        };
        if self.records.contains_key(&voter) {
            Ok(vec![self.rep_response(&voter, &m.sender, &m.correlator)])
        } else {
            Ok(self.park(
                &voter,
                Parked::Rep {
                    reply_to: m.sender.clone(),
                    correlator: m.correlator.clone(),
                },
            ))
        }
    }

    fn reject(&self, to: &EntityId, correlator: &str, sr: &SignedRating, version: u64, reason: String) -> Message {
        self.send(
            to,
            correlator,
            Payload::ReputationUpdate {
                session_id: sr.tuple.session_id.clone(),
                votee: sr.tuple.votee.clone(),
                accepted: false,
                applied_version: version,
                reason: Some(reason),
            },
        )
    }

    fn on_signed(&mut self, m: &Message, ctx: &mut Ctx<'_>, sr: &SignedRating) -> Result<Vec<Message>, ProtocolError> {
        let votee = &sr.tuple.votee;
        let Some(rec) = self.records.get(votee) else {
            return Ok(vec![self.reject(&m.sender, &m.correlator, sr, 0, "unknown votee".into())]);
        };
        let version = rec.base.version;
        let intact = [&sr.tuple.combined, &sr.tuple.weight]
            .iter()
            .all(|ct| ct.key_id == rec.key.key_id && crate::he::payload_intact(ct));
        if intact {
            ctx.record(super::OpKind::Verify);
            ctx.record(super::OpKind::Verify);
        }
        let authority = ctx.authority.verifying_key();
        let check = RmCheck {
            authority: &authority,
            engines: ctx.engine_keys,
            depth_budget: ctx.be.params().depth_budget,
        }
        .signed_rating(sr, &rec.key.key_id);
        if let Err((kind, note)) = check {
            self.evidence.push(Evidence {
                kind,
                messages: vec![ctx.seq],
                note: note.clone(),
            });
            return Ok(vec![self.reject(&m.sender, &m.correlator, sr, version, note)]);
        }
        if let Some(first) = self.nullifiers.get(&sr.tuple.nullifier) {
            self.evidence.push(Evidence {
                kind: EvidenceKind::ReplayedTicket,
                messages: vec![*first, ctx.seq],
                note: "ticket nullifier reused".into(),
            });
            return Ok(vec![self.reject(&m.sender, &m.correlator, sr, version, "ticket already used".into())]);
        }
        self.nullifiers.insert(sr.tuple.nullifier.clone(), ctx.seq);
        let q = Queued {
            rating: sr.clone(),
            reply_to: m.sender.clone(),
            correlator: m.correlator.clone(),
        };
        let rec = self.records.get_mut(votee).expect("checked above");
        if rec.busy {
            rec.queue.push_back(q);
            return Ok(Vec::new());
        }
        self.start_update(ctx, q)
    }

    fn start_update(&mut self, ctx: &mut Ctx<'_>, q: Queued) -> Result<Vec<Message>, ProtocolError> {
        let votee = q.rating.tuple.votee.clone();
        let st = self.current(ctx, &votee)?;
        let s = q.rating.tuple.combined.clone();
        let w = q.rating.tuple.weight.clone();
        let next = ctx.update_state(&st, &s, &w)?;
        let c = self.fresh_correlator();
        let request = TranscryptRequest::Normalize {
            votee: votee.clone(),
            version: next.version,
            numerator: next.numerator.clone(),
            denominator: next.denominator.clone(),
            contribution: (!ctx.profile.liveliness).then(|| (s.clone(), w.clone())),
        };
        self.records.get_mut(&votee).expect("record exists").busy = true;
        self.updates.insert(
            c.clone(),
            PendingUpdate {
                votee,
                reply_to: q.reply_to,
                correlator: q.correlator,
                session_id: q.rating.tuple.session_id,
                state: next,
                contribution: (s, w),
            },
        );
        Ok(vec![self.send(&EntityId::key_manager(), &c, Payload::TranscryptRequest { request })])
    }

    fn on_normalized(
        &mut self,
        m: &Message,
        ctx: &mut Ctx<'_>,
        response: &TranscryptResponse,
    ) -> Result<Vec<Message>, ProtocolError> {
        let p = self
            .updates
            .remove(&m.correlator)
            .ok_or_else(|| ProtocolError::UnknownSession(m.correlator.clone()))?;
        let durable = ctx.profile.durability;
        let rec = self.records.get_mut(&p.votee).expect("record exists");
        let (accepted, reason) = match response {
            TranscryptResponse::Normalized {
                verdict,
                snapshot,
                replacement_numerator,
                ..
            } => match (verdict, snapshot) {
                (VerdictKind::Reject, _) => (false, Some("rejected by profile".to_string())),
                (_, None) => (false, Some("no snapshot returned".to_string())),
                (VerdictKind::Accept, Some(snap)) => {
                    if durable {
                        rec.base = p.state.clone();
                    } else {
                        rec.history.push(p.contribution.clone());
                        rec.base.version = p.state.version;
                    }
                    rec.snapshot = snap.clone();
                    (true, None)
                }
                (VerdictKind::Adjusted, Some(snap)) => {
                    let Some(n) = replacement_numerator else {
                        return Err(ProtocolError::Malformed("adjusted verdict without numerator".into()));
                    };
                    rec.base = ReputationState {
                        numerator: n.clone(),
                        ..p.state.clone()
                    };
                    rec.history.clear();
                    rec.snapshot = snap.clone();
                    (true, Some("adjusted to keep the score monotone".to_string()))
                }
            },
            TranscryptResponse::Failed { reason } => (false, Some(reason.clone())),
            TranscryptResponse::Transcrypted { .. } => {
                return Err(ProtocolError::Malformed("unexpected transcryption".into()))
            }
        };
        rec.busy = false;
        let version = rec.base.version;
        let next = rec.queue.pop_front();
        let mut out = vec![self.send(
            &p.reply_to,
            &p.correlator,
            Payload::ReputationUpdate {
                session_id: p.session_id,
                votee: p.votee,
                accepted,
                applied_version: version,
                reason,
            },
        )];
        if let Some(q) = next {
            out.extend(self.start_update(ctx, q)?);
        }
        Ok(out)
    }

    fn on_query(&mut self, m: &Message, ctx: &mut Ctx<'_>) -> Result<Vec<Message>, ProtocolError> {
        let Payload::QueryRequest { votee, mode, requester } = &m.payload else {
            return Err(ProtocolError::Malformed("expected a query".into()));
        };
        let respond = |this: &Self, result| {
            vec![this.send(
                &m.sender,
                &m.correlator,
                Payload::QueryResponse {
                    votee: votee.clone(),
                    result,
                },
            )]
        };
        ctx.record(super::OpKind::Verify);
        let cfg = *ctx.authority.config();
        let valid = m.sender.0 == requester.handle.0
            && verify_pseudonym(
                requester,
                &ctx.authority.verifying_key(),
                ctx.authority.current_epoch(),
                cfg.pseudonym_lifetime_epochs,
            )
            .is_ok();
        if !valid {
            return Ok(respond(self, QueryResult::Error("invalid requester pseudonym".into())));
        }
        match mode {
            QueryMode::Encrypted => {
                if !self.records.contains_key(votee) {
                    return Ok(self.park(votee, Parked::Query(m.clone())));
                }
                let st = self.current(ctx, votee)?;
                Ok(respond(
                    self,
                    QueryResult::Encrypted {
                        numerator: st.numerator,
                        denominator: st.denominator,
                        version: st.version,
                    },
                ))
            }
            QueryMode::Threshold(t) => {
                let version = self.version(votee).unwrap_or(0);
                if version == 0 {
                    return Ok(respond(self, QueryResult::Error("EmptyState".into())));
                }
                let st = self.current(ctx, votee)?;
                let c = self.fresh_correlator();
                self.thresholds.insert(
                    c.clone(),
                    PendingThreshold {
                        reply_to: m.sender.clone(),
                        correlator: m.correlator.clone(),
                        votee: votee.clone(),
                    },
                );
                Ok(vec![self.send(
                    &EntityId::key_manager(),
                    &c,
                    Payload::ThresholdRequest {
                        votee: votee.clone(),
                        threshold: *t,
                        version,
                        numerator: st.numerator,
                        denominator: st.denominator,
                    },
                )])
            }
        }
    }
}
