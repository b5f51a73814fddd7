use std::collections::BTreeMap;

use ed25519_dalek::{SigningKey, VerifyingKey};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::system::Ctx;
use super::{
    EntityId, Message, Payload, ProtocolError, RatingSubmission, RepTarget, SignedRating,
    SignedTuple, TranscryptRequest, TranscryptResponse,
};
use crate::crypto::{self, derive_rng};
use crate::he::{Ciphertext, EvalKey};

/// Scripted engine deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineFault {
    /// Flip a byte of `S` after signing.
    Tamper,
    /// Sign with a key that is not the engine's.
    Forge,
    /// Skip the weighting multiplication.
    SkipMultiplication,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    AwaitRecord,
    AwaitTranscrypt,
    AwaitSelfRating,
}

struct Session {
    voter: EntityId,
    voter_correlator: String,
    submission: RatingSubmission,
    step: Step,
    voter_weight: Option<Ciphertext>,
    eval_key: Option<EvalKey>,
    fault: Option<EngineFault>,
}

/// Stateless between sessions: per-session state is dropped once the signed
/// rating leaves.
pub struct Engine {
    id: EntityId,
    rng: ChaCha20Rng,
    signing: SigningKey,
    sessions: BTreeMap<String, Session>,
    routes: BTreeMap<String, String>,
    next_fault: Option<EngineFault>,
    aborted: Vec<(String, String)>,
}

impl Engine {
    pub fn new(seed: u64, index: usize) -> Self {
        let id = EntityId::engine(index);
        let mut rng = derive_rng(seed, &format!("entity:{}", id.0));
        let signing = crypto::signing_key_from(&mut rng);
        Engine {
            id,
            rng,
            signing,
            sessions: BTreeMap::new(),
            routes: BTreeMap::new(),
            next_fault: None,
            aborted: Vec::new(),
        }
    }

    pub fn id(&self) -> &EntityId {
        &self.id
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    /// Arms a deviation for the next session this engine opens.
    pub fn arm(&mut self, fault: EngineFault) {
        self.next_fault = Some(fault);
    }

    pub fn open_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn aborted(&self) -> &[(String, String)] {
        &self.aborted
    }

    fn send(&self, to: &EntityId, correlator: &str, payload: Payload) -> Message {
        Message {
            sender: self.id.clone(),
            receiver: to.clone(),
            correlator: correlator.to_string(),
            payload,
        }
    }

    fn route(&mut self, session: &str) -> String {
        let c = crypto::random_hex(&mut self.rng, 16);
        self.routes.insert(c.clone(), session.to_string());
        c
    }

    fn abort(&mut self, session: &str, reason: String) -> Vec<Message> {
        self.sessions.remove(session);
        self.routes.retain(|_, s| s != session);
        self.aborted.push((session.to_string(), reason));
        Vec::new()
    }

    pub fn handle(&mut self, m: &Message, ctx: &mut Ctx<'_>) -> Result<Vec<Message>, ProtocolError> {
        if let Payload::RatingSubmission(sub) = &m.payload {
            let session_id = crypto::random_hex(&mut self.rng, 16);
            let c = self.route(&session_id);
            let token = sub.token.clone();
            self.sessions.insert(
                session_id,
                Session {
                    voter: m.sender.clone(),
                    voter_correlator: m.correlator.clone(),
                    submission: (**sub).clone(),
                    step: Step::AwaitRecord,
                    voter_weight: None,
                    eval_key: None,
                    fault: self.next_fault.take(),
                },
            );
            return Ok(vec![self.send(
                &EntityId::reputation_manager(),
                &c,
                Payload::RepRequest {
                    target: RepTarget::Token(token),
                },
            )]);
        }
        let sid = self
            .routes
            .remove(&m.correlator)
            .ok_or_else(|| ProtocolError::UnknownSession(m.correlator.clone()))?;
        let step = self
            .sessions
            .get(&sid)
            .map(|s| s.step)
            .ok_or_else(|| ProtocolError::UnknownSession(sid.clone()))?;
        match (&m.payload, step) {
            (Payload::RepResponse { reputation, error, .. }, Step::AwaitRecord) => {
                let Some(r) = reputation else {
                    return Ok(self.abort(&sid, error.clone().unwrap_or_else(|| "no record".into())));
                };
                let target = self.sessions[&sid].submission.authorization.votee.clone();
                let c = self.route(&sid);
                self.sessions.get_mut(&sid).unwrap().step = Step::AwaitTranscrypt;
                Ok(vec![self.send(
                    &EntityId::key_manager(),
                    &c,
                    Payload::TranscryptRequest {
                        request: TranscryptRequest::Transcrypt {
                            ciphertext: r.clone(),
                            target,
                        },
                    },
                )])
            }
            (Payload::TranscryptResponse { response }, Step::AwaitTranscrypt) => match response {
                TranscryptResponse::Transcrypted {
                    ciphertext,
                    target_key,
                    eval_key,
                } => {
                    let s = self.sessions.get_mut(&sid).unwrap();
                    s.voter_weight = Some(ciphertext.clone());
                    s.eval_key = Some(eval_key.clone());
                    if s.submission.request_self_rating {
                        s.step = Step::AwaitSelfRating;
                        let votee = EntityId::from(&s.submission.authorization.votee);
                        let c = self.route(&sid);
                        Ok(vec![self.send(
                            &votee,
                            &c,
                            Payload::SelfRatingRequest {
                                public_key: target_key.clone(),
                            },
                        )])
                    } else {
                        self.finish(&sid, None, ctx)
                    }
                }
                TranscryptResponse::Failed { reason } => Ok(self.abort(&sid, reason.clone())),
                TranscryptResponse::Normalized { .. } => Err(ProtocolError::Malformed("unexpected normalization".into())),
            },
            (Payload::SelfRatingResponse { rating, .. }, Step::AwaitSelfRating) => {
                self.finish(&sid, rating.as_ref(), ctx)
            }
            (p, _) => Err(ProtocolError::Malformed(format!("{} out of order", p.name()))),
        }
    }

    /// Called when a self-rating request cannot be delivered.
    pub fn undeliverable(&mut self, correlator: &str, ctx: &mut Ctx<'_>) -> Result<Vec<Message>, ProtocolError> {
        let Some(sid) = self.routes.remove(correlator) else {
            return Ok(Vec::new());
        };
        match self.sessions.get(&sid).map(|s| s.step) {
            Some(Step::AwaitSelfRating) => self.finish(&sid, None, ctx),
            _ => Ok(self.abort(&sid, "peer unreachable".into())),
        }
    }

    fn finish(
        &mut self,
        sid: &str,
        self_rating: Option<&Ciphertext>,
        ctx: &mut Ctx<'_>,
    ) -> Result<Vec<Message>, ProtocolError> {
        let s = self.sessions.remove(sid).expect("session exists");
        let sub = &s.submission;
        let r_r = s.voter_weight.as_ref().expect("weight transcrypted");
        let combined = match s.fault {
            Some(EngineFault::SkipMultiplication) => {
                let w = match self_rating {
                    Some(_) => ctx.add(r_r, &sub.votee_reputation),
                    None => Ok(r_r.clone()),
                };
                w.map(|w| (sub.rating.clone(), w)).map_err(ProtocolError::from)
            }
            _ => {
                let ek = s.eval_key.as_ref().expect("eval key received");
                ctx.combine(&sub.rating, self_rating, r_r, &sub.votee_reputation, ek, &mut self.rng)
            }
        };
        let (mut s_ct, w_ct) = match combined {
            Ok(v) => v,
            Err(e) => return Ok(self.abort(sid, e.to_string())),
        };
        let tuple = SignedTuple {
            combined: s_ct.clone(),
            weight: w_ct,
            session_id: sid.to_string(),
            votee: sub.authorization.votee.clone(),
            base_version: sub.base_version,
            nullifier: sub.authorization.nullifier.clone(),
        };
        let signature = match s.fault {
            Some(EngineFault::Forge) => {
                let rogue = crypto::signing_key_from(&mut self.rng);
                ctx.sign(&rogue, &tuple)
            }
            _ => ctx.sign(&self.signing, &tuple),
        };
        let mut tuple = tuple;
        if s.fault == Some(EngineFault::Tamper) {
            let i = s_ct.payload.len() / 2;
            s_ct.payload[i] ^= 0x01;
            tuple.combined = s_ct;
        }
        self.routes.retain(|_, v| v != sid);
        Ok(vec![self.send(
            &s.voter,
            &s.voter_correlator,
            Payload::SignedRating(Box::new(SignedRating {
                tuple,
                engine: self.id.clone(),
                signature,
                authorization: sub.authorization.clone(),
            })),
        )])
    }
}
