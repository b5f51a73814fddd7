use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;

use super::system::Ctx;
use super::{
    EntityId, Message, Payload, ProtocolError, TranscryptRequest, TranscryptResponse, VerdictKind,
};
use crate::crypto::derive_rng;
use crate::he::{Ciphertext, KeyId, KeyMaterial, PublicKey};
use crate::identity::RepHandle;
use crate::reputation::{bootstrap_reputation, enforce_profile, RatingVector, Verdict};

/// Sole custodian of secret keys. Keys are generated lazily per votee from a
/// stream derived from the run seed and the votee handle.
pub struct KeyManager {
    id: EntityId,
    seed: u64,
    rng: ChaCha20Rng,
    keys: BTreeMap<RepHandle, KeyMaterial>,
    owners: BTreeMap<KeyId, RepHandle>,
    released: BTreeMap<RepHandle, RatingVector<f64>>,
}

impl KeyManager {
    pub fn new(seed: u64) -> Self {
        KeyManager {
            id: EntityId::key_manager(),
            seed,
            rng: derive_rng(seed, "entity:km"),
            keys: BTreeMap::new(),
            owners: BTreeMap::new(),
            released: BTreeMap::new(),
        }
    }

    pub fn key_stream(seed: u64, votee: &RepHandle) -> ChaCha20Rng {
        derive_rng(seed, &format!("km-key:{}", votee.0))
    }

    pub fn key_count(&self) -> usize {
        self.keys.len()
    }

    pub fn key_material(&self, votee: &RepHandle) -> Option<&KeyMaterial> {
        self.keys.get(votee)
    }

    fn ensure_key(&mut self, ctx: &mut Ctx<'_>, votee: &RepHandle) -> Result<PublicKey, ProtocolError> {
        if let Some(k) = self.keys.get(votee) {
            return Ok(k.public_key.clone());
        }
        let km = ctx.keygen(&mut Self::key_stream(self.seed, votee))?;
        self.owners.insert(km.key_id.clone(), votee.clone());
        let pk = km.public_key.clone();
        self.keys.insert(votee.clone(), km);
        Ok(pk)
    }

    fn material(&self, votee: &RepHandle) -> Result<&KeyMaterial, ProtocolError> {
        self.keys
            .get(votee)
            .ok_or_else(|| ProtocolError::UnknownVotee(votee.0.clone()))
    }

    fn reply(&self, m: &Message, payload: Payload) -> Message {
        Message {
            sender: self.id.clone(),
            receiver: m.sender.clone(),
            correlator: m.correlator.clone(),
            payload,
        }
    }

    pub fn handle(&mut self, m: &Message, ctx: &mut Ctx<'_>) -> Result<Vec<Message>, ProtocolError> {
        match &m.payload {
            Payload::KeyRequest { votee } => {
                let public_key = self.ensure_key(ctx, votee)?;
                Ok(vec![self.reply(
                    m,
                    Payload::KeyResponse {
                        votee: votee.clone(),
                        public_key,
                    },
                )])
            }
            Payload::TranscryptRequest { request } => {
                let response = match self.transcrypt(request, ctx) {
                    Ok(r) => r,
                    Err(e) => TranscryptResponse::Failed { reason: e.to_string() },
                };
                Ok(vec![self.reply(m, Payload::TranscryptResponse { response })])
            }
            Payload::ThresholdRequest {
                votee,
                threshold,
                version,
                numerator,
                denominator,
            } => {
                let (passed, error) = match self.score(ctx, votee, numerator, denominator) {
                    Ok(Some(s)) => (Some(ctx.profile.threshold_aggregate.apply(&s) >= *threshold), None),
                    Ok(None) => (None, Some("EmptyState".to_string())),
                    Err(e) => (None, Some(e.to_string())),
                };
                Ok(vec![self.reply(
                    m,
                    Payload::ThresholdResponse {
                        votee: votee.clone(),
                        version: *version,
                        passed,
                        error,
                    },
                )])
            }
            other => Err(ProtocolError::Malformed(format!("key manager cannot handle {}", other.name()))),
        }
    }

    /// Decrypts and divides; `None` when the denominator is empty.
    fn score(
        &self,
        ctx: &mut Ctx<'_>,
        votee: &RepHandle,
        numerator: &Ciphertext,
        denominator: &Ciphertext,
    ) -> Result<Option<RatingVector<f64>>, ProtocolError> {
        let sk = &self.material(votee)?.secret_key;
        let n = ctx.decrypt(sk, numerator)?;
        let d = ctx.decrypt(sk, denominator)?;
        Ok(ratio(&n, &d, denominator.error_bound))
    }

    fn transcrypt(
        &mut self,
        request: &TranscryptRequest,
        ctx: &mut Ctx<'_>,
    ) -> Result<TranscryptResponse, ProtocolError> {
        match request {
            TranscryptRequest::Transcrypt { ciphertext, target } => {
                let source = self
                    .owners
                    .get(&ciphertext.key_id)
                    .cloned()
                    .ok_or_else(|| ProtocolError::Malformed("ciphertext under unknown key".into()))?;
                let plain = ctx.decrypt(&self.material(&source)?.secret_key, ciphertext)?;
                let target_key = self.material(target)?.public_key.clone();
                let eval_key = self.material(target)?.eval_key.clone();
                let ciphertext = ctx.encrypt(&target_key, &plain, &mut self.rng)?;
                Ok(TranscryptResponse::Transcrypted {
                    ciphertext,
                    target_key,
                    eval_key,
                })
            }
            TranscryptRequest::Normalize {
                votee,
                version,
                numerator,
                denominator,
                contribution,
            } => {
                let dims = ctx.dims;
                let (prior, _) = bootstrap_reputation::<f64>(ctx.profile, dims);
                let sk = self.material(votee)?.secret_key.clone();
                let n = ctx.decrypt(&sk, numerator)?;
                let d = ctx.decrypt(&sk, denominator)?;
                let new = ratio(&n, &d, denominator.error_bound).unwrap_or_else(|| prior.clone());
                let old = self.released.get(votee).cloned().unwrap_or(prior);
                let feedback = match contribution {
                    Some((s, w)) => {
                        let s = ctx.decrypt(&sk, s)?;
                        let w = ctx.decrypt(&sk, w)?;
                        ratio(&s, &w, 0.0).unwrap_or_else(|| RatingVector::splat(0.0, dims))
                    }
                    None if !ctx.profile.liveliness => {
                        return Err(ProtocolError::Malformed("contribution required to screen feedback".into()))
                    }
                    None => new.clone(),
                };
                let pk = self.material(votee)?.public_key.clone();
                let (verdict, released, replacement) = match enforce_profile(ctx.profile, &old, &new, &feedback) {
                    Verdict::Accept => (VerdictKind::Accept, Some(new), None),
                    Verdict::Reject => (VerdictKind::Reject, None, None),
                    Verdict::Adjusted(v) => {
                        let scaled: Vec<f64> = v.dims.iter().zip(&d).map(|(s, d)| s * d).collect();
                        let repl = ctx.encrypt(&pk, &scaled, &mut self.rng)?;
                        (VerdictKind::Adjusted, Some(v), Some(repl))
                    }
                };
                let snapshot = match &released {
                    Some(v) => Some(ctx.encrypt(&pk, &v.dims, &mut self.rng)?),
                    None => None,
                };
                if let Some(v) = released {
                    self.released.insert(votee.clone(), v);
                }
                Ok(TranscryptResponse::Normalized {
                    votee: votee.clone(),
                    version: *version,
                    verdict,
                    snapshot,
                    replacement_numerator: replacement,
                })
            }
        }
    }
}

/// Per-dimension `n / d` clamped to `[0, 1]`; `None` when any denominator is
/// within `floor` of zero.
pub(crate) fn ratio(n: &[f64], d: &[f64], floor: f64) -> Option<RatingVector<f64>> {
    if n.len() != d.len() || d.iter().any(|&x| x <= floor || x <= 0.0) {
        return None;
    }
    Some(RatingVector {
        dims: n.iter().zip(d).map(|(a, b)| (a / b).clamp(0.0, 1.0)).collect(),
    })
}
