use std::marker::PhantomData;

use rand::{Rng, RngCore};
use sha2::{Digest, Sha256};

use super::{
    check_same_key, fresh_key_id, open_payload, seal_payload, BackendKind, Ciphertext, EvalKey,
    HeBackend, HeError, HeParams, KeyMaterial, PlainVector, PublicKey, ScalarOp, SecretKey,
};
use crate::scalar::Scalar;

const SIM_TAG: u8 = b'S';
const NONCE_LEN: usize = 16;

/// Deterministic stand-in for an approximate homomorphic scheme.
///
/// Each slot carries the exact value of the operation chain and a separate
/// injected error term; decryption returns their sum. Fresh encryptions,
/// multiplications and plaintext operations each inject uniform error in
/// `[-epsilon, epsilon]` drawn from the caller's RNG, additions inject none.
/// The error term composes exactly like the declared bound, so the bound
/// holds regardless of value magnitude.
///
/// Payloads are *not* confidential: this backend exists for protocol and
/// audit testing.
pub struct SimBackend<T> {
    params: HeParams,
    _scalar: PhantomData<fn() -> T>,
}

struct SimSlots {
    nonce: [u8; NONCE_LEN],
    values: Vec<f64>,
    noise: Vec<f64>,
}

impl<T: Scalar> SimBackend<T> {
    pub fn new(params: HeParams) -> Result<Self, HeError> {
        params.validate()?;
        Ok(SimBackend {
            params,
            _scalar: PhantomData,
        })
    }

    fn jitter(&self, rng: &mut dyn RngCore) -> f64 {
        let eps = self.params.epsilon;
        if eps == 0.0 {
            0.0
        } else {
            rng.gen_range(-eps..=eps)
        }
    }

    fn encode(&self, ct_key: &super::KeyId, slots: &SimSlots) -> Vec<u8> {
        let mut body = Vec::with_capacity(1 + NONCE_LEN + 4 + slots.values.len() * 16);
        body.push(SIM_TAG);
        body.extend_from_slice(&slots.nonce);
        body.extend_from_slice(&(slots.values.len() as u32).to_le_bytes());
        for (v, n) in slots.values.iter().zip(&slots.noise) {
            body.extend_from_slice(&v.to_le_bytes());
            body.extend_from_slice(&n.to_le_bytes());
        }
        seal_payload(ct_key, body)
    }

    fn decode(&self, ct: &Ciphertext) -> Result<SimSlots, HeError> {
        let body = open_payload(&ct.key_id, &ct.payload)?;
        if body.first() != Some(&SIM_TAG) {
            return Err(HeError::Corrupted("not a simulation ciphertext".into()));
        }
        if body.len() < 1 + NONCE_LEN + 4 {
            return Err(HeError::Corrupted("truncated header".into()));
        }
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&body[1..1 + NONCE_LEN]);
        let n = u32::from_le_bytes(body[1 + NONCE_LEN..1 + NONCE_LEN + 4].try_into().unwrap())
            as usize;
        let rest = &body[1 + NONCE_LEN + 4..];
        if rest.len() != n * 16 || n > self.params.slot_count {
            return Err(HeError::Corrupted("slot section has wrong length".into()));
        }
        let mut values = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        for chunk in rest.chunks_exact(16) {
            values.push(f64::from_le_bytes(chunk[..8].try_into().unwrap()));
            noise.push(f64::from_le_bytes(chunk[8..].try_into().unwrap()));
        }
        Ok(SimSlots {
            nonce,
            values,
            noise,
        })
    }

    fn derived_nonce(a: &[u8; NONCE_LEN], b: &[u8; NONCE_LEN]) -> [u8; NONCE_LEN] {
        let mut h = Sha256::new();
        h.update(a);
        h.update(b);
        let d = h.finalize();
        let mut out = [0u8; NONCE_LEN];
        out.copy_from_slice(&d[..NONCE_LEN]);
        out
    }
}

fn pad(v: &[f64], len: usize) -> impl Iterator<Item = f64> + '_ {
    v.iter().copied().chain(std::iter::repeat(0.0)).take(len)
}

impl<T: Scalar> HeBackend<T> for SimBackend<T> {
    fn kind(&self) -> BackendKind {
        BackendKind::Simulation
    }

    fn params(&self) -> &HeParams {
        &self.params
    }

    fn fresh_error(&self) -> f64 {
        self.params.epsilon
    }

    fn plain_mul_consumes_level(&self) -> bool {
        false
    }

    fn keygen(&self, rng: &mut dyn RngCore) -> Result<KeyMaterial, HeError> {
        let key_id = fresh_key_id(rng);
        let mut secret = vec![0u8; 32];
        rng.fill_bytes(&mut secret);
        Ok(KeyMaterial {
            public_key: PublicKey {
                key_id: key_id.clone(),
                bytes: Vec::new(),
            },
            secret_key: SecretKey {
                key_id: key_id.clone(),
                bytes: secret,
            },
            eval_key: EvalKey {
                key_id: key_id.clone(),
                bytes: Vec::new(),
            },
            key_id,
        })
    }

    fn encrypt(
        &self,
        pk: &PublicKey,
        pt: &PlainVector<T>,
        rng: &mut dyn RngCore,
    ) -> Result<Ciphertext, HeError> {
        if pt.len() > self.params.slot_count {
            return Err(HeError::VectorTooLong {
                len: pt.len(),
                slots: self.params.slot_count,
            });
        }
        let values = pt.checked_f64()?;
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let noise = values.iter().map(|_| self.jitter(rng)).collect();
        let slots = SimSlots {
            nonce,
            values,
            noise,
        };
        Ok(Ciphertext {
            payload: self.encode(&pk.key_id, &slots),
            key_id: pk.key_id.clone(),
            level: self.params.depth_budget,
            error_bound: self.params.epsilon,
        })
    }

    fn decrypt(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<PlainVector<T>, HeError> {
        check_same_key(&sk.key_id, &ct.key_id)?;
        let slots = self.decode(ct)?;
        Ok(PlainVector::new(
            slots
                .values
                .iter()
                .zip(&slots.noise)
                .map(|(v, n)| T::from_f64_lossy(v + n))
                .collect(),
        ))
    }

    fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, HeError> {
        check_same_key(&a.key_id, &b.key_id)?;
        let sa = self.decode(a)?;
        let sb = self.decode(b)?;
        let len = sa.values.len().max(sb.values.len());
        let slots = SimSlots {
            nonce: Self::derived_nonce(&sa.nonce, &sb.nonce),
            values: pad(&sa.values, len).zip(pad(&sb.values, len)).map(|(x, y)| x + y).collect(),
            noise: pad(&sa.noise, len).zip(pad(&sb.noise, len)).map(|(x, y)| x + y).collect(),
        };
        Ok(Ciphertext {
            payload: self.encode(&a.key_id, &slots),
            key_id: a.key_id.clone(),
            level: a.level.min(b.level),
            error_bound: a.error_bound + b.error_bound,
        })
    }

    fn mul(
        &self,
        a: &Ciphertext,
        b: &Ciphertext,
        ek: &EvalKey,
        rng: &mut dyn RngCore,
    ) -> Result<Ciphertext, HeError> {
        check_same_key(&a.key_id, &b.key_id)?;
        check_same_key(&a.key_id, &ek.key_id)?;
        let level = a.level.min(b.level);
        if level == 0 {
            return Err(HeError::DepthExhausted { level });
        }
        let sa = self.decode(a)?;
        let sb = self.decode(b)?;
        let len = sa.values.len().max(sb.values.len());
        let values = pad(&sa.values, len).zip(pad(&sb.values, len)).map(|(x, y)| x * y).collect();
        let noise = pad(&sa.noise, len)
            .zip(pad(&sb.noise, len))
            .map(|(x, y)| x + y + self.jitter(rng))
            .collect();
        let slots = SimSlots {
            nonce: Self::derived_nonce(&sa.nonce, &sb.nonce),
            values,
            noise,
        };
        Ok(Ciphertext {
            payload: self.encode(&a.key_id, &slots),
            key_id: a.key_id.clone(),
            level: level - 1,
            error_bound: a.error_bound + b.error_bound + self.params.epsilon,
        })
    }

    fn scalar(
        &self,
        op: ScalarOp,
        a: &Ciphertext,
        p: &PlainVector<T>,
        rng: &mut dyn RngCore,
    ) -> Result<Ciphertext, HeError> {
        let sa = self.decode(a)?;
        if p.len() != sa.values.len() {
            return Err(HeError::LengthMismatch {
                expected: sa.values.len(),
                found: p.len(),
            });
        }
        let pv = p.checked_f64()?;
        let (values, noise, error_bound) = match op {
            ScalarOp::Add => (
                sa.values.iter().zip(&pv).map(|(x, c)| x + c).collect(),
                sa.noise.iter().map(|n| n + self.jitter(rng)).collect(),
                a.error_bound + self.params.epsilon,
            ),
            ScalarOp::Mul => {
                let pmax = pv.iter().fold(0.0f64, |m, c| m.max(c.abs()));
                (
                    sa.values.iter().zip(&pv).map(|(x, c)| x * c).collect(),
                    sa.noise.iter().zip(&pv).map(|(n, c)| n * c + self.jitter(rng)).collect(),
                    (pmax * a.error_bound + self.params.epsilon).max(a.error_bound),
                )
            }
        };
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let slots = SimSlots {
            nonce,
            values,
            noise,
        };
        Ok(Ciphertext {
            payload: self.encode(&a.key_id, &slots),
            key_id: a.key_id.clone(),
            level: a.level,
            error_bound,
        })
    }
}
