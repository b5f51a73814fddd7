//! Homomorphic arithmetic layer.
//!
//! Every backend implements [`HeBackend`]: vector encryption under a
//! per-owner key, ciphertext addition and multiplication with a finite
//! multiplicative depth, plaintext-constant operations, and worst-case
//! approximation-error accounting carried on each [`Ciphertext`].
//!
//! Two backends exist. [`SimBackend`] keeps the true value next to an
//! injected, seeded error term and enforces the same key, level and error
//! contract as the real scheme; it is always built. `LatticeBackend`
//! (feature `lattice`) is an RLWE approximate-arithmetic scheme over
//! `Z_{2^k}[X]/(X^N + 1)`.

mod sim;
#[cfg(feature = "lattice")]
mod lattice;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Scalar;

#[cfg(feature = "lattice")]
pub use lattice::LatticeBackend;
pub use sim::SimBackend;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("key mismatch: expected {expected}, found {found}")]
    KeyMismatch { expected: String, found: String },
    #[error("vector of length {len} exceeds slot count {slots}")]
    VectorTooLong { len: usize, slots: usize },
    #[error("length mismatch: ciphertext holds {expected} slots, operand has {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("multiplicative depth exhausted (level {level})")]
    DepthExhausted { level: u32 },
    #[error("corrupted ciphertext payload: {0}")]
    Corrupted(String),
    #[error("non-finite plaintext value")]
    NonFinite,
    #[error("plaintext magnitude {0} exceeds backend headroom")]
    MagnitudeOverflow(f64),
    #[error("backend {0:?} is not available in this build")]
    Unavailable(BackendKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Simulation,
    Lattice,
}

impl BackendKind {
    pub fn label(self) -> &'static str {
        match self {
            BackendKind::Simulation => "simulation",
            BackendKind::Lattice => "lattice",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeParams {
    pub slot_count: usize,
    pub depth_budget: u32,
    pub epsilon: f64,
    pub backend_kind: BackendKind,
}

impl Default for HeParams {
    fn default() -> Self {
        HeParams {
            slot_count: 8,
            depth_budget: 3,
            epsilon: 1e-6,
            backend_kind: BackendKind::Simulation,
        }
    }
}

impl HeParams {
    pub fn validate(&self) -> Result<(), HeError> {
        if self.slot_count == 0 {
            return Err(HeError::InvalidParams("slot_count must be at least 1".into()));
        }
        if self.depth_budget < 2 {
            return Err(HeError::InvalidParams("depth_budget must be at least 2".into()));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(HeError::InvalidParams(
                "epsilon must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyId(pub String);

impl std::fmt::Display for KeyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKey {
    pub key_id: KeyId,
    #[serde(with = "b64")]
    pub bytes: Vec<u8>,
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretKey {
    pub key_id: KeyId,
    #[serde(with = "b64")]
    pub bytes: Vec<u8>,
}

impl std::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecretKey")
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalKey {
    pub key_id: KeyId,
    #[serde(with = "b64")]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyMaterial {
    pub key_id: KeyId,
    pub public_key: PublicKey,
    pub secret_key: SecretKey,
    pub eval_key: EvalKey,
}

/// Serialized form is the `{key_id, level, error_bound, payload}` envelope
/// with a base64 payload; it round-trips exactly through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ciphertext {
    pub key_id: KeyId,
    pub level: u32,
    pub error_bound: f64,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub level: u32,
    pub error_bound: f64,
}

pub fn noise_report(ct: &Ciphertext) -> NoiseReport {
    NoiseReport {
        level: ct.level,
        error_bound: ct.error_bound,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainVector<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> PlainVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        PlainVector { values }
    }

    pub fn from_f64(values: &[f64]) -> Self {
        PlainVector {
            values: values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        }
    }

    pub fn splat(v: T, len: usize) -> Self {
        PlainVector { values: vec![v; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub(crate) fn checked_f64(&self) -> Result<Vec<f64>, HeError> {
        let out = self.to_f64();
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(HeError::NonFinite)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarOp {
    Add,
    Mul,
}

/// Contract shared by all homomorphic backends.
///
/// Error bounds compose per backend; the simulation rule is additive
/// (`add: a + b`, `mul: a + b + epsilon`) and the lattice backend documents
/// its own worst-case formulas. Decrypting any ciphertext yields values
/// within `error_bound` of the exact result of the operation chain.
pub trait HeBackend<T: Scalar>: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn params(&self) -> &HeParams;
    /// Error bound carried by a fresh encryption.
    fn fresh_error(&self) -> f64;
    /// Whether plaintext multiplication consumes one level.
    fn plain_mul_consumes_level(&self) -> bool;

    fn keygen(&self, rng: &mut dyn RngCore) -> Result<KeyMaterial, HeError>;
    fn encrypt(
        &self,
        pk: &PublicKey,
        pt: &PlainVector<T>,
        rng: &mut dyn RngCore,
    ) -> Result<Ciphertext, HeError>;
    fn decrypt(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<PlainVector<T>, HeError>;
    fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, HeError>;
    fn mul(
        &self,
        a: &Ciphertext,
        b: &Ciphertext,
        ek: &EvalKey,
        rng: &mut dyn RngCore,
    ) -> Result<Ciphertext, HeError>;
    fn scalar(
        &self,
        op: ScalarOp,
        a: &Ciphertext,
        p: &PlainVector<T>,
        rng: &mut dyn RngCore,
    ) -> Result<Ciphertext, HeError>;
}

/// Builds the backend named by `params.backend_kind`.
pub fn backend_for<T: Scalar>(params: HeParams) -> Result<Box<dyn HeBackend<T>>, HeError> {
    match params.backend_kind {
        BackendKind::Simulation => Ok(Box::new(SimBackend::<T>::new(params)?)),
        #[cfg(feature = "lattice")]
        BackendKind::Lattice => Ok(Box::new(LatticeBackend::<T>::new(params)?)),
        #[cfg(not(feature = "lattice"))]
        BackendKind::Lattice => Err(HeError::Unavailable(BackendKind::Lattice)),
    }
}

pub fn lattice_available() -> bool {
    cfg!(feature = "lattice")
}

pub(crate) fn check_same_key(a: &KeyId, b: &KeyId) -> Result<(), HeError> {
    if a == b {
        Ok(())
    } else {
        Err(HeError::KeyMismatch {
            expected: a.0.clone(),
            found: b.0.clone(),
        })
    }
}

pub(crate) fn fresh_key_id(rng: &mut dyn RngCore) -> KeyId {
    let mut raw = [0u8; 16];
    rng.fill_bytes(&mut raw);
    KeyId(format!("key:{}", hex::encode(raw)))
}

/// 8-byte integrity tag binding a payload body to its key id.
pub(crate) fn payload_tag(key_id: &KeyId, body: &[u8]) -> [u8; 8] {
    let mut h = Sha256::new();
    h.update(key_id.0.as_bytes());
    h.update([0u8]);
    h.update(body);
    let digest = h.finalize();
    let mut tag = [0u8; 8];
    tag.copy_from_slice(&digest[..8]);
    tag
}

pub(crate) fn seal_payload(key_id: &KeyId, mut body: Vec<u8>) -> Vec<u8> {
    let tag = payload_tag(key_id, &body);
    body.extend_from_slice(&tag);
    body
}

pub(crate) fn open_payload<'a>(key_id: &KeyId, payload: &'a [u8]) -> Result<&'a [u8], HeError> {
    if payload.len() < 9 {
        return Err(HeError::Corrupted("payload too short".into()));
    }
    let (body, tag) = payload.split_at(payload.len() - 8);
    if payload_tag(key_id, body) != tag {
        return Err(HeError::Corrupted("integrity tag mismatch".into()));
    }
    Ok(body)
}

/// Checks the payload's integrity tag without any key material.
pub fn payload_intact(ct: &Ciphertext) -> bool {
    open_payload(&ct.key_id, &ct.payload).is_ok()
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}
