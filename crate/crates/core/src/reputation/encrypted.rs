use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{RatingVector, SystemProfile};
use crate::he::{Ciphertext, EvalKey, HeBackend, HeError, KeyId, PublicKey, SecretKey};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReputationError {
    #[error(transparent)]
    He(#[from] HeError),
    #[error("reputation state has no weight yet")]
    EmptyState,
    #[error("state holds {expected} dimensions, update has {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Encrypted running pair `(N, D)`; the score is `N / D` per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReputationState {
    pub numerator: Ciphertext,
    pub denominator: Ciphertext,
    pub votee_key_id: KeyId,
    pub version: u64,
}

impl ReputationState {
    /// Fresh state with the profile prior folded in.
    pub fn initial<T: Scalar>(
        be: &dyn HeBackend<T>,
        pk: &PublicKey,
        profile: &SystemProfile,
        dims: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self, ReputationError> {
        let (value, weight) = bootstrap_reputation::<T>(profile, dims);
        let n: Vec<T> = value.dims.iter().map(|&v| v * weight).collect();
        let numerator = be.encrypt(pk, &crate::he::PlainVector::new(n), rng)?;
        let denominator = be.encrypt(pk, &crate::he::PlainVector::splat(weight, dims), rng)?;
        Ok(ReputationState {
            numerator,
            denominator,
            votee_key_id: pk.key_id.clone(),
            version: 0,
        })
    }
}

/// Newcomer prior: value per dimension and its weight.
pub fn bootstrap_reputation<T: Scalar>(profile: &SystemProfile, dims: usize) -> (RatingVector<T>, T) {
    (
        RatingVector::splat(T::from_f64_lossy(profile.prior_value), dims),
        T::from_f64_lossy(profile.prior_weight.max(0.0)),
    )
}

/// `S = R_r⊗S_r ⊕ R_e⊗S_e`, `W = R_r ⊕ R_e`; without a self-rating,
/// `S = R_r⊗S_r` and `W = R_r`. Consumes one level.
pub fn combine_encrypted<T: Scalar>(
    be: &dyn HeBackend<T>,
    ek: &EvalKey,
    s_r: &Ciphertext,
    s_e: Option<&Ciphertext>,
    r_r: &Ciphertext,
    r_e: &Ciphertext,
    rng: &mut dyn RngCore,
) -> Result<(Ciphertext, Ciphertext), ReputationError> {
    let voter_part = be.mul(r_r, s_r, ek, rng)?;
    match s_e {
        None => Ok((voter_part, r_r.clone())),
        Some(s_e) => {
            let votee_part = be.mul(r_e, s_e, ek, rng)?;
            Ok((be.add(&voter_part, &votee_part)?, be.add(r_r, r_e)?))
        }
    }
}

/// `N' = N ⊕ S`, `D' = D ⊕ W`, version + 1.
pub fn update_state<T: Scalar>(
    be: &dyn HeBackend<T>,
    st: &ReputationState,
    s: &Ciphertext,
    w: &Ciphertext,
) -> Result<ReputationState, ReputationError> {
    for ct in [s, w] {
        if ct.key_id != st.votee_key_id {
            return Err(HeError::KeyMismatch {
                expected: st.votee_key_id.0.clone(),
                found: ct.key_id.0.clone(),
            }
            .into());
        }
    }
    Ok(ReputationState {
        numerator: be.add(&st.numerator, s)?,
        denominator: be.add(&st.denominator, w)?,
        votee_key_id: st.votee_key_id.clone(),
        version: st.version + 1,
    })
}

/// Decrypts and divides per dimension, clamping to `[0, 1]`.
///
/// A denominator within its own error bound of zero counts as empty.
pub fn finalize_score<T: Scalar>(
    be: &dyn HeBackend<T>,
    st: &ReputationState,
    sk: &SecretKey,
) -> Result<RatingVector<T>, ReputationError> {
    let n = be.decrypt(sk, &st.numerator)?;
    let d = be.decrypt(sk, &st.denominator)?;
    if n.len() != d.len() {
        return Err(ReputationError::DimensionMismatch {
            expected: d.len(),
            found: n.len(),
        });
    }
    let floor = T::from_f64_lossy(st.denominator.error_bound);
    let mut dims = Vec::with_capacity(n.len());
    for (&num, &den) in n.values.iter().zip(&d.values) {
        if den <= floor || den <= T::zero() {
            return Err(ReputationError::EmptyState);
        }
        dims.push((num / den).clamp_unit());
    }
    Ok(RatingVector { dims })
}
