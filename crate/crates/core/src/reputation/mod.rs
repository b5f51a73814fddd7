//! Reputation algebra over encrypted running pairs, plus the plaintext
//! aggregation catalog used as an oracle.

mod catalog;
mod encrypted;

pub use catalog::{aggregate_plain, AggregationError};
pub use encrypted::{
    bootstrap_reputation, combine_encrypted, finalize_score, update_state, ReputationError,
    ReputationState,
};

use serde::{Deserialize, Serialize};

use crate::he::PlainVector;
use crate::scalar::Scalar;

/// Per-dimension rating; every component lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RatingVector<T> {
    pub dims: Vec<T>,
}

impl<T: Scalar> RatingVector<T> {
    /// Returns `None` when any component is outside `[0, 1]` or not finite.
    pub fn new(dims: Vec<T>) -> Option<Self> {
        let ok = dims
            .iter()
            .all(|v| v.is_finite_val() && *v >= T::zero() && *v <= T::one());
        ok.then_some(RatingVector { dims })
    }

    pub fn from_f64(dims: &[f64]) -> Option<Self> {
        Self::new(dims.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn splat(v: T, d: usize) -> Self {
        RatingVector { dims: vec![v.clamp_unit(); d] }
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn mean(&self) -> T {
        if self.dims.is_empty() {
            return T::zero();
        }
        let n = T::from_usize(self.dims.len()).unwrap_or_else(T::one);
        self.dims.iter().fold(T::zero(), |a, &b| a + b) / n
    }

    pub fn min(&self) -> T {
        self.dims
            .iter()
            .copied()
            .fold(None, |m: Option<T>, v| Some(match m {
                Some(m) if m < v => m,
                _ => v,
            }))
            .unwrap_or_else(T::zero)
    }

    pub fn to_plain(&self) -> PlainVector<T> {
        PlainVector::new(self.dims.clone())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.dims.iter().map(|v| v.to_f64_lossy()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry<T> {
    pub weight: T,
    pub rating: RatingVector<T>,
    pub timestamp: u64,
}

/// Append-only feedback log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackHistory<T> {
    entries: Vec<FeedbackEntry<T>>,
}

impl<T> Default for FeedbackHistory<T> {
    fn default() -> Self {
        FeedbackHistory { entries: Vec::new() }
    }
}

impl<T: Scalar> FeedbackHistory<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, weight: T, rating: RatingVector<T>, timestamp: u64) {
        self.entries.push(FeedbackEntry {
            weight,
            rating,
            timestamp,
        });
    }

    pub fn entries(&self) -> &[FeedbackEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<T: Scalar> FromIterator<(T, RatingVector<T>)> for FeedbackHistory<T> {
    fn from_iter<I: IntoIterator<Item = (T, RatingVector<T>)>>(iter: I) -> Self {
        let mut h = FeedbackHistory::new();
        for (i, (w, r)) in iter.into_iter().enumerate() {
            h.push(w, r, i as u64);
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSet {
    /// Continuous ratings within `[lo, hi]`.
    Interval([f64; 2]),
    /// Ratings are exactly 0 or 1.
    Binary,
}

impl FeedbackSet {
    pub fn admits(&self, v: f64) -> bool {
        match *self {
            FeedbackSet::Interval([lo, hi]) => v >= lo && v <= hi,
            FeedbackSet::Binary => v == 0.0 || v == 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Single,
    Multiple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationModel {
    Sum,
    Mean,
    Median,
    WeightedMean,
    Beta,
}

/// How per-dimension scores are reduced to one value for threshold queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionAggregate {
    Mean,
    Min,
}

impl DimensionAggregate {
    pub fn apply<T: Scalar>(self, v: &RatingVector<T>) -> T {
        match self {
            DimensionAggregate::Mean => v.mean(),
            DimensionAggregate::Min => v.min(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemProfile {
    pub feedback_set: FeedbackSet,
    pub granularity: Granularity,
    /// Whether negative-impact feedback is accepted.
    pub liveliness: bool,
    pub visibility: Visibility,
    /// Stored running state when true, recomputation from history otherwise.
    pub durability: bool,
    /// Whether scores may decrease.
    pub non_monotonicity: bool,
    pub aggregation_model: AggregationModel,
    pub prior_value: f64,
    pub prior_weight: f64,
    pub threshold_aggregate: DimensionAggregate,
}

impl Default for SystemProfile {
    fn default() -> Self {
        SystemProfile {
            feedback_set: FeedbackSet::Interval([0.0, 1.0]),
            granularity: Granularity::Multiple,
            liveliness: true,
            visibility: Visibility::Global,
            durability: true,
            non_monotonicity: true,
            aggregation_model: AggregationModel::WeightedMean,
            prior_value: 0.5,
            prior_weight: 1.0,
            threshold_aggregate: DimensionAggregate::Mean,
        }
    }
}

/// Ratings below this (dimension mean) count as negative impact.
pub const NEGATIVE_IMPACT_BELOW: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict<T> {
    Accept,
    Reject,
    Adjusted(RatingVector<T>),
}

/// Applies the liveliness and monotonicity rules to a proposed update.
///
/// `feedback` is the rating whose impact is judged; `old` and `new` are the
/// finalized scores before and after the update.
pub fn enforce_profile<T: Scalar>(
    profile: &SystemProfile,
    old: &RatingVector<T>,
    new: &RatingVector<T>,
    feedback: &RatingVector<T>,
) -> Verdict<T> {
    if !profile.liveliness && feedback.mean() < T::from_f64_lossy(NEGATIVE_IMPACT_BELOW) {
        return Verdict::Reject;
    }
    if !profile.non_monotonicity && new.dims.iter().zip(&old.dims).any(|(n, o)| n < o) {
        let dims = new
            .dims
            .iter()
            .zip(&old.dims)
            .map(|(&n, &o)| n.max_of(o))
            .collect();
        return Verdict::Adjusted(RatingVector { dims });
    }
    Verdict::Accept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rv(v: &[f64]) -> RatingVector<f64> {
        RatingVector::from_f64(v).unwrap()
    }

    #[test]
    fn rating_vectors_reject_out_of_range() {
        assert!(RatingVector::<f64>::from_f64(&[0.0, 1.0]).is_some());
        assert!(RatingVector::<f64>::from_f64(&[1.1]).is_none());
        assert!(RatingVector::<f64>::from_f64(&[f64::NAN]).is_none());
    }

    #[test]
    fn monotonic_profile_clamps() {
        let p = SystemProfile {
            non_monotonicity: false,
            ..SystemProfile::default()
        };
        assert_eq!(
            enforce_profile(&p, &rv(&[0.7]), &rv(&[0.6]), &rv(&[0.3])),
            Verdict::Adjusted(rv(&[0.7]))
        );
        assert_eq!(enforce_profile(&p, &rv(&[0.7]), &rv(&[0.8]), &rv(&[0.9])), Verdict::Accept);
    }

    #[test]
    fn liveliness_rejects_negative_feedback() {
        let p = SystemProfile {
            liveliness: false,
            ..SystemProfile::default()
        };
        assert_eq!(enforce_profile(&p, &rv(&[0.7]), &rv(&[0.6]), &rv(&[0.2])), Verdict::Reject);
        assert_eq!(enforce_profile(&p, &rv(&[0.7]), &rv(&[0.6]), &rv(&[0.5])), Verdict::Accept);
    }

    #[test]
    fn permissive_profile_accepts_verbatim() {
        let p = SystemProfile::default();
        for (o, n, f) in [(0.9, 0.1, 0.0), (0.1, 0.9, 1.0), (0.5, 0.5, 0.49)] {
            assert_eq!(enforce_profile(&p, &rv(&[o]), &rv(&[n]), &rv(&[f])), Verdict::Accept);
        }
    }

    #[test]
    fn profile_json_uses_catalog_keys() {
        let p: SystemProfile = serde_json::from_str(
            r#"{"feedback_set":"binary","granularity":"single","liveliness":false,
                "visibility":"global","durability":false,"non_monotonicity":false,
                "aggregation_model":"beta"}"#,
        )
        .unwrap();
        assert_eq!(p.aggregation_model, AggregationModel::Beta);
        assert_eq!(p.prior_value, 0.5);
        assert!(serde_json::from_str::<SystemProfile>(r#"{"aggregation_model":"mode"}"#).is_err());
        assert!(serde_json::from_str::<SystemProfile>(r#"{"colour":1}"#).is_err());
    }

    #[test]
    fn dimension_aggregates() {
        let v = rv(&[0.2, 0.6]);
        assert!((DimensionAggregate::Mean.apply(&v) - 0.4).abs() < 1e-12);
        assert_eq!(DimensionAggregate::Min.apply(&v), 0.2);
    }
}
