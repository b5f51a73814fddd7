use thiserror::Error;

use super::{AggregationModel, FeedbackHistory, RatingVector, NEGATIVE_IMPACT_BELOW};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AggregationError {
    #[error("aggregation model {0:?} is undefined on an empty history")]
    EmptyHistory(AggregationModel),
    #[error("weights sum to zero")]
    ZeroWeight,
    #[error("entries have differing dimension counts")]
    RaggedHistory,
}

/// Per-dimension plaintext aggregation.
///
/// `sum` is `Σ w·r`; `mean` ignores weights; `median` is the lower median;
/// `beta` is `(p + 1) / (p + n + 2)` with `r ≥ 0.5` counted positive.
/// `sum` and `beta` are defined on an empty history (zeros and `1/2`).
pub fn aggregate_plain<T: Scalar>(
    model: AggregationModel,
    h: &FeedbackHistory<T>,
) -> Result<RatingVector<T>, AggregationError> {
    let entries = h.entries();
    let d = entries.first().map(|e| e.rating.len()).unwrap_or(1);
    if entries.iter().any(|e| e.rating.len() != d) {
        return Err(AggregationError::RaggedHistory);
    }
    if entries.is_empty() && matches!(model, AggregationModel::Mean | AggregationModel::Median | AggregationModel::WeightedMean) {
        return Err(AggregationError::EmptyHistory(model));
    }
    let count = T::from_usize(entries.len()).unwrap_or_else(T::zero);
    let threshold = T::from_f64_lossy(NEGATIVE_IMPACT_BELOW);
    let mut dims = Vec::with_capacity(d);
    for k in 0..d {
        let col = entries.iter().map(|e| (e.weight, e.rating.dims[k]));
        let v = match model {
            AggregationModel::Sum => col.fold(T::zero(), |a, (w, r)| a + w * r),
            AggregationModel::Mean => col.fold(T::zero(), |a, (_, r)| a + r) / count,
            AggregationModel::WeightedMean => {
                let (num, den) = col.fold((T::zero(), T::zero()), |(n, d), (w, r)| (n + w * r, d + w));
                if den == T::zero() {
                    return Err(AggregationError::ZeroWeight);
                }
                num / den
            }
            AggregationModel::Median => {
                let mut rs: Vec<T> = col.map(|(_, r)| r).collect();
                rs.sort_by(|a, b| a.partial_cmp(b).expect("ratings are finite"));
                rs[(rs.len() - 1) / 2]
            }
            AggregationModel::Beta => {
                let p = col.filter(|(_, r)| *r >= threshold).count();
                let n = entries.len() - p;
                T::from_usize(p + 1).unwrap() / T::from_usize(p + n + 2).unwrap()
            }
        };
        dims.push(v);
    }
    Ok(RatingVector { dims })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    fn hist(pairs: &[(f64, f64)]) -> FeedbackHistory<f64> {
        pairs
            .iter()
            .map(|&(w, r)| (w, RatingVector::from_f64(&[r]).unwrap()))
            .collect()
    }

    fn one(model: AggregationModel, pairs: &[(f64, f64)]) -> f64 {
        aggregate_plain(model, &hist(pairs)).unwrap().dims[0]
    }

    #[test]
    fn reference_values() {
        assert!((one(AggregationModel::Mean, &[(1.0, 0.4), (1.0, 0.6)]) - 0.5).abs() < 1e-15);
        let beta = one(
            AggregationModel::Beta,
            &[(1.0, 0.9), (1.0, 0.5), (1.0, 0.7), (1.0, 0.1)],
        );
        assert!((beta - 4.0 / 6.0).abs() < 1e-15);
        assert!((one(AggregationModel::WeightedMean, &[(1.0, 0.8), (3.0, 0.4)]) - 0.5).abs() < 1e-15);
        assert_eq!(one(AggregationModel::Median, &[(1.0, 0.9), (1.0, 0.1), (1.0, 0.5), (1.0, 0.7)]), 0.5);
    }

    #[test]
    fn empty_history() {
        let h = FeedbackHistory::<f64>::new();
        for m in [AggregationModel::Mean, AggregationModel::Median, AggregationModel::WeightedMean] {
            assert_eq!(aggregate_plain(m, &h), Err(AggregationError::EmptyHistory(m)));
        }
        assert_eq!(aggregate_plain(AggregationModel::Sum, &h).unwrap().dims, vec![0.0]);
        assert_eq!(aggregate_plain(AggregationModel::Beta, &h).unwrap().dims, vec![0.5]);
    }

    #[test]
    fn zero_weights_and_ragged_entries() {
        assert_eq!(
            aggregate_plain(AggregationModel::WeightedMean, &hist(&[(0.0, 0.3)])),
            Err(AggregationError::ZeroWeight)
        );
        let mut h = hist(&[(1.0, 0.3)]);
        h.push(1.0, RatingVector::from_f64(&[0.1, 0.2]).unwrap(), 9);
        assert_eq!(aggregate_plain(AggregationModel::Sum, &h), Err(AggregationError::RaggedHistory));
    }

    #[test]
    fn exact_rationals() {
        let q = |n: i64, d: i64| Ratio::new(n, d);
        let h: FeedbackHistory<Ratio<i64>> = [(q(1, 1), q(1, 3)), (q(2, 1), q(2, 3))]
            .into_iter()
            .map(|(w, r)| (w, RatingVector::new(vec![r]).unwrap()))
            .collect();
        assert_eq!(aggregate_plain(AggregationModel::WeightedMean, &h).unwrap().dims, vec![q(5, 9)]);
        assert_eq!(aggregate_plain(AggregationModel::Sum, &h).unwrap().dims, vec![q(5, 3)]);
        assert_eq!(aggregate_plain(AggregationModel::Mean, &h).unwrap().dims, vec![q(1, 2)]);
    }

    proptest::proptest! {
        #[test]
        fn averages_stay_within_rating_range(
            pairs in proptest::collection::vec((0.01f64..10.0, 0.0f64..=1.0), 1..20)
        ) {
            let lo = pairs.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let hi = pairs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            for model in [AggregationModel::Mean, AggregationModel::Median, AggregationModel::WeightedMean] {
                let v = one(model, &pairs);
                proptest::prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{model:?} gave {v}");
            }
            let b = one(AggregationModel::Beta, &pairs);
            proptest::prop_assert!(b > 0.0 && b < 1.0);
        }
    }
}
