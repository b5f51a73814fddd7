use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::crypto;
use crate::he::HeParams;
use crate::identity::AuthorityConfig;
use crate::protocol::{EnginePolicy, Misbehavior, QueryMode, RateRequest};
use crate::reputation::{AggregationModel, Granularity, SystemProfile, Visibility};

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

fn yes() -> bool {
    true
}

fn unknown_jurisdiction() -> String {
    "XX".into()
}

fn round_robin() -> EnginePolicy {
    EnginePolicy::RoundRobin
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusinessSpec {
    pub name: String,
    #[serde(default = "unknown_jurisdiction")]
    pub jurisdiction: String,
    /// Source for self-ratings; when absent the business never self-rates.
    #[serde(default)]
    pub self_rating: Option<Vec<f64>>,
    #[serde(default = "yes")]
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    Contract {
        a: String,
        b: String,
        #[serde(default)]
        metadata: String,
    },
    Rate {
        voter: String,
        votee: String,
        rating: Vec<f64>,
        #[serde(default)]
        with_self_rating: Option<bool>,
        #[serde(default)]
        misbehavior: Option<Misbehavior>,
    },
    Query {
        requester: String,
        votee: String,
        mode: QueryMode,
    },
    AdvanceEpoch {
        #[serde(default = "one_epoch")]
        count: u64,
    },
    Depart {
        business: String,
    },
}

fn one_epoch() -> u64 {
    1
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::Contract { .. } => "contract",
            Event::Rate { .. } => "rate",
            Event::Query { .. } => "query",
            Event::AdvanceEpoch { .. } => "advance_epoch",
            Event::Depart { .. } => "depart",
        }
    }

    pub fn rate_request(&self) -> Option<RateRequest> {
        match self {
            Event::Rate {
                voter,
                votee,
                rating,
                with_self_rating,
                misbehavior,
            } => Some(RateRequest {
                voter: voter.clone(),
                votee: votee.clone(),
                rating: rating.clone(),
                with_self_rating: *with_self_rating,
                misbehavior: *misbehavior,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default = "one")]
    pub dims: usize,
    #[serde(default = "three")]
    pub engine_count: usize,
    #[serde(default = "round_robin")]
    pub engine_policy: EnginePolicy,
    #[serde(default)]
    pub system_profile: SystemProfile,
    #[serde(default)]
    pub he_params: HeParams,
    #[serde(default)]
    pub authority: AuthorityConfig,
    pub businesses: Vec<BusinessSpec>,
    pub events: Vec<Event>,
}

impl Scenario {
    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        crypto::sha256_hex(&[&serde_json::to_vec(self).expect("scenario serializes")])
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let p = &self.system_profile;
        if p.visibility == Visibility::Local {
            return Err(HarnessError::Unsupported(
                "system_profile.visibility: local visibility is not supported".into(),
            ));
        }
        if p.aggregation_model != AggregationModel::WeightedMean {
            return Err(HarnessError::Unsupported(format!(
                "system_profile.aggregation_model: the encrypted pipeline runs weighted_mean only, got {:?}",
                p.aggregation_model
            )));
        }
        if self.dims == 0 {
            return Err(HarnessError::Invalid("dims: must be at least 1".into()));
        }
        if p.granularity == Granularity::Single && self.dims != 1 {
            return Err(HarnessError::Invalid("dims: single granularity requires one dimension".into()));
        }
        if self.engine_count == 0 {
            return Err(HarnessError::Invalid("engine_count: must be at least 1".into()));
        }
        let check_vector = |path: String, v: &[f64]| {
            if v.len() != self.dims || v.iter().any(|x| !p.feedback_set.admits(*x)) {
                Err(HarnessError::Invalid(format!(
                    "{path}: expected {} values in the feedback set",
                    self.dims
                )))
            } else {
                Ok(())
            }
        };
        let mut names = BTreeSet::new();
        for (i, b) in self.businesses.iter().enumerate() {
            if b.name.is_empty() || !names.insert(b.name.as_str()) {
                return Err(HarnessError::Invalid(format!(
                    "businesses[{i}].name: empty or duplicate name {:?}",
                    b.name
                )));
            }
            if let Some(v) = &b.self_rating {
                check_vector(format!("businesses[{i}].self_rating"), v)?;
            }
        }
        let known = |i: usize, field: &str, name: &str| {
            if names.contains(name) {
                Ok(())
            } else {
                Err(HarnessError::UnknownBusiness {
                    event: i,
                    field: field.to_string(),
                    name: name.to_string(),
                })
            }
        };
        let mut contracts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (i, e) in self.events.iter().enumerate() {
            match e {
                Event::Contract { a, b, .. } => {
                    known(i, "a", a)?;
                    known(i, "b", b)?;
                    if a == b {
                        return Err(HarnessError::Invalid(format!("events[{i}]: a business cannot contract itself")));
                    }
                    *contracts.entry((a, b)).or_default() += 1;
                    *contracts.entry((b, a)).or_default() += 1;
                }
                Event::Rate {
                    voter, votee, rating, ..
                } => {
                    known(i, "voter", voter)?;
                    known(i, "votee", votee)?;
                    check_vector(format!("events[{i}].rating"), rating)?;
                    if !contracts.contains_key(&(voter.as_str(), votee.as_str())) {
                        return Err(HarnessError::DanglingRating { event: i });
                    }
                }
                Event::Query { requester, votee, .. } => {
                    known(i, "requester", requester)?;
                    known(i, "votee", votee)?;
                }
                Event::Depart { business } => known(i, "business", business)?,
                Event::AdvanceEpoch { .. } => {}
            }
        }
        Ok(())
    }
}

/// Parses and validates a scenario, reporting schema errors with the field
/// path and source position.
pub fn parse_scenario(text: &str) -> Result<Scenario, HarnessError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        HarnessError::Schema {
            path: e.path().to_string(),
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    s.validate()?;
    Ok(s)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, HarnessError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    parse_scenario(&text)
}
