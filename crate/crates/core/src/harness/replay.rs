use std::collections::BTreeMap;

use super::run::{score_entry, Report, ScoreEntry};
use super::HarnessError;
use crate::he::{backend_for, Ciphertext};
use crate::identity::RepHandle;
use crate::protocol::{EventLog, KeyManager, Payload, TranscryptRequest, TranscryptResponse, VerdictKind};
use crate::reputation::ReputationState;

/// Recomputes the report from the log alone. Keys are re-derived from the
/// header seed; every ciphertext is read from the log.
pub fn replay(log: &EventLog) -> Result<Report, HarnessError> {
    log.validate()?;
    let h = log.header()?;
    let be = backend_for::<f64>(h.he_params)?;

    let mut proposals: BTreeMap<&str, (&RepHandle, u64, &Ciphertext, &Ciphertext)> = BTreeMap::new();
    let mut committed: BTreeMap<RepHandle, ReputationState> = BTreeMap::new();
    for (_, _, m) in log.messages() {
        match &m.payload {
            Payload::TranscryptRequest {
                request:
                    TranscryptRequest::Normalize {
                        votee,
                        version,
                        numerator,
                        denominator,
                        ..
                    },
            } => {
                proposals.insert(&m.correlator, (votee, *version, numerator, denominator));
            }
            Payload::TranscryptResponse {
                response:
                    TranscryptResponse::Normalized {
                        verdict,
                        snapshot: Some(_),
                        replacement_numerator,
                        ..
                    },
            } => {
                let Some((votee, version, n, d)) = proposals.remove(m.correlator.as_str()) else {
                    return Err(HarnessError::Mismatch(format!(
                        "normalization response {} without a request",
                        m.correlator
                    )));
                };
                let numerator = match (verdict, replacement_numerator) {
                    (VerdictKind::Accept, _) => n.clone(),
                    (VerdictKind::Adjusted, Some(r)) => r.clone(),
                    _ => continue,
                };
                committed.insert(
                    votee.clone(),
                    ReputationState {
                        numerator,
                        denominator: d.clone(),
                        votee_key_id: d.key_id.clone(),
                        version,
                    },
                );
            }
            _ => {}
        }
    }

    let mut scores: BTreeMap<String, ScoreEntry> = BTreeMap::new();
    for (name, rep) in &h.directory {
        let entry = match committed.get(rep) {
            Some(st) => {
                let keys = be.keygen(&mut KeyManager::key_stream(h.seed, rep))?;
                if keys.key_id != st.votee_key_id {
                    return Err(HarnessError::Mismatch(format!(
                        "re-derived key for {name} does not match the logged ciphertexts"
                    )));
                }
                score_entry(be.as_ref(), &h.profile, h.dims, rep, Some((st, &keys.secret_key)))
            }
            None => score_entry(be.as_ref(), &h.profile, h.dims, rep, None),
        };
        scores.insert(name.clone(), entry);
    }
    Report::from_log(log, scores)
}
