//! Registration, temporary pseudonyms, contract-bound voting tickets and
//! one-time access tokens.
//!
//! The [`Authority`] is the only holder of the mapping from handles to
//! [`BusinessId`]s. It is also the ticket issuer; the two roles are merged
//! and reports flag the merge. Every mutating call is an atomic
//! check-and-set on the authority's state, so wrapping the authority in a
//! mutex makes it the serialization point for concurrent spends.

use std::collections::BTreeMap;

use ed25519_dalek::{SigningKey, VerifyingKey};
use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, hex_bytes};

macro_rules! handle_type {
    ($(#[$m:meta])* $name:ident, $prefix:literal) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub const PREFIX: &'static str = $prefix;

            fn fresh(rng: &mut dyn RngCore) -> Self {
                $name(format!("{}{}", $prefix, crypto::random_hex(rng, 16)))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

handle_type!(
    /// Long-term business identity; confined to the authority.
    BusinessId,
    "bid:"
);
handle_type!(
    /// Temporary, per-relationship pseudonym handle.
    PseudonymHandle,
    "psn:"
);
handle_type!(
    /// Stable public handle a business's reputation is filed under.
    RepHandle,
    "rep:"
);
handle_type!(TicketId, "tkt:");
handle_type!(TokenId, "tok:");
handle_type!(
    /// Per-token alias of a reputation record.
    RecordRef,
    "ref:"
);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("legal identity {0:?} is already registered")]
    Duplicate(String),
    #[error("unknown business {0}")]
    UnknownBusiness(String),
    #[error("unknown pseudonym {0}")]
    UnknownPseudonym(String),
    #[error("pseudonym {0} has expired")]
    ExpiredPseudonym(String),
    #[error("pseudonym signature does not verify")]
    BadPseudonymSignature,
    #[error("a business cannot contract with itself")]
    SelfContract,
    #[error("pseudonym does not belong to contract party {0}")]
    PartyMismatch(String),
    #[error("unknown ticket {0}")]
    UnknownTicket(String),
    #[error("ticket already spent")]
    AlreadySpent,
    #[error("ticket outside its validity window")]
    TicketExpired,
    #[error("unknown access token")]
    UnknownToken,
    #[error("access token already redeemed")]
    AlreadyRedeemed,
    #[error("unknown record reference")]
    UnknownRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuthorityConfig {
    pub epoch_length: u64,
    pub pseudonym_lifetime_epochs: u64,
    pub ticket_window: u64,
}

impl Default for AuthorityConfig {
    fn default() -> Self {
        AuthorityConfig {
            epoch_length: 100,
            pseudonym_lifetime_epochs: 10,
            ticket_window: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pseudonym {
    pub handle: PseudonymHandle,
    pub epoch: u64,
    #[serde(with = "hex_bytes")]
    pub authority_signature: Vec<u8>,
}

#[derive(Serialize)]
struct PseudonymClaim<'a> {
    handle: &'a PseudonymHandle,
    epoch: u64,
}

impl Pseudonym {
    fn claim(&self) -> PseudonymClaim<'_> {
        PseudonymClaim {
            handle: &self.handle,
            epoch: self.epoch,
        }
    }

    pub fn signature_valid(&self, authority: &VerifyingKey) -> bool {
        crypto::verify_canonical(authority, &self.claim(), &self.authority_signature)
    }

    pub fn expired_at(&self, epoch: u64, lifetime_epochs: u64) -> bool {
        epoch < self.epoch || epoch - self.epoch >= lifetime_epochs
    }
}

/// Signature check plus expiry, as every relying party performs it.
pub fn verify_pseudonym(
    p: &Pseudonym,
    authority: &VerifyingKey,
    current_epoch: u64,
    lifetime_epochs: u64,
) -> Result<(), IdentityError> {
    if !p.signature_valid(authority) {
        return Err(IdentityError::BadPseudonymSignature);
    }
    if p.expired_at(current_epoch, lifetime_epochs) {
        return Err(IdentityError::ExpiredPseudonym(p.handle.0.clone()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractEvent {
    pub party_a: BusinessId,
    pub party_b: BusinessId,
    pub metadata: String,
    pub timestamp: u64,
}

impl ContractEvent {
    pub fn digest(&self) -> String {
        crypto::sha256_hex(&[
            self.party_a.0.as_bytes(),
            self.party_b.0.as_bytes(),
            self.metadata.as_bytes(),
            &self.timestamp.to_le_bytes(),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VotingTicket {
    pub ticket_id: TicketId,
    pub voter_pseudonym: PseudonymHandle,
    pub votee: RepHandle,
    pub contract_digest: String,
    pub issued_at: u64,
    pub spent: bool,
}

/// Proof that a ticket was spent for a rating of `votee`.
///
/// Carries the ticket's nullifier instead of the ticket id, and nothing
/// about the voter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionAuthorization {
    pub nullifier: String,
    pub votee: RepHandle,
    pub issued_at: u64,
    #[serde(with = "hex_bytes")]
    pub signature: Vec<u8>,
}

#[derive(Serialize)]
struct AuthorizationClaim<'a> {
    nullifier: &'a str,
    votee: &'a RepHandle,
    issued_at: u64,
}

impl SessionAuthorization {
    fn claim(&self) -> AuthorizationClaim<'_> {
        AuthorizationClaim {
            nullifier: &self.nullifier,
            votee: &self.votee,
            issued_at: self.issued_at,
        }
    }

    pub fn signature_valid(&self, authority: &VerifyingKey) -> bool {
        crypto::verify_canonical(authority, &self.claim(), &self.signature)
    }
}

pub fn ticket_nullifier(ticket: &TicketId) -> String {
    crypto::sha256_hex(&[b"nullifier", ticket.0.as_bytes()])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessToken {
    pub token_id: TokenId,
    pub bound_reputation_ref: RecordRef,
    pub redeemed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusinessRecord {
    pub id: BusinessId,
    pub legal_identity: String,
    pub jurisdiction: String,
    pub rep_handle: RepHandle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudonymRecord {
    pub business: BusinessId,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TicketRecord {
    pub ticket: VotingTicket,
    pub nullifier: String,
    pub contract: ContractEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub record: RecordRef,
    pub redeemed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorityEntry {
    pub tick: u64,
    pub op: String,
    pub subject: String,
    pub outcome: String,
}

/// Registration and pseudonym authority, merged with the ticket issuer.
pub struct Authority {
    config: AuthorityConfig,
    signing: SigningKey,
    rng: ChaCha20Rng,
    now: u64,
    legal: BTreeMap<String, BusinessId>,
    businesses: BTreeMap<BusinessId, BusinessRecord>,
    rep_owner: BTreeMap<RepHandle, BusinessId>,
    pseudonyms: BTreeMap<PseudonymHandle, PseudonymRecord>,
    tickets: BTreeMap<TicketId, TicketRecord>,
    tokens: BTreeMap<TokenId, TokenRecord>,
    refs: BTreeMap<RecordRef, RepHandle>,
    transcript: Vec<AuthorityEntry>,
}

impl Authority {
    pub fn new(config: AuthorityConfig, mut rng: ChaCha20Rng) -> Self {
        let signing = crypto::signing_key_from(&mut rng);
        Authority {
            config,
            signing,
            rng,
            now: 0,
            legal: BTreeMap::new(),
            businesses: BTreeMap::new(),
            rep_owner: BTreeMap::new(),
            pseudonyms: BTreeMap::new(),
            tickets: BTreeMap::new(),
            tokens: BTreeMap::new(),
            refs: BTreeMap::new(),
            transcript: Vec::new(),
        }
    }

    pub fn config(&self) -> &AuthorityConfig {
        &self.config
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Logical clock; never moves backwards.
    pub fn set_time(&mut self, tick: u64) {
        self.now = self.now.max(tick);
    }

    pub fn current_epoch(&self) -> u64 {
        self.now / self.config.epoch_length.max(1)
    }

    fn log(&mut self, op: &str, subject: &str, outcome: Result<(), &IdentityError>) {
        self.transcript.push(AuthorityEntry {
            tick: self.now,
            op: op.to_string(),
            subject: subject.to_string(),
            outcome: match outcome {
                Ok(()) => "ok".to_string(),
                Err(e) => e.to_string(),
            },
        });
    }

    fn logged<T>(
        &mut self,
        op: &str,
        subject: &str,
        r: Result<T, IdentityError>,
    ) -> Result<T, IdentityError> {
        self.log(op, subject, r.as_ref().map(|_| ()));
        r
    }

    pub fn register_business(
        &mut self,
        legal_identity: &str,
        jurisdiction: &str,
    ) -> Result<BusinessId, IdentityError> {
        let r = if self.legal.contains_key(legal_identity) {
            Err(IdentityError::Duplicate(legal_identity.to_string()))
        } else {
            let id = BusinessId::fresh(&mut self.rng);
            let rep = RepHandle::fresh(&mut self.rng);
            self.legal.insert(legal_identity.to_string(), id.clone());
            self.rep_owner.insert(rep.clone(), id.clone());
            self.businesses.insert(
                id.clone(),
                BusinessRecord {
                    id: id.clone(),
                    legal_identity: legal_identity.to_string(),
                    jurisdiction: jurisdiction.to_string(),
                    rep_handle: rep,
                },
            );
            Ok(id)
        };
        self.logged("register", legal_identity, r)
    }

    pub fn rep_handle(&self, b: &BusinessId) -> Result<RepHandle, IdentityError> {
        self.businesses
            .get(b)
            .map(|r| r.rep_handle.clone())
            .ok_or_else(|| IdentityError::UnknownBusiness(b.0.clone()))
    }

    pub fn issue_pseudonym(&mut self, b: &BusinessId, epoch: u64) -> Result<Pseudonym, IdentityError> {
        let r = if !self.businesses.contains_key(b) {
            Err(IdentityError::UnknownBusiness(b.0.clone()))
        } else {
            let handle = PseudonymHandle::fresh(&mut self.rng);
            let claim = PseudonymClaim {
                handle: &handle,
                epoch,
            };
            let authority_signature = crypto::sign_canonical(&self.signing, &claim);
            self.pseudonyms.insert(
                handle.clone(),
                PseudonymRecord {
                    business: b.clone(),
                    epoch,
                },
            );
            Ok(Pseudonym {
                handle,
                epoch,
                authority_signature,
            })
        };
        self.logged("issue_pseudonym", &b.0, r)
    }

    fn live_pseudonym(&self, h: &PseudonymHandle) -> Result<&PseudonymRecord, IdentityError> {
        let rec = self
            .pseudonyms
            .get(h)
            .ok_or_else(|| IdentityError::UnknownPseudonym(h.0.clone()))?;
        let epoch = self.current_epoch();
        if epoch < rec.epoch || epoch - rec.epoch >= self.config.pseudonym_lifetime_epochs {
            return Err(IdentityError::ExpiredPseudonym(h.0.clone()));
        }
        Ok(rec)
    }

    /// Issues one ticket per direction: `a` rates `b`, and `b` rates `a`.
    pub fn establish_contract(
        &mut self,
        e: &ContractEvent,
        pseudonym_a: &Pseudonym,
        pseudonym_b: &Pseudonym,
    ) -> Result<(VotingTicket, VotingTicket), IdentityError> {
        let r = self.establish_inner(e, pseudonym_a, pseudonym_b);
        let subject = e.digest();
        self.logged("establish_contract", &subject, r)
    }

    fn establish_inner(
        &mut self,
        e: &ContractEvent,
        pa: &Pseudonym,
        pb: &Pseudonym,
    ) -> Result<(VotingTicket, VotingTicket), IdentityError> {
        if e.party_a == e.party_b {
            return Err(IdentityError::SelfContract);
        }
        let rep_a = self.rep_handle(&e.party_a)?;
        let rep_b = self.rep_handle(&e.party_b)?;
        let vk = self.verifying_key();
        for (p, party) in [(pa, &e.party_a), (pb, &e.party_b)] {
            if !p.signature_valid(&vk) {
                return Err(IdentityError::BadPseudonymSignature);
            }
            if &self.live_pseudonym(&p.handle)?.business != party {
                return Err(IdentityError::PartyMismatch(party.0.clone()));
            }
        }
        let digest = e.digest();
        let mut make = |voter: &Pseudonym, votee: RepHandle, rng: &mut ChaCha20Rng| {
            let ticket = VotingTicket {
                ticket_id: TicketId::fresh(rng),
                voter_pseudonym: voter.handle.clone(),
                votee,
                contract_digest: digest.clone(),
                issued_at: e.timestamp,
                spent: false,
            };
            self.tickets.insert(
                ticket.ticket_id.clone(),
                TicketRecord {
                    nullifier: ticket_nullifier(&ticket.ticket_id),
                    ticket: ticket.clone(),
                    contract: e.clone(),
                },
            );
            ticket
        };
        let t_ab = make(pa, rep_b, &mut self.rng);
        let t_ba = make(pb, rep_a, &mut self.rng);
        Ok((t_ab, t_ba))
    }

    /// Atomically marks the ticket spent and returns the authorization.
    pub fn spend_ticket(&mut self, ticket: &TicketId) -> Result<SessionAuthorization, IdentityError> {
        let r = self.spend_inner(ticket);
        self.logged("spend_ticket", &ticket.0, r)
    }

    fn spend_inner(&mut self, ticket: &TicketId) -> Result<SessionAuthorization, IdentityError> {
        let now = self.now;
        let window = self.config.ticket_window;
        let rec = self
            .tickets
            .get(ticket)
            .ok_or_else(|| IdentityError::UnknownTicket(ticket.0.clone()))?;
        if rec.ticket.spent {
            return Err(IdentityError::AlreadySpent);
        }
        if now.saturating_sub(rec.ticket.issued_at) > window {
            return Err(IdentityError::TicketExpired);
        }
        let voter = rec.ticket.voter_pseudonym.clone();
        self.live_pseudonym(&voter)?;
        let rec = self.tickets.get_mut(ticket).expect("checked above");
        rec.ticket.spent = true;
        let claim = AuthorizationClaim {
            nullifier: &rec.nullifier,
            votee: &rec.ticket.votee,
            issued_at: now,
        };
        let signature = crypto::sign_canonical(&self.signing, &claim);
        Ok(SessionAuthorization {
            nullifier: rec.nullifier.clone(),
            votee: rec.ticket.votee.clone(),
            issued_at: now,
            signature,
        })
    }

    pub fn mint_access_token(&mut self, voter: &PseudonymHandle) -> Result<AccessToken, IdentityError> {
        let r = self.mint_inner(voter);
        self.logged("mint_access_token", &voter.0, r)
    }

    fn mint_inner(&mut self, voter: &PseudonymHandle) -> Result<AccessToken, IdentityError> {
        let business = self.live_pseudonym(voter)?.business.clone();
        let rep = self.rep_handle(&business)?;
        let token_id = TokenId::fresh(&mut self.rng);
        let record = RecordRef::fresh(&mut self.rng);
        self.refs.insert(record.clone(), rep);
        self.tokens.insert(
            token_id.clone(),
            TokenRecord {
                record: record.clone(),
                redeemed: false,
            },
        );
        Ok(AccessToken {
            token_id,
            bound_reputation_ref: record,
            redeemed: false,
        })
    }

    pub fn redeem_access_token(&mut self, token: &TokenId) -> Result<RecordRef, IdentityError> {
        let r = match self.tokens.get_mut(token) {
            None => Err(IdentityError::UnknownToken),
            Some(t) if t.redeemed => Err(IdentityError::AlreadyRedeemed),
            Some(t) => {
                t.redeemed = true;
                Ok(t.record.clone())
            }
        };
        self.logged("redeem_access_token", &token.0, r)
    }

    pub fn resolve_record(&self, r: &RecordRef) -> Result<RepHandle, IdentityError> {
        self.refs.get(r).cloned().ok_or(IdentityError::UnknownRecord)
    }

    /// Current epoch and lifetime check for a presented pseudonym.
    pub fn check_pseudonym(&self, p: &Pseudonym) -> Result<(), IdentityError> {
        verify_pseudonym(
            p,
            &self.verifying_key(),
            self.current_epoch(),
            self.config.pseudonym_lifetime_epochs,
        )?;
        self.live_pseudonym(&p.handle).map(|_| ())
    }

    pub fn transcript(&self) -> &[AuthorityEntry] {
        &self.transcript
    }

    pub fn snapshot(&self) -> AuthoritySnapshot {
        AuthoritySnapshot {
            verifying_key: hex::encode(self.verifying_key().as_bytes()),
            config: self.config,
            businesses: self.businesses.values().cloned().collect(),
            outstanding_tickets: self
                .tickets
                .values()
                .filter(|t| !t.ticket.spent)
                .map(|t| t.ticket.ticket_id.clone())
                .collect(),
            outstanding_tokens: self
                .tokens
                .iter()
                .filter(|(_, t)| !t.redeemed)
                .map(|(id, _)| id.clone())
                .collect(),
            secret: AuthoritySecrets {
                pseudonyms: self.pseudonyms.clone(),
                tickets: self.tickets.clone(),
                tokens: self.tokens.clone(),
                record_refs: self.refs.clone(),
                transcript: self.transcript.clone(),
            },
        }
    }
}

/// JSON snapshot of the authority. The `secret` section is only handed to
/// the auditor on explicit request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthoritySnapshot {
    pub verifying_key: String,
    pub config: AuthorityConfig,
    pub businesses: Vec<BusinessRecord>,
    pub outstanding_tickets: Vec<TicketId>,
    pub outstanding_tokens: Vec<TokenId>,
    pub secret: AuthoritySecrets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthoritySecrets {
    pub pseudonyms: BTreeMap<PseudonymHandle, PseudonymRecord>,
    pub tickets: BTreeMap<TicketId, TicketRecord>,
    pub tokens: BTreeMap<TokenId, TokenRecord>,
    pub record_refs: BTreeMap<RecordRef, RepHandle>,
    pub transcript: Vec<AuthorityEntry>,
}

impl AuthoritySnapshot {
    /// Owner of any pseudonym or reputation handle.
    pub fn owner_of(&self, handle: &str) -> Option<&BusinessId> {
        if let Some(r) = self.secret.pseudonyms.get(&PseudonymHandle(handle.to_string())) {
            return Some(&r.business);
        }
        self.businesses
            .iter()
            .find(|b| b.rep_handle.0 == handle)
            .map(|b| &b.id)
    }

    pub fn rep_handle_of(&self, legal_identity: &str) -> Option<&RepHandle> {
        self.businesses
            .iter()
            .find(|b| b.legal_identity == legal_identity)
            .map(|b| &b.rep_handle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::sync::{Arc, Mutex};

    fn authority() -> Authority {
        Authority::new(AuthorityConfig::default(), crypto::derive_rng(1, "authority"))
    }

    fn contract(a: &BusinessId, b: &BusinessId, t: u64) -> ContractEvent {
        ContractEvent {
            party_a: a.clone(),
            party_b: b.clone(),
            metadata: format!("PO-{t}"),
            timestamp: t,
        }
    }

    #[test]
    fn registration_rejects_duplicates() {
        let mut a = authority();
        let b1 = a.register_business("ACME", "DE").unwrap();
        assert_eq!(
            a.register_business("ACME", "DE"),
            Err(IdentityError::Duplicate("ACME".into()))
        );
        let b2 = a.register_business("BETA", "FR").unwrap();
        assert_ne!(b1, b2);
    }

    #[test]
    fn hundred_registrations_are_distinct() {
        let mut a = authority();
        let ids: BTreeSet<_> = (0..100)
            .map(|i| a.register_business(&format!("biz-{i}"), "EU").unwrap())
            .collect();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn pseudonyms_are_fresh_and_verify() {
        let mut a = authority();
        let b = a.register_business("ACME", "DE").unwrap();
        let p1 = a.issue_pseudonym(&b, 0).unwrap();
        let p2 = a.issue_pseudonym(&b, 0).unwrap();
        assert_ne!(p1.handle, p2.handle);
        assert!(a.check_pseudonym(&p1).is_ok());
        assert!(a.check_pseudonym(&p2).is_ok());
        let ghost = BusinessId("bid:00".into());
        assert!(matches!(
            a.issue_pseudonym(&ghost, 0),
            Err(IdentityError::UnknownBusiness(_))
        ));
    }

    #[test]
    fn forged_pseudonym_signature_rejected() {
        let mut a = authority();
        let b = a.register_business("ACME", "DE").unwrap();
        let mut p = a.issue_pseudonym(&b, 0).unwrap();
        p.epoch += 1;
        assert_eq!(a.check_pseudonym(&p), Err(IdentityError::BadPseudonymSignature));
    }

    #[test]
    fn pseudonym_handles_look_uniform() {
        let mut a = authority();
        let businesses: Vec<_> = (0..10)
            .map(|i| a.register_business(&format!("b{i}"), "EU").unwrap())
            .collect();
        let mut seen = BTreeSet::new();
        let mut nibble_counts = [[0u32; 16]; 10];
        for round in 0..100 {
            for (i, b) in businesses.iter().enumerate() {
                let p = a.issue_pseudonym(b, round / 50).unwrap();
                assert!(seen.insert(p.handle.clone()));
                let first = p.handle.0.as_bytes()[PseudonymHandle::PREFIX.len()];
                let nib = (first as char).to_digit(16).unwrap() as usize;
                nibble_counts[i][nib] += 1;
                assert!(!p.handle.0.contains(&b.0[4..]));
            }
        }
        assert_eq!(seen.len(), 1000);
        // Pooled chi-square over the leading hex digit (15 dof, p = 0.001 cutoff 37.7).
        let mut pooled = [0u32; 16];
        for row in &nibble_counts {
            for (k, c) in row.iter().enumerate() {
                pooled[k] += c;
            }
        }
        let expected = 1000.0 / 16.0;
        let chi: f64 = pooled.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi < 37.7, "chi-square {chi}");
        // No business has a dominant leading digit.
        for row in &nibble_counts {
            assert!(row.iter().all(|&c| c < 40), "{row:?}");
        }
    }

    #[test]
    fn contracts_issue_opposite_tickets() {
        let mut a = authority();
        let b1 = a.register_business("ACME", "DE").unwrap();
        let b2 = a.register_business("BETA", "FR").unwrap();
        let p1 = a.issue_pseudonym(&b1, 0).unwrap();
        let p2 = a.issue_pseudonym(&b2, 0).unwrap();
        let (t_ab, t_ba) = a.establish_contract(&contract(&b1, &b2, 1), &p1, &p2).unwrap();
        assert_eq!(t_ab.contract_digest, t_ba.contract_digest);
        assert_eq!(t_ab.voter_pseudonym, p1.handle);
        assert_eq!(t_ab.votee, a.rep_handle(&b2).unwrap());
        assert_eq!(t_ba.voter_pseudonym, p2.handle);
        assert_eq!(t_ba.votee, a.rep_handle(&b1).unwrap());

        assert_eq!(
            a.establish_contract(&contract(&b1, &b1, 2), &p1, &p1),
            Err(IdentityError::SelfContract)
        );
        assert!(matches!(
            a.establish_contract(&contract(&b1, &b2, 3), &p2, &p1),
            Err(IdentityError::PartyMismatch(_))
        ));

        let (t3, t4) = a.establish_contract(&contract(&b1, &b2, 4), &p1, &p2).unwrap();
        let ids: BTreeSet<_> = [&t_ab, &t_ba, &t3, &t4].iter().map(|t| t.ticket_id.clone()).collect();
        assert_eq!(ids.len(), 4);
    }

    fn pair(a: &mut Authority) -> (BusinessId, BusinessId, VotingTicket, Pseudonym) {
        let b1 = a.register_business("ACME", "DE").unwrap();
        let b2 = a.register_business("BETA", "FR").unwrap();
        let p1 = a.issue_pseudonym(&b1, 0).unwrap();
        let p2 = a.issue_pseudonym(&b2, 0).unwrap();
        let (t, _) = a.establish_contract(&contract(&b1, &b2, 0), &p1, &p2).unwrap();
        (b1, b2, t, p1)
    }

    #[test]
    fn tickets_are_single_use() {
        let mut a = authority();
        let (_, _, t, _) = pair(&mut a);
        let auth = a.spend_ticket(&t.ticket_id).unwrap();
        assert!(auth.signature_valid(&a.verifying_key()));
        assert_eq!(auth.nullifier, ticket_nullifier(&t.ticket_id));
        assert_eq!(auth.votee, t.votee);
        assert_eq!(a.spend_ticket(&t.ticket_id), Err(IdentityError::AlreadySpent));
    }

    #[test]
    fn expired_voter_pseudonym_blocks_spend() {
        let mut a = Authority::new(
            AuthorityConfig {
                ticket_window: 100_000,
                ..AuthorityConfig::default()
            },
            crypto::derive_rng(2, "authority"),
        );
        let (_, _, t, _) = pair(&mut a);
        a.set_time(100 * 10);
        assert!(matches!(
            a.spend_ticket(&t.ticket_id),
            Err(IdentityError::ExpiredPseudonym(_))
        ));
    }

    #[test]
    fn stale_ticket_blocks_spend() {
        let mut a = Authority::new(
            AuthorityConfig {
                pseudonym_lifetime_epochs: 1000,
                ..AuthorityConfig::default()
            },
            crypto::derive_rng(3, "authority"),
        );
        let (_, _, t, _) = pair(&mut a);
        a.set_time(1001);
        assert_eq!(a.spend_ticket(&t.ticket_id), Err(IdentityError::TicketExpired));
    }

    #[test]
    fn concurrent_spends_have_one_winner() {
        let mut a = authority();
        let (_, _, t, _) = pair(&mut a);
        let shared = Arc::new(Mutex::new(a));
        let handles: Vec<_> = (0..16)
            .map(|_| {
                let shared = Arc::clone(&shared);
                let id = t.ticket_id.clone();
                std::thread::spawn(move || shared.lock().unwrap().spend_ticket(&id).is_ok())
            })
            .collect();
        let wins = handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .filter(|ok| *ok)
            .count();
        assert_eq!(wins, 1);
    }

    #[test]
    fn access_tokens_are_one_time_and_unlinkable() {
        let mut a = authority();
        let (b1, _, _, p1) = pair(&mut a);
        let rep = a.rep_handle(&b1).unwrap();
        let t1 = a.mint_access_token(&p1.handle).unwrap();
        let t2 = a.mint_access_token(&p1.handle).unwrap();
        assert_ne!(t1.token_id, t2.token_id);

        let r1 = a.redeem_access_token(&t1.token_id).unwrap();
        assert_eq!(a.redeem_access_token(&t1.token_id), Err(IdentityError::AlreadyRedeemed));
        assert_eq!(
            a.redeem_access_token(&TokenId("tok:deadbeef".into())),
            Err(IdentityError::UnknownToken)
        );
        let r2 = a.redeem_access_token(&t2.token_id).unwrap();
        assert_ne!(r1, r2);
        assert_eq!(a.resolve_record(&r1).unwrap(), rep);
        assert_eq!(a.resolve_record(&r2).unwrap(), rep);
    }

    #[test]
    fn many_tokens_resolve_to_one_record() {
        let mut a = authority();
        let (b1, _, _, p1) = pair(&mut a);
        let tokens: Vec<_> = (0..25).map(|_| a.mint_access_token(&p1.handle).unwrap()).collect();
        let refs: BTreeSet<_> = tokens
            .iter()
            .map(|t| a.redeem_access_token(&t.token_id).unwrap())
            .collect();
        assert_eq!(refs.len(), 25);
        let records: BTreeSet<_> = refs.iter().map(|r| a.resolve_record(r).unwrap()).collect();
        assert_eq!(records.into_iter().collect::<Vec<_>>(), vec![a.rep_handle(&b1).unwrap()]);
    }

    #[test]
    fn token_ids_carry_no_identity() {
        let mut a = authority();
        let (b1, _, _, p1) = pair(&mut a);
        let rep = a.rep_handle(&b1).unwrap();
        for _ in 0..1000 {
            let t = a.mint_access_token(&p1.handle).unwrap();
            let hexpart = &t.token_id.0[TokenId::PREFIX.len()..];
            assert!(!t.token_id.0.contains(&b1.0) && !t.token_id.0.contains(&p1.handle.0));
            assert!(!hexpart.contains(&b1.0[4..]));
            assert!(!hexpart.contains(&p1.handle.0[4..]));
            assert!(!hexpart.contains(&rep.0[4..]));
        }
    }

    #[test]
    fn minting_for_expired_pseudonym_fails() {
        let mut a = authority();
        let (_, _, _, p1) = pair(&mut a);
        a.set_time(5000);
        assert!(matches!(
            a.mint_access_token(&p1.handle),
            Err(IdentityError::ExpiredPseudonym(_))
        ));
    }

    #[test]
    fn snapshot_roundtrips_and_resolves_owners() {
        let mut a = authority();
        let (b1, b2, t, p1) = pair(&mut a);
        let snap = a.snapshot();
        let back: AuthoritySnapshot =
            serde_json::from_str(&serde_json::to_string(&snap).unwrap()).unwrap();
        assert_eq!(back, snap);
        assert_eq!(snap.owner_of(&p1.handle.0), Some(&b1));
        assert_eq!(snap.owner_of(&t.votee.0), Some(&b2));
        assert_eq!(snap.outstanding_tickets.len(), 2);
    }
}
