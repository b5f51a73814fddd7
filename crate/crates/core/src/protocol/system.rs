use std::collections::{BTreeMap, VecDeque};

use ed25519_dalek::{SigningKey, VerifyingKey};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::business::{BusinessNode, SessionStatus};
use super::engine::{Engine, EngineFault};
use super::key_manager::KeyManager;
use super::log::{EventLog, EventOutcome, Header, LogLine};
use super::manager::ReputationManager;
use super::{EnginePolicy, EngineAssigner, EntityId, Message, OpKind, ProtocolError, QueryMode, QueryResult, Role};
use crate::crypto::{self, derive_rng};
use crate::he::{backend_for, Ciphertext, EvalKey, HeBackend, HeError, HeParams, KeyMaterial, PlainVector, PublicKey, SecretKey};
use crate::identity::{Authority, AuthorityConfig, BusinessId, ContractEvent, RepHandle};
use crate::reputation::{bootstrap_reputation, combine_encrypted, finalize_score, update_state, RatingVector, ReputationState, SystemProfile};

/// Handler context: shared read-only configuration, the authority, and an
/// operation counter attributed to the handling entity.
pub struct Ctx<'a> {
    pub be: &'a dyn HeBackend<f64>,
    pub profile: &'a SystemProfile,
    pub dims: usize,
    pub authority: &'a mut Authority,
    pub engine_keys: &'a BTreeMap<EntityId, VerifyingKey>,
    /// Sequence number of the message being handled.
    pub seq: u64,
    /// Marks operations as one-time provisioning rather than per-session.
    pub bootstrap: bool,
    ops: Vec<(OpKind, bool)>,
}

impl Ctx<'_> {
    pub fn record(&mut self, op: OpKind) {
        self.ops.push((op, self.bootstrap));
    }

    pub fn keygen(&mut self, rng: &mut dyn RngCore) -> Result<KeyMaterial, HeError> {
        self.ops.push((OpKind::Keygen, true));
        self.be.keygen(rng)
    }

    pub fn encrypt(&mut self, pk: &PublicKey, values: &[f64], rng: &mut dyn RngCore) -> Result<Ciphertext, HeError> {
        self.record(OpKind::Encrypt);
        self.be.encrypt(pk, &PlainVector::from_f64(values), rng)
    }

    pub fn decrypt(&mut self, sk: &SecretKey, ct: &Ciphertext) -> Result<Vec<f64>, HeError> {
        self.record(OpKind::Decrypt);
        Ok(self.be.decrypt(sk, ct)?.values)
    }

    pub fn add(&mut self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, HeError> {
        self.record(OpKind::HeAdd);
        self.be.add(a, b)
    }

    pub fn sign<T: Serialize>(&mut self, key: &SigningKey, value: &T) -> Vec<u8> {
        self.record(OpKind::Sign);
        crypto::sign_canonical(key, value)
    }

    pub fn combine(
        &mut self,
        s_r: &Ciphertext,
        s_e: Option<&Ciphertext>,
        r_r: &Ciphertext,
        r_e: &Ciphertext,
        ek: &EvalKey,
        rng: &mut dyn RngCore,
    ) -> Result<(Ciphertext, Ciphertext), ProtocolError> {
        let out = combine_encrypted(self.be, ek, s_r, s_e, r_r, r_e, rng)?;
        self.record(OpKind::HeMul);
        if s_e.is_some() {
            self.record(OpKind::HeMul);
            self.record(OpKind::HeAdd);
            self.record(OpKind::HeAdd);
        }
        Ok(out)
    }

    pub fn update_state(
        &mut self,
        st: &ReputationState,
        s: &Ciphertext,
        w: &Ciphertext,
    ) -> Result<ReputationState, ProtocolError> {
        let out = update_state(self.be, st, s, w)?;
        self.record(OpKind::HeAdd);
        self.record(OpKind::HeAdd);
        Ok(out)
    }

    pub fn initial_state(&mut self, pk: &PublicKey, rng: &mut dyn RngCore) -> Result<ReputationState, ProtocolError> {
        let st = ReputationState::initial(self.be, pk, self.profile, self.dims, rng)?;
        self.record(OpKind::Encrypt);
        self.record(OpKind::Encrypt);
        Ok(st)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misbehavior {
    TokenReplay,
    TicketReplay,
    DoubleSpendRace,
    CiphertextTamper,
    ForgedSignature,
    DepthViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRequest {
    pub voter: String,
    pub votee: String,
    pub rating: Vec<f64>,
    pub with_self_rating: Option<bool>,
    pub misbehavior: Option<Misbehavior>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub seed: u64,
    pub he_params: HeParams,
    pub profile: SystemProfile,
    pub dims: usize,
    pub engine_count: usize,
    pub engine_policy: EnginePolicy,
    pub authority: AuthorityConfig,
}

/// Deterministic single-threaded event loop over all entities.
pub struct System {
    cfg: SystemConfig,
    be: Box<dyn HeBackend<f64>>,
    authority: Authority,
    km: KeyManager,
    rm: ReputationManager,
    engines: Vec<Engine>,
    engine_ids: Vec<EntityId>,
    engine_keys: BTreeMap<EntityId, VerifyingKey>,
    nodes: BTreeMap<String, BusinessNode>,
    bids: BTreeMap<String, BusinessId>,
    routes: BTreeMap<EntityId, String>,
    assigner: EngineAssigner,
    queue: VecDeque<Message>,
    log: EventLog,
    seq: u64,
    tick: u64,
    event: usize,
}

struct LogCursor<'a> {
    log: &'a mut EventLog,
    seq: &'a mut u64,
    tick: u64,
    event: usize,
}

impl LogCursor<'_> {
    fn push(&mut self, f: impl FnOnce(u64, u64, usize) -> LogLine) -> u64 {
        let s = *self.seq;
        self.log.lines.push(f(s, self.tick, self.event));
        *self.seq += 1;
        s
    }

    fn ops(&mut self, entity: &EntityId, ops: Vec<(OpKind, bool)>) {
        for (op, bootstrap) in ops {
            self.push(|seq, tick, event| LogLine::Op {
                seq,
                tick,
                event,
                entity: entity.clone(),
                op,
                bootstrap,
            });
        }
    }
}

impl System {
    pub fn new(cfg: SystemConfig) -> Result<Self, ProtocolError> {
        cfg.he_params.validate()?;
        if cfg.dims == 0 || cfg.dims > cfg.he_params.slot_count {
            return Err(ProtocolError::Malformed(format!(
                "{} rating dimensions do not fit {} slots",
                cfg.dims, cfg.he_params.slot_count
            )));
        }
        if cfg.engine_count == 0 {
            return Err(ProtocolError::NoEngines);
        }
        let be = backend_for::<f64>(cfg.he_params)?;
        let authority = Authority::new(cfg.authority, derive_rng(cfg.seed, "entity:authority"));
        let engines: Vec<Engine> = (0..cfg.engine_count).map(|i| Engine::new(cfg.seed, i)).collect();
        let engine_ids = engines.iter().map(|e| e.id().clone()).collect();
        let engine_keys = engines.iter().map(|e| (e.id().clone(), e.verifying_key())).collect();
        Ok(System {
            km: KeyManager::new(cfg.seed),
            rm: ReputationManager::new(cfg.seed),
            assigner: EngineAssigner::new(cfg.engine_policy),
            cfg,
            be,
            authority,
            engines,
            engine_ids,
            engine_keys,
            nodes: BTreeMap::new(),
            bids: BTreeMap::new(),
            routes: BTreeMap::new(),
            queue: VecDeque::new(),
            log: EventLog::default(),
            seq: 0,
            tick: 0,
            event: 0,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn backend(&self) -> &dyn HeBackend<f64> {
        self.be.as_ref()
    }

    pub fn authority(&self) -> &Authority {
        &self.authority
    }

    pub fn key_manager(&self) -> &KeyManager {
        &self.km
    }

    pub fn reputation_manager(&self) -> &ReputationManager {
        &self.rm
    }

    pub fn engine_keys(&self) -> &BTreeMap<EntityId, VerifyingKey> {
        &self.engine_keys
    }

    pub fn node(&self, name: &str) -> Option<&BusinessNode> {
        self.nodes.get(name)
    }

    pub fn rep_of(&self, name: &str) -> Option<&RepHandle> {
        self.nodes.get(name).map(|n| n.rep())
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn register(
        &mut self,
        name: &str,
        jurisdiction: &str,
        self_rating: Option<&[f64]>,
        verified: bool,
    ) -> Result<RepHandle, ProtocolError> {
        let self_rating = match self_rating {
            Some(v) => Some(
                RatingVector::from_f64(v)
                    .filter(|r| r.len() == self.cfg.dims)
                    .ok_or_else(|| ProtocolError::Malformed(format!("self-rating of {name} is invalid")))?,
            ),
            None => None,
        };
        let bid = self.authority.register_business(name, jurisdiction)?;
        let rep = self.authority.rep_handle(&bid)?;
        self.routes.insert(EntityId::from(&rep), name.to_string());
        self.bids.insert(name.to_string(), bid);
        self.nodes.insert(
            name.to_string(),
            BusinessNode::new(self.cfg.seed, name, rep.clone(), self_rating, verified),
        );
        Ok(rep)
    }

    /// Writes the header; call once after registration.
    pub fn begin_log(&mut self, scenario_digest: &str) {
        let header = Header {
            seed: self.cfg.seed,
            backend: self.cfg.he_params.backend_kind,
            he_params: self.cfg.he_params,
            profile: self.cfg.profile,
            dims: self.cfg.dims,
            authority_config: self.cfg.authority,
            authority_key: hex::encode(self.authority.verifying_key().as_bytes()),
            engine_keys: self
                .engine_keys
                .iter()
                .map(|(id, k)| (id.clone(), hex::encode(k.as_bytes())))
                .collect(),
            directory: self.nodes.iter().map(|(n, b)| (n.clone(), b.rep().clone())).collect(),
            scenario_digest: scenario_digest.to_string(),
        };
        self.log.lines.push(LogLine::Header(Box::new(header)));
        self.seq = 1;
    }

    pub fn begin_event(&mut self, index: usize) {
        self.event = index;
        self.tick += 1;
        self.authority.set_time(self.tick);
    }

    pub fn advance_epoch(&mut self) {
        let len = self.cfg.authority.epoch_length.max(1);
        self.tick = (self.tick / len + 1) * len;
        self.authority.set_time(self.tick);
    }

    fn cursor(&mut self) -> LogCursor<'_> {
        LogCursor {
            log: &mut self.log,
            seq: &mut self.seq,
            tick: self.tick,
            event: self.event,
        }
    }

    pub fn record_outcome(&mut self, outcome: EventOutcome) {
        self.cursor().push(|seq, tick, event| LogLine::Outcome {
            seq,
            tick,
            event,
            outcome,
        });
    }

    /// Appends the footer and returns the finished log.
    pub fn finish_log(&mut self) -> EventLog {
        let lines = self.log.lines.len() as u64 + 1;
        self.cursor().push(|seq, _, _| LogLine::Footer { seq, lines });
        self.log.clone()
    }

    fn live_node(&self, name: &str) -> Result<&BusinessNode, ProtocolError> {
        let n = self
            .nodes
            .get(name)
            .ok_or_else(|| ProtocolError::UnknownVotee(name.to_string()))?;
        if n.departed() {
            return Err(ProtocolError::Unreachable(name.to_string()));
        }
        Ok(n)
    }

    pub fn contract(&mut self, a: &str, b: &str, metadata: &str) -> Result<(), ProtocolError> {
        self.live_node(a)?;
        self.live_node(b)?;
        let epoch = self.authority.current_epoch();
        let (bid_a, bid_b) = (self.bids[a].clone(), self.bids[b].clone());
        let pa = self.authority.issue_pseudonym(&bid_a, epoch)?;
        let pb = self.authority.issue_pseudonym(&bid_b, epoch)?;
        let event = ContractEvent {
            party_a: bid_a,
            party_b: bid_b,
            metadata: metadata.to_string(),
            timestamp: self.tick,
        };
        let (t_ab, t_ba) = self.authority.establish_contract(&event, &pa, &pb)?;
        self.routes.insert(EntityId::from(&pa.handle), a.to_string());
        self.routes.insert(EntityId::from(&pb.handle), b.to_string());
        self.nodes.get_mut(a).unwrap().hold_ticket(t_ab, pa);
        self.nodes.get_mut(b).unwrap().hold_ticket(t_ba, pb);
        Ok(())
    }

    pub fn depart(&mut self, name: &str) -> Result<(), ProtocolError> {
        self.live_node(name)?;
        self.nodes.get_mut(name).unwrap().depart();
        Ok(())
    }

    fn engine_index(id: &EntityId) -> Option<usize> {
        id.0.strip_prefix("engine:")?.parse().ok()
    }

    /// Runs one rating event, including any scripted deviation, and returns
    /// the status of every session it opened.
    pub fn rate(&mut self, req: &RateRequest) -> Result<Vec<SessionStatus>, ProtocolError> {
        self.live_node(&req.voter)?;
        let votee_node = self
            .nodes
            .get(&req.votee)
            .ok_or_else(|| ProtocolError::UnknownVotee(req.votee.clone()))?;
        let votee = votee_node.rep().clone();
        let with_self = req.with_self_rating.unwrap_or(votee_node.has_self_rating());
        let rating = RatingVector::from_f64(&req.rating)
            .filter(|r| r.len() == self.cfg.dims && r.dims.iter().all(|&v| self.cfg.profile.feedback_set.admits(v)))
            .ok_or_else(|| ProtocolError::Malformed("rating outside the feedback set".into()))?;
        let (ticket, pseudonym) = self
            .nodes
            .get_mut(&req.voter)
            .unwrap()
            .take_ticket(&votee)
            .ok_or(ProtocolError::NoTicket)?;
        let authorization = self.authority.spend_ticket(&ticket.ticket_id)?;
        self.cursor().ops(&EntityId("authority".into()), vec![(OpKind::Sign, false)]);

        let mut correlators = Vec::new();
        let sessions = match req.misbehavior {
            Some(Misbehavior::DoubleSpendRace) => 2,
            _ => 1,
        };
        for _ in 0..sessions {
            let engine = self.assigner.assign(&self.engine_ids)?.clone();
            let fault = match req.misbehavior {
                Some(Misbehavior::CiphertextTamper) => Some(EngineFault::Tamper),
                Some(Misbehavior::ForgedSignature) => Some(EngineFault::Forge),
                Some(Misbehavior::DepthViolation) => Some(EngineFault::SkipMultiplication),
                _ => None,
            };
            if let (Some(f), Some(i)) = (fault, Self::engine_index(&engine)) {
                self.engines[i].arm(f);
            }
            let c = self.open_session(&req.voter, &votee, &engine, &pseudonym, &authorization, &rating, with_self)?;
            correlators.push(c);
        }
        self.pump();
        match req.misbehavior {
            Some(Misbehavior::TokenReplay) => {
                let node = self.nodes.get_mut(&req.voter).unwrap();
                if let Some((c, m)) = node.replay_submission(&correlators[0]) {
                    correlators.push(c);
                    self.queue.push_back(m);
                    self.pump();
                }
            }
            Some(Misbehavior::TicketReplay) => {
                let engine = self.assigner.assign(&self.engine_ids)?.clone();
                let c = self.open_session(&req.voter, &votee, &engine, &pseudonym, &authorization, &rating, with_self)?;
                correlators.push(c);
                self.pump();
            }
            _ => {}
        }
        let node = self.nodes.get_mut(&req.voter).unwrap();
        node.settle();
        Ok(correlators
            .iter()
            .map(|c| node.session(c).map(|s| s.status.clone()).unwrap_or(SessionStatus::Failed {
                reason: "session missing".into(),
            }))
            .collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn open_session(
        &mut self,
        voter: &str,
        votee: &RepHandle,
        engine: &EntityId,
        pseudonym: &crate::identity::Pseudonym,
        authorization: &crate::identity::SessionAuthorization,
        rating: &RatingVector<f64>,
        with_self: bool,
    ) -> Result<String, ProtocolError> {
        let System {
            cfg,
            be,
            authority,
            engine_keys,
            nodes,
            ..
        } = self;
        let mut ctx = Ctx {
            be: be.as_ref(),
            profile: &cfg.profile,
            dims: cfg.dims,
            authority,
            engine_keys,
            seq: 0,
            bootstrap: false,
            ops: Vec::new(),
        };
        let node = nodes.get_mut(voter).expect("voter exists");
        let (c, m) = node.start_rating(&mut ctx, votee, engine, pseudonym, authorization.clone(), rating.clone(), with_self)?;
        self.queue.push_back(m);
        Ok(c)
    }

    /// Sends a query from a fresh requester pseudonym.
    pub fn query(&mut self, requester: &str, votee: &str, mode: QueryMode) -> Result<QueryResult, ProtocolError> {
        self.live_node(requester)?;
        let votee = self
            .rep_of(votee)
            .cloned()
            .ok_or_else(|| ProtocolError::UnknownVotee(votee.to_string()))?;
        let epoch = self.authority.current_epoch();
        let bid = self.bids[requester].clone();
        let p = self.authority.issue_pseudonym(&bid, epoch)?;
        self.routes.insert(EntityId::from(&p.handle), requester.to_string());
        let node = self.nodes.get_mut(requester).unwrap();
        let (c, m) = node.start_query(&p, &votee, mode);
        self.queue.push_back(m);
        self.pump();
        Ok(self
            .nodes[requester]
            .query_result(&c)
            .cloned()
            .unwrap_or_else(|| QueryResult::Error("no response".into())))
    }

    fn pump(&mut self) {
        while let Some(m) = self.queue.pop_front() {
            self.deliver(m);
        }
    }

    fn deliver(&mut self, m: Message) {
        let role = m.receiver.role();
        let node_name = match role {
            Role::Business => self.routes.get(&m.receiver).cloned(),
            _ => None,
        };
        let unreachable = match role {
            Role::Business => node_name.as_ref().map(|n| self.nodes[n].departed()).unwrap_or(true),
            Role::Engine => Self::engine_index(&m.receiver).map(|i| i >= self.engines.len()).unwrap_or(true),
            _ => false,
        };
        let System {
            cfg,
            be,
            authority,
            km,
            rm,
            engines,
            engine_keys,
            nodes,
            log,
            seq,
            tick,
            event,
            queue,
            ..
        } = self;
        let mut cursor = LogCursor {
            log,
            seq,
            tick: *tick,
            event: *event,
        };
        let mut ctx = Ctx {
            be: be.as_ref(),
            profile: &cfg.profile,
            dims: cfg.dims,
            authority,
            engine_keys,
            seq: 0,
            bootstrap: false,
            ops: Vec::new(),
        };
        let (entity, result) = if unreachable {
            let message = m.clone();
            ctx.seq = cursor.push(|seq, tick, event| LogLine::Dropped {
                seq,
                tick,
                event,
                message,
            });
            let r = match Self::engine_index(&m.sender) {
                Some(i) if m.sender.role() == Role::Engine => engines[i].undeliverable(&m.correlator, &mut ctx),
                _ => Ok(Vec::new()),
            };
            (m.sender.clone(), r)
        } else {
            let message = m.clone();
            ctx.seq = cursor.push(|seq, tick, event| LogLine::Message {
                seq,
                tick,
                event,
                message,
            });
            let r = match role {
                Role::KeyManager => km.handle(&m, &mut ctx),
                Role::ReputationManager => rm.handle(&m, &mut ctx),
                Role::Engine => engines[Self::engine_index(&m.receiver).unwrap()].handle(&m, &mut ctx),
                Role::Business => {
                    let node = nodes.get_mut(node_name.as_ref().unwrap()).unwrap();
                    node.handle(&m, &mut ctx)
                }
            };
            (m.receiver.clone(), r)
        };
        let ops = std::mem::take(&mut ctx.ops);
        cursor.ops(&entity, ops);
        match result {
            Ok(out) => queue.extend(out),
            Err(e) => {
                cursor.push(|seq, tick, event| LogLine::Fault {
                    seq,
                    tick,
                    event,
                    entity,
                    error: e.to_string(),
                });
            }
        }
    }

    /// Scores decrypted by the key manager from the manager's current
    /// state; votees without updates report the configured prior.
    pub fn live_scores(&self) -> BTreeMap<RepHandle, (u64, Vec<f64>)> {
        let mut out = BTreeMap::new();
        for node in self.nodes.values() {
            let rep = node.rep();
            let version = self.rm.version(rep).unwrap_or(0);
            let score = if version == 0 {
                bootstrap_reputation::<f64>(&self.cfg.profile, self.cfg.dims).0.dims
            } else {
                let st = self.rm.state(self.be.as_ref(), rep).expect("record exists");
                let sk = &self.km.key_material(rep).expect("key exists").secret_key;
                match finalize_score(self.be.as_ref(), &st, sk) {
                    Ok(v) => v.dims,
                    Err(_) => vec![f64::NAN; self.cfg.dims],
                }
            };
            out.insert(rep.clone(), (version, score));
        }
        out
    }
}
