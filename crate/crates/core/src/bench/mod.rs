//! Operation timings and capacity extrapolation.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, derive_rng};
use crate::he::{backend_for, BackendKind, HeError, HeParams, PlainVector, ScalarOp};
use crate::identity::AuthorityConfig;
use crate::protocol::{EnginePolicy, OpKind, ProtocolError, RateRequest, System, SystemConfig};
use crate::reputation::SystemProfile;

pub const MIN_ITERATIONS: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("at least {MIN_ITERATIONS} iterations are required, got {0}")]
    TooFewIterations(usize),
    #[error("timing table has no row for {0}")]
    MissingRow(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub name: String,
    pub iterations: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
}

impl TimingRow {
    fn from_samples(name: &str, mut us: Vec<f64>) -> TimingRow {
        // Sub-resolution timings are floored so every row stays positive.
        for x in us.iter_mut() {
            *x = x.max(1e-3);
        }
        us.sort_by(f64::total_cmp);
        let n = us.len();
        let rank = |q: f64| us[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        TimingRow {
            name: name.to_string(),
            iterations: n,
            mean_us: us.iter().sum::<f64>() / n as f64,
            p50_us: rank(0.50),
            p95_us: rank(0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub backend: BackendKind,
    /// Set when the requested backend was not built and the simulation
    /// backend stood in.
    pub simulation_only: bool,
    pub he_params: HeParams,
    pub seed: u64,
    /// keygen, encrypt, decrypt, he_add, he_mul, he_scalar.
    pub rows: Vec<TimingRow>,
    /// sign, verify, and end-to-end rating latency.
    pub extra: Vec<TimingRow>,
}

impl TimingTable {
    pub fn row(&self, name: &str) -> Option<&TimingRow> {
        self.rows.iter().chain(&self.extra).find(|r| r.name == name)
    }

    /// Mean cost of one operation in microseconds.
    pub fn cost(&self, op: OpKind) -> Result<f64, BenchError> {
        self.row(op.label())
            .map(|r| r.mean_us)
            .ok_or_else(|| BenchError::MissingRow(op.label().to_string()))
    }
}

fn time<F: FnMut() -> Result<(), BenchError>>(name: &str, iterations: usize, mut f: F) -> Result<TimingRow, BenchError> {
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e6);
    }
    Ok(TimingRow::from_samples(name, samples))
}

/// Times the six homomorphic operations plus signing, verification and a
/// full rating session.
pub fn bench_he(params: HeParams, iterations: usize, seed: u64) -> Result<TimingTable, BenchError> {
    if iterations < MIN_ITERATIONS {
        return Err(BenchError::TooFewIterations(iterations));
    }
    params.validate()?;
    let (params, simulation_only) = match backend_for::<f64>(params) {
        Err(HeError::Unavailable(_)) => (
            HeParams {
                backend_kind: BackendKind::Simulation,
                ..params
            },
            true,
        ),
        Err(e) => return Err(e.into()),
        Ok(_) => (params, false),
    };
    let be = backend_for::<f64>(params)?;
    let mut rng = derive_rng(seed, "bench");
    let slots = params.slot_count;
    let pt = PlainVector::from_f64(&(0..slots).map(|i| (i as f64 + 1.0) / (slots as f64 + 1.0)).collect::<Vec<_>>());
    let keys = be.keygen(&mut rng)?;
    let a = be.encrypt(&keys.public_key, &pt, &mut rng)?;
    let b = be.encrypt(&keys.public_key, &pt, &mut rng)?;

    let mut rows = Vec::new();
    rows.push(time("keygen", iterations, || {
        be.keygen(&mut rng)?;
        Ok(())
    })?);
    let mut rng2 = derive_rng(seed, "bench:encrypt");
    rows.push(time("encrypt", iterations, || {
        be.encrypt(&keys.public_key, &pt, &mut rng2)?;
        Ok(())
    })?);
    rows.push(time("decrypt", iterations, || {
        be.decrypt(&keys.secret_key, &a)?;
        Ok(())
    })?);
    rows.push(time("he_add", iterations, || {
        be.add(&a, &b)?;
        Ok(())
    })?);
    let mut rng3 = derive_rng(seed, "bench:mul");
    rows.push(time("he_mul", iterations, || {
        be.mul(&a, &b, &keys.eval_key, &mut rng3)?;
        Ok(())
    })?);
    rows.push(time("he_scalar", iterations, || {
        be.scalar(ScalarOp::Mul, &a, &pt, &mut rng3)?;
        Ok(())
    })?);

    let signing = crypto::signing_key_from(&mut rng);
    let vk = signing.verifying_key();
    let message = ("bench", seed);
    let sig = crypto::sign_canonical(&signing, &message);
    let mut extra = vec![
        time("sign", iterations, || {
            crypto::sign_canonical(&signing, &message);
            Ok(())
        })?,
        time("verify", iterations, || {
            crypto::verify_canonical(&vk, &message, &sig)
                .then_some(())
                .ok_or_else(|| BenchError::InvalidInput("signature did not verify".into()))
        })?,
    ];
    extra.push(bench_rating(params, iterations, seed)?);
    Ok(TimingTable {
        backend: params.backend_kind,
        simulation_only,
        he_params: params,
        seed,
        rows,
        extra,
    })
}

/// Wall time of complete rating sessions, self-rating included.
fn bench_rating(params: HeParams, iterations: usize, seed: u64) -> Result<TimingRow, BenchError> {
    let mut sys = System::new(SystemConfig {
        seed,
        he_params: params,
        profile: SystemProfile::default(),
        dims: 1,
        engine_count: 3,
        engine_policy: EnginePolicy::RoundRobin,
        authority: AuthorityConfig {
            ticket_window: u64::MAX / 4,
            pseudonym_lifetime_epochs: u64::MAX / 4,
            ..AuthorityConfig::default()
        },
    })?;
    sys.register("voter", "XX", None, true)?;
    sys.register("votee", "XX", Some(&[0.8]), true)?;
    sys.begin_log("bench");
    for _ in 0..iterations {
        sys.contract("voter", "votee", "bench")?;
    }
    let req = RateRequest {
        voter: "voter".into(),
        votee: "votee".into(),
        rating: vec![0.7],
        with_self_rating: Some(true),
        misbehavior: None,
    };
    time("rating_end_to_end", iterations, || {
        sys.rate(&req)?;
        Ok(())
    })
}

/// Operations one rating session performs at steady state with durable
/// storage: the votee's key already exists and the manager's record is
/// provisioned. Feedback screening adds the two decryptions of `(S, W)`.
pub fn rating_multiset(self_rating: bool, screen_feedback: bool) -> BTreeMap<OpKind, u64> {
    let mut m = BTreeMap::new();
    // Voter encrypts S_r; key manager re-encrypts R_r and the released score.
    m.insert(OpKind::Encrypt, 3 + u64::from(self_rating));
    // Transcryption, then N and D at normalization.
    m.insert(OpKind::Decrypt, 3 + if screen_feedback { 2 } else { 0 });
    // Two state additions, plus two in the self-rated combination.
    m.insert(OpKind::HeAdd, 2 + if self_rating { 2 } else { 0 });
    m.insert(OpKind::HeMul, 1 + u64::from(self_rating));
    // Ticket spend authorization and the engine's signature.
    m.insert(OpKind::Sign, 2);
    // Voter receipt, manager checks of engine and authorization signatures.
    m.insert(OpKind::Verify, 3);
    m
}

/// Threshold query: requester verification and two decryptions.
pub fn query_multiset() -> BTreeMap<OpKind, u64> {
    BTreeMap::from([(OpKind::Verify, 1), (OpKind::Decrypt, 2)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumptions {
    pub businesses: u64,
    pub ratings_per_business_per_day: f64,
    pub self_rating: bool,
    pub screen_feedback: bool,
    /// Scale inputs are placeholders, not measured deployments.
    pub placeholder_inputs: bool,
    pub serial_critical_path: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub backend: BackendKind,
    pub simulation_only: bool,
    pub rating_multiset: BTreeMap<OpKind, u64>,
    pub query_multiset: BTreeMap<OpKind, u64>,
    /// Per-operation share of one rating, `count * mean_us`.
    pub rating_cost_breakdown_us: BTreeMap<OpKind, f64>,
    pub rating_cost_us: f64,
    pub query_cost_us: f64,
    pub ratings_per_second: f64,
    pub queries_per_second: f64,
    pub demand_ratings_per_second: f64,
    pub feasible: bool,
    /// Zero demand is trivially feasible.
    pub trivial: bool,
    pub bottleneck: OpKind,
    pub formula: String,
    pub assumptions: Assumptions,
}

pub fn extrapolate(t: &TimingTable, businesses: u64, ratings_per_business_per_day: f64) -> Result<CapacityReport, BenchError> {
    extrapolate_with(t, businesses, ratings_per_business_per_day, true, false)
}

pub fn extrapolate_with(
    t: &TimingTable,
    businesses: u64,
    ratings_per_business_per_day: f64,
    self_rating: bool,
    screen_feedback: bool,
) -> Result<CapacityReport, BenchError> {
    if !ratings_per_business_per_day.is_finite() || ratings_per_business_per_day < 0.0 {
        return Err(BenchError::InvalidInput(format!(
            "rating rate must be a non-negative number, got {ratings_per_business_per_day}"
        )));
    }
    let rating = rating_multiset(self_rating, screen_feedback);
    let query = query_multiset();
    let mut breakdown = BTreeMap::new();
    for (&op, &n) in &rating {
        breakdown.insert(op, n as f64 * t.cost(op)?);
    }
    let rating_cost: f64 = breakdown.values().sum();
    let mut query_cost = 0.0;
    for (&op, &n) in &query {
        query_cost += n as f64 * t.cost(op)?;
    }
    let bottleneck = breakdown
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(op, _)| *op)
        .expect("multiset is not empty");
    let ratings_per_second = 1e6 / rating_cost;
    let demand = businesses as f64 * ratings_per_business_per_day / 86_400.0;
    Ok(CapacityReport {
        backend: t.backend,
        simulation_only: t.simulation_only,
        rating_multiset: rating,
        query_multiset: query,
        rating_cost_breakdown_us: breakdown,
        rating_cost_us: rating_cost,
        query_cost_us: query_cost,
        ratings_per_second,
        queries_per_second: 1e6 / query_cost,
        demand_ratings_per_second: demand,
        feasible: demand <= ratings_per_second,
        trivial: demand == 0.0,
        bottleneck,
        formula: "ratings_per_second = 1e6 / sum(count[op] * mean_us[op]) over the rating multiset; \
                  queries_per_second likewise over the query multiset; \
                  demand = businesses * ratings_per_business_per_day / 86400; \
                  bottleneck = argmax(count[op] * mean_us[op])"
            .into(),
        assumptions: Assumptions {
            businesses,
            ratings_per_business_per_day,
            self_rating,
            screen_feedback,
            placeholder_inputs: true,
            serial_critical_path: true,
        },
    })
}
