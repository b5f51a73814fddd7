use repsim_core::he::HeParams;
use repsim_core::identity::AuthorityConfig;
use repsim_core::protocol::{
    detect_evidence, EnginePolicy, EvidenceKind, Misbehavior, QueryMode, QueryResult, RateRequest,
    SessionStatus, System, SystemConfig,
};
use repsim_core::reputation::SystemProfile;

fn system(seed: u64, engines: usize) -> System {
    let mut s = System::new(SystemConfig {
        seed,
        he_params: HeParams::default(),
        profile: SystemProfile::default(),
        dims: 1,
        engine_count: engines,
        engine_policy: EnginePolicy::RoundRobin,
        authority: AuthorityConfig::default(),
    })
    .unwrap();
    s.register("alpha", "DE", None, true).unwrap();
    s.register("beta", "FR", None, true).unwrap();
    s.register("gamma", "IT", Some(&[0.9]), true).unwrap();
    s.begin_log("test");
    s
}

fn rate(voter: &str, votee: &str, v: f64, m: Option<Misbehavior>) -> RateRequest {
    RateRequest {
        voter: voter.into(),
        votee: votee.into(),
        rating: vec![v],
        with_self_rating: None,
        misbehavior: m,
    }
}

fn score(s: &System, name: &str) -> f64 {
    s.live_scores()[s.rep_of(name).unwrap()].1[0]
}

#[test]
fn single_rating_matches_weighted_prior() {
    let mut s = system(1, 3);
    s.begin_event(0);
    s.contract("alpha", "beta", "m").unwrap();
    s.begin_event(1);
    let st = s.rate(&rate("alpha", "beta", 1.0, None)).unwrap();
    assert_eq!(st, vec![SessionStatus::Accepted { version: 1 }]);
    let oracle = (0.5 * 1.0 + 0.5 * 1.0) / (1.0 + 0.5);
    assert!((score(&s, "beta") - oracle).abs() < 1e-3);
    let log = s.finish_log();
    log.validate().unwrap();
    assert!(detect_evidence(&log).unwrap().is_empty());
}

#[test]
fn threshold_and_encrypted_queries() {
    let mut s = system(2, 1);
    s.begin_event(0);
    s.contract("alpha", "beta", "m").unwrap();
    s.rate(&rate("alpha", "beta", 1.0, None)).unwrap();
    assert_eq!(
        s.query("gamma", "beta", QueryMode::Threshold(0.5)).unwrap(),
        QueryResult::Threshold { passed: true, version: 1 }
    );
    assert_eq!(
        s.query("gamma", "beta", QueryMode::Threshold(0.7)).unwrap(),
        QueryResult::Threshold { passed: false, version: 1 }
    );
    let a = s.query("gamma", "beta", QueryMode::Encrypted).unwrap();
    let b = s.query("alpha", "beta", QueryMode::Encrypted).unwrap();
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    match s.query("alpha", "gamma", QueryMode::Threshold(0.1)).unwrap() {
        QueryResult::Error(e) => assert!(e.contains("EmptyState"), "{e}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn self_rating_and_departed_votee() {
    let mut s = system(3, 2);
    s.begin_event(0);
    s.contract("alpha", "gamma", "m").unwrap();
    s.contract("beta", "gamma", "m").unwrap();
    let st = s.rate(&rate("alpha", "gamma", 0.2, None)).unwrap();
    assert_eq!(st, vec![SessionStatus::Accepted { version: 1 }]);
    // S = 0.5*0.2 + 0.9*0.5, W = 0.5 + 0.5
    let n = 0.5 + 0.5 * 0.2 + 0.9 * 0.5;
    let d = 1.0 + 1.0;
    assert!((score(&s, "gamma") - n / d).abs() < 1e-3, "{}", score(&s, "gamma"));
    s.depart("gamma").unwrap();
    let st = s.rate(&rate("beta", "gamma", 1.0, None)).unwrap();
    assert_eq!(st, vec![SessionStatus::Accepted { version: 2 }]);
    let n2 = n + 0.5 * 1.0;
    let d2 = d + 0.5;
    assert!((score(&s, "gamma") - n2 / d2).abs() < 1e-3);
    assert!(matches!(
        s.query("alpha", "gamma", QueryMode::Threshold(0.1)).unwrap(),
        QueryResult::Threshold { passed: true, version: 2 }
    ));
    s.finish_log().validate().unwrap();
}

#[test]
fn each_misbehavior_leaves_one_evidence() {
    let cases = [
        (Misbehavior::TokenReplay, EvidenceKind::ReplayedToken),
        (Misbehavior::TicketReplay, EvidenceKind::ReplayedTicket),
        (Misbehavior::DoubleSpendRace, EvidenceKind::ReplayedTicket),
        (Misbehavior::CiphertextTamper, EvidenceKind::TamperedUpdate),
        (Misbehavior::ForgedSignature, EvidenceKind::BadSignature),
        (Misbehavior::DepthViolation, EvidenceKind::DepthViolation),
    ];
    for (i, (m, kind)) in cases.into_iter().enumerate() {
        let mut s = system(10 + i as u64, 3);
        s.begin_event(0);
        s.contract("alpha", "beta", "m").unwrap();
        s.contract("alpha", "beta", "n").unwrap();
        s.rate(&rate("alpha", "beta", 0.8, None)).unwrap();
        let statuses = s.rate(&rate("alpha", "beta", 0.3, Some(m))).unwrap();
        let accepted = statuses
            .iter()
            .filter(|st| matches!(st, SessionStatus::Accepted { .. }))
            .count();
        let expect_accepted = match m {
            Misbehavior::CiphertextTamper | Misbehavior::ForgedSignature | Misbehavior::DepthViolation => 0,
            _ => 1,
        };
        assert_eq!(accepted, expect_accepted, "{m:?}: {statuses:?}");
        let log = s.finish_log();
        log.validate().unwrap();
        let ev = detect_evidence(&log).unwrap();
        assert_eq!(ev.len(), 1, "{m:?}: {ev:?}");
        assert_eq!(ev[0].kind, kind, "{m:?}");
        assert!(ev[0].reverify(&log), "{m:?}");
    }
}

#[test]
fn runs_are_deterministic() {
    let run = || {
        let mut s = system(7, 3);
        s.begin_event(0);
        s.contract("alpha", "beta", "m").unwrap();
        s.contract("gamma", "beta", "m").unwrap();
        s.rate(&rate("alpha", "beta", 0.4, None)).unwrap();
        s.rate(&rate("gamma", "beta", 0.9, None)).unwrap();
        s.finish_log().to_jsonl()
    };
    assert_eq!(run(), run());
}

