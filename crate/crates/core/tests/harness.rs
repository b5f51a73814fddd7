use std::path::PathBuf;

use proptest::prelude::*;
use repsim_core::harness::{audit, load_scenario, parse_scenario, replay, run, Event, HarnessError, RunOptions, Scenario};
use repsim_core::protocol::{EventLog, LogError, LogLine, OutcomeStatus, QueryMode};

fn corpus() -> Vec<(String, Scenario)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), load_scenario(&p).unwrap()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    assert!(out.len() >= 4);
    out
}

fn named(name: &str) -> Scenario {
    corpus().into_iter().find(|(n, _)| n == name).unwrap().1
}

#[test]
fn corpus_runs_replay_and_audits_clean() {
    for (name, s) in corpus() {
        let out = run(&s, &RunOptions::default()).unwrap();
        assert_eq!(replay(&out.log).unwrap(), out.report, "{name}");
        let again = run(&s, &RunOptions::default()).unwrap();
        assert_eq!(again.log.to_jsonl(), out.log.to_jsonl(), "{name}");
        assert!(out.report.audit.findings.is_empty(), "{name}: {:?}", out.report.audit.findings);
        let full = audit(&out.log, Some(&out.authority)).unwrap();
        assert!(full.findings.is_empty(), "{name}: {:?}", full.findings);
        assert!(full.checks.iter().all(|c| c.passed), "{name}");
    }
}

#[test]
fn minimal_scenario_scores_and_thresholds() {
    let out = run(&named("minimal.json"), &RunOptions::default()).unwrap();
    let bolt = &out.report.scores["bolt"];
    assert_eq!(bolt.version, 1);
    assert!((bolt.score.as_ref().unwrap()[0] - 2.0 / 3.0).abs() < 1e-3);
    let answers: Vec<_> = out.report.outcomes.iter().filter_map(|o| o.answer).collect();
    assert_eq!(answers, vec![true, false]);
    assert!(out.report.flags.transcryption_exposure);
}

#[test]
fn lattice_backend_runs_end_to_end() {
    if !repsim_core::he::lattice_available() {
        return;
    }
    let opts = RunOptions {
        seed: None,
        backend: Some(repsim_core::he::BackendKind::Lattice),
    };
    let out = run(&named("minimal.json"), &opts).unwrap();
    let score = out.report.scores["bolt"].score.clone().unwrap();
    assert!((score[0] - 2.0 / 3.0).abs() < 1e-3, "{score:?}");
    let answers: Vec<_> = out.report.outcomes.iter().filter_map(|o| o.answer).collect();
    assert_eq!(answers, vec![true, false]);
    assert!(out.report.audit.findings.is_empty());
    assert_eq!(replay(&out.log).unwrap(), out.report);
}

#[test]
fn seed_override_changes_log_bytes() {
    let s = named("minimal.json");
    let a = run(&s, &RunOptions::default()).unwrap();
    let b = run(&s, &RunOptions { seed: Some(99), backend: None }).unwrap();
    assert_ne!(a.log.to_jsonl(), b.log.to_jsonl());
    assert_eq!(b.report.seed, 99);
}

#[test]
fn departed_votees_stay_queryable() {
    let out = run(&named("volatile.json"), &RunOptions::default()).unwrap();
    for o in out.report.outcomes.iter().filter(|o| o.kind == "query") {
        assert_eq!(o.status, OutcomeStatus::Ok, "{o:?}");
    }
    let rate = out.report.outcomes.iter().rfind(|o| o.kind == "rate").unwrap();
    assert_eq!(rate.status, OutcomeStatus::Error, "a departed voter cannot rate");
}

#[test]
fn token_replay_is_one_finding() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/faults/token_replay.json");
    let out = run(&load_scenario(path).unwrap(), &RunOptions::default()).unwrap();
    let f = &out.report.audit.findings;
    assert_eq!(f.len(), 1, "{f:?}");
    assert_eq!(f[0].evidence, Some(repsim_core::protocol::EvidenceKind::ReplayedToken));
}

#[test]
fn injected_business_id_breaks_containment() {
    let out = run(&named("minimal.json"), &RunOptions::default()).unwrap();
    let text = out.log.to_jsonl();
    let bid = out.authority.businesses[0].id.0.clone();
    let mut log = EventLog::from_jsonl(&text).unwrap();
    let seq = log
        .lines
        .iter_mut()
        .find_map(|l| match l {
            LogLine::Message { seq, message, .. } if message.payload.name() == "RatingSubmission" => {
                if let repsim_core::protocol::Payload::RatingSubmission(sub) = &mut message.payload {
                    sub.token.0 = bid.clone();
                }
                Some(*seq)
            }
            _ => None,
        })
        .unwrap();
    let a = audit(&log, None).unwrap();
    let c = a.check("identity_containment").unwrap();
    assert!(!c.passed);
    assert_eq!(c.witnesses, vec![seq]);
}

#[test]
fn deleted_line_is_a_gap() {
    let out = run(&named("minimal.json"), &RunOptions::default()).unwrap();
    let text = out.log.to_jsonl();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.remove(5);
    let log = EventLog::from_jsonl(&lines.join("\n")).unwrap();
    assert!(matches!(
        replay(&log),
        Err(HarnessError::Log(LogError::GapDetected { .. }))
    ));
}

#[test]
fn swapped_session_lines_violate_order() {
    let out = run(&named("minimal.json"), &RunOptions::default()).unwrap();
    let mut log = out.log.clone();
    // The voter's key request and the key manager's reply share a correlator.
    let i = log
        .lines
        .iter()
        .position(|l| matches!(l, LogLine::Message { message, .. } if message.payload.name() == "KeyRequest"))
        .unwrap();
    let j = log
        .lines
        .iter()
        .position(|l| matches!(l, LogLine::Message { message, .. } if message.payload.name() == "KeyResponse"))
        .unwrap();
    let (a, b) = (log.lines[i].clone(), log.lines[j].clone());
    let (sa, sb) = (a.seq(), b.seq());
    log.lines[i] = relabel(b, sa);
    log.lines[j] = relabel(a, sb);
    assert!(matches!(
        replay(&log),
        Err(HarnessError::Log(LogError::OrderViolation { .. }))
    ));
}

fn relabel(l: LogLine, s: u64) -> LogLine {
    match l {
        LogLine::Message {
            tick, event, message, ..
        } => LogLine::Message {
            seq: s,
            tick,
            event,
            message,
        },
        other => other,
    }
}

#[test]
fn truncated_log_cannot_be_audited() {
    let out = run(&named("minimal.json"), &RunOptions::default()).unwrap();
    let mut log = out.log.clone();
    log.lines.pop();
    assert!(matches!(audit(&log, None), Err(HarnessError::Log(LogError::Truncated(_)))));
}

#[test]
fn self_query_links_pseudonym_to_handle() {
    let mut s = named("minimal.json");
    s.events.push(Event::Query {
        requester: "bolt".into(),
        votee: "bolt".into(),
        mode: QueryMode::Encrypted,
    });
    let out = run(&s, &RunOptions::default()).unwrap();
    let a = audit(&out.log, Some(&out.authority)).unwrap();
    assert!(!a.check("pseudonym_unlinkability").unwrap().passed);
    assert!(audit(&out.log, None).unwrap().findings.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn logs_roundtrip_through_jsonl(seed in any::<u64>(), rating in 0.0f64..=1.0) {
        let mut s = named("minimal.json");
        if let Event::Rate { rating: r, .. } = &mut s.events[1] {
            *r = vec![rating];
        }
        let out = run(&s, &RunOptions { seed: Some(seed), backend: None }).unwrap();
        let text = out.log.to_jsonl();
        let back = EventLog::from_jsonl(&text).unwrap();
        prop_assert_eq!(&back, &out.log);
        prop_assert_eq!(back.to_jsonl(), text);
    }
}

#[test]
fn schema_errors_are_reported() {
    let e = parse_scenario(r#"{"seed": 1, "businesses": [], "events": [{"type": "teleport"}]}"#).unwrap_err();
    assert!(matches!(e, HarnessError::Schema { ref path, .. } if path.starts_with("events[0]")), "{e}");
}
