mod common;

use common::{random_tree, ulp_slack, TreeBudget};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use repsim_core::he::{
    backend_for, noise_report, BackendKind, HeBackend, HeError, HeParams, PlainVector, ScalarOp,
};

fn params(kind: BackendKind) -> HeParams {
    HeParams {
        slot_count: 8,
        depth_budget: 3,
        epsilon: 1e-6,
        backend_kind: kind,
    }
}

fn backends() -> Vec<Box<dyn HeBackend<f64>>> {
    let mut out = vec![backend_for::<f64>(params(BackendKind::Simulation)).unwrap()];
    if repsim_core::he::lattice_available() {
        out.push(backend_for::<f64>(params(BackendKind::Lattice)).unwrap());
    }
    out
}

fn pv(v: &[f64]) -> PlainVector<f64> {
    PlainVector::new(v.to_vec())
}

fn within(ct_bound: f64, got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!(
            (g - w).abs() <= ct_bound + ulp_slack(*w),
            "got {g}, want {w}, bound {ct_bound}"
        );
    }
}

#[test]
fn keygen_freshness_and_roundtrip() {
    for be in backends() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let k1 = be.keygen(&mut rng).unwrap();
        let k2 = be.keygen(&mut rng).unwrap();
        assert_ne!(k1.key_id, k2.key_id);
        let ct = be.encrypt(&k1.public_key, &pv(&[0.5]), &mut rng).unwrap();
        let out = be.decrypt(&k1.secret_key, &ct).unwrap();
        within(be.fresh_error(), &out.values, &[0.5]);
        assert!(matches!(
            be.decrypt(&k2.secret_key, &ct),
            Err(HeError::KeyMismatch { .. })
        ));
    }
}

#[test]
fn sim_fresh_error_is_epsilon() {
    let be = backend_for::<f64>(params(BackendKind::Simulation)).unwrap();
    assert_eq!(be.fresh_error(), 1e-6);
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let k = be.keygen(&mut rng).unwrap();
    let ct = be.encrypt(&k.public_key, &pv(&[0.0]), &mut rng).unwrap();
    let r = noise_report(&ct);
    assert_eq!(r.level, 3);
    assert_eq!(r.error_bound, 1e-6);
    within(1e-6, &be.decrypt(&k.secret_key, &ct).unwrap().values, &[0.0]);
}

#[test]
fn encrypt_contract() {
    for be in backends() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let k = be.keygen(&mut rng).unwrap();
        let ct = be.encrypt(&k.public_key, &pv(&[0.8, 0.6]), &mut rng).unwrap();
        assert_eq!(ct.level, be.params().depth_budget);
        assert_eq!(ct.key_id, k.key_id);
        assert_eq!(ct.error_bound, be.fresh_error());

        let a = be.encrypt(&k.public_key, &pv(&[0.8]), &mut rng).unwrap();
        let b = be.encrypt(&k.public_key, &pv(&[0.8]), &mut rng).unwrap();
        assert_ne!(a.payload, b.payload, "encryption must be probabilistic");
        within(a.error_bound, &be.decrypt(&k.secret_key, &a).unwrap().values, &[0.8]);
        within(b.error_bound, &be.decrypt(&k.secret_key, &b).unwrap().values, &[0.8]);

        let long = vec![0.1; 9];
        assert!(matches!(
            be.encrypt(&k.public_key, &pv(&long), &mut rng),
            Err(HeError::VectorTooLong { len: 9, slots: 8 })
        ));
    }
}

#[test]
fn addition_contract() {
    for be in backends() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let k = be.keygen(&mut rng).unwrap();
        let other = be.keygen(&mut rng).unwrap();
        let e = |v: f64, rng: &mut ChaCha20Rng| be.encrypt(&k.public_key, &pv(&[v]), rng).unwrap();

        let s = be.add(&e(0.2, &mut rng), &e(0.0, &mut rng)).unwrap();
        assert_eq!(s.error_bound, 2.0 * be.fresh_error());
        within(s.error_bound, &be.decrypt(&k.secret_key, &s).unwrap().values, &[0.2]);

        let s = be.add(&e(0.25, &mut rng), &e(0.5, &mut rng)).unwrap();
        within(s.error_bound, &be.decrypt(&k.secret_key, &s).unwrap().values, &[0.75]);

        let s = be.add(&e(0.3, &mut rng), &e(0.4, &mut rng)).unwrap();
        within(s.error_bound, &be.decrypt(&k.secret_key, &s).unwrap().values, &[0.7]);

        let foreign = be.encrypt(&other.public_key, &pv(&[0.1]), &mut rng).unwrap();
        assert!(matches!(
            be.add(&e(0.1, &mut rng), &foreign),
            Err(HeError::KeyMismatch { .. })
        ));
    }
}

#[test]
fn multiplication_contract() {
    for be in backends() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let k = be.keygen(&mut rng).unwrap();
        let one = be.encrypt(&k.public_key, &pv(&[1.0]), &mut rng).unwrap();
        let x = be.encrypt(&k.public_key, &pv(&[0.7]), &mut rng).unwrap();
        let p = be.mul(&one, &x, &k.eval_key, &mut rng).unwrap();
        within(p.error_bound, &be.decrypt(&k.secret_key, &p).unwrap().values, &[0.7]);

        let h = be.encrypt(&k.public_key, &pv(&[0.5]), &mut rng).unwrap();
        let q = be.mul(&h, &h, &k.eval_key, &mut rng).unwrap();
        assert_eq!(q.level, h.level - 1);
        within(q.error_bound, &be.decrypt(&k.secret_key, &q).unwrap().values, &[0.25]);
        if be.kind() == BackendKind::Simulation {
            assert_eq!(q.error_bound, 3e-6);
        }
    }
}

#[test]
fn depth_exhaustion_at_budget_plus_one() {
    for be in backends() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let k = be.keygen(&mut rng).unwrap();
        let mut acc = be.encrypt(&k.public_key, &pv(&[0.9]), &mut rng).unwrap();
        let mut failed_at = None;
        for i in 1..=be.params().depth_budget + 5 {
            let f = be.encrypt(&k.public_key, &pv(&[0.9]), &mut rng).unwrap();
            match be.mul(&acc, &f, &k.eval_key, &mut rng) {
                Ok(next) => {
                    assert_eq!(next.level, acc.level.min(f.level) - 1);
                    acc = next;
                }
                Err(HeError::DepthExhausted { level: 0 }) => {
                    failed_at = Some(i);
                    break;
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert_eq!(failed_at, Some(be.params().depth_budget + 1));
    }
}

#[test]
fn plaintext_operand_contract() {
    for be in backends() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let k = be.keygen(&mut rng).unwrap();
        let x = be.encrypt(&k.public_key, &pv(&[0.4]), &mut rng).unwrap();
        let a = be.scalar(ScalarOp::Add, &x, &pv(&[0.0]), &mut rng).unwrap();
        within(a.error_bound, &be.decrypt(&k.secret_key, &a).unwrap().values, &[0.4]);
        let m = be.scalar(ScalarOp::Mul, &x, &pv(&[2.0]), &mut rng).unwrap();
        within(m.error_bound, &be.decrypt(&k.secret_key, &m).unwrap().values, &[0.8]);
        let expected_level = if be.plain_mul_consumes_level() { x.level - 1 } else { x.level };
        assert_eq!(m.level, expected_level);
        assert!(matches!(
            be.scalar(ScalarOp::Add, &x, &pv(&[0.1, 0.2]), &mut rng),
            Err(HeError::LengthMismatch { expected: 1, found: 2 })
        ));
    }
}

#[test]
fn repeated_addition_accumulates_linearly_in_sim() {
    let be = backend_for::<f64>(params(BackendKind::Simulation)).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(19);
    let k = be.keygen(&mut rng).unwrap();
    let mut acc = be.encrypt(&k.public_key, &pv(&[0.01]), &mut rng).unwrap();
    for step in 1..=40u32 {
        let f = be.encrypt(&k.public_key, &pv(&[0.01]), &mut rng).unwrap();
        acc = be.add(&acc, &f).unwrap();
        let expected = (step + 1) as f64 * 1e-6;
        assert!((noise_report(&acc).error_bound - expected).abs() < 1e-18);
        assert_eq!(noise_report(&acc).level, 3);
    }
}

#[test]
fn corrupted_payload_is_rejected() {
    for be in backends() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let k = be.keygen(&mut rng).unwrap();
        let mut ct = be.encrypt(&k.public_key, &pv(&[0.3]), &mut rng).unwrap();
        let mid = ct.payload.len() / 2;
        ct.payload[mid] ^= 0x01;
        assert!(matches!(be.decrypt(&k.secret_key, &ct), Err(HeError::Corrupted(_))));
    }
}

#[test]
fn mismatched_eval_key_is_rejected() {
    for be in backends() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let k = be.keygen(&mut rng).unwrap();
        let other = be.keygen(&mut rng).unwrap();
        let x = be.encrypt(&k.public_key, &pv(&[0.3]), &mut rng).unwrap();
        assert!(matches!(
            be.mul(&x, &x, &other.eval_key, &mut rng),
            Err(HeError::KeyMismatch { .. })
        ));
    }
}

#[test]
fn level_never_increases_along_random_chains() {
    for be in backends() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let k = be.keygen(&mut rng).unwrap();
        let mut acc = be.encrypt(&k.public_key, &pv(&[0.5, 0.5]), &mut rng).unwrap();
        let mut prev_bound = acc.error_bound;
        for _ in 0..30 {
            let f = be.encrypt(&k.public_key, &pv(&[0.5, 0.5]), &mut rng).unwrap();
            let next = if rng.gen_bool(0.3) && acc.level > 0 {
                be.mul(&acc, &f, &k.eval_key, &mut rng).unwrap()
            } else {
                be.add(&acc, &f).unwrap()
            };
            assert!(next.level <= acc.level);
            assert!(next.error_bound >= prev_bound);
            prev_bound = next.error_bound;
            acc = next;
        }
    }
}

#[test]
fn random_trees_match_plaintext_on_both_backends() {
    for be in backends() {
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        let k = be.keygen(&mut rng).unwrap();
        let cases = if be.kind() == BackendKind::Simulation { 300 } else { 60 };
        for _ in 0..cases {
            let mut budget = TreeBudget {
                mul_depth: 2,
                adds: 12,
                plain_mul_costs_depth: be.plain_mul_consumes_level(),
            };
            let tree = random_tree(&mut rng, 3, &mut budget);
            let want = tree.plain();
            let ct = tree.encrypted(be.as_ref(), &k, &mut rng).unwrap();
            let got = be.decrypt(&k.secret_key, &ct).unwrap();
            within(ct.error_bound, &got.values, &want);
        }
    }
}

#[test]
fn generic_over_f32_scalar() {
    let be = backend_for::<f32>(params(BackendKind::Simulation)).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    let k = be.keygen(&mut rng).unwrap();
    let a = be.encrypt(&k.public_key, &PlainVector::new(vec![0.25f32]), &mut rng).unwrap();
    let b = be.encrypt(&k.public_key, &PlainVector::new(vec![0.5f32]), &mut rng).unwrap();
    let s = be.add(&a, &b).unwrap();
    let out = be.decrypt(&k.secret_key, &s).unwrap();
    assert!((out.values[0] - 0.75).abs() < 1e-5);
}
