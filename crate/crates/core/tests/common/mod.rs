//! Test-only plaintext oracles shared by the integration suites.
#![allow(dead_code)]

use rand::Rng;
use repsim_core::he::{Ciphertext, HeBackend, HeError, KeyMaterial, PlainVector, ScalarOp};

/// Arithmetic expression over slot vectors, evaluated either in plaintext
/// or homomorphically.
#[derive(Debug, Clone)]
pub enum Expr {
    Leaf(Vec<f64>),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    PlainAdd(Box<Expr>, Vec<f64>),
    PlainMul(Box<Expr>, Vec<f64>),
}

pub struct TreeBudget {
    pub mul_depth: u32,
    pub adds: u32,
    pub plain_mul_costs_depth: bool,
}

impl Expr {
    pub fn plain(&self) -> Vec<f64> {
        match self {
            Expr::Leaf(v) => v.clone(),
            Expr::Add(a, b) => zip(&a.plain(), &b.plain(), |x, y| x + y),
            Expr::Mul(a, b) => zip(&a.plain(), &b.plain(), |x, y| x * y),
            Expr::PlainAdd(a, p) => a.plain().iter().zip(p).map(|(x, c)| x + c).collect(),
            Expr::PlainMul(a, p) => a.plain().iter().zip(p).map(|(x, c)| x * c).collect(),
        }
    }

    pub fn encrypted(
        &self,
        be: &dyn HeBackend<f64>,
        km: &KeyMaterial,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Ciphertext, HeError> {
        match self {
            Expr::Leaf(v) => be.encrypt(&km.public_key, &PlainVector::new(v.clone()), rng),
            Expr::Add(a, b) => {
                let x = a.encrypted(be, km, rng)?;
                let y = b.encrypted(be, km, rng)?;
                be.add(&x, &y)
            }
            Expr::Mul(a, b) => {
                let x = a.encrypted(be, km, rng)?;
                let y = b.encrypted(be, km, rng)?;
                be.mul(&x, &y, &km.eval_key, rng)
            }
            Expr::PlainAdd(a, p) => {
                let x = a.encrypted(be, km, rng)?;
                be.scalar(ScalarOp::Add, &x, &PlainVector::new(p.clone()), rng)
            }
            Expr::PlainMul(a, p) => {
                let x = a.encrypted(be, km, rng)?;
                be.scalar(ScalarOp::Mul, &x, &PlainVector::new(p.clone()), rng)
            }
        }
    }

    pub fn mul_depth(&self) -> u32 {
        match self {
            Expr::Leaf(_) => 0,
            Expr::Add(a, b) => a.mul_depth().max(b.mul_depth()),
            Expr::Mul(a, b) => 1 + a.mul_depth().max(b.mul_depth()),
            Expr::PlainAdd(a, _) | Expr::PlainMul(a, _) => a.mul_depth(),
        }
    }

    pub fn additions(&self) -> u32 {
        match self {
            Expr::Leaf(_) => 0,
            Expr::Add(a, b) => 1 + a.additions() + b.additions(),
            Expr::Mul(a, b) => a.additions() + b.additions(),
            Expr::PlainAdd(a, _) => 1 + a.additions(),
            Expr::PlainMul(a, _) => a.additions(),
        }
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| f(*a.get(i).unwrap_or(&0.0), *b.get(i).unwrap_or(&0.0)))
        .collect()
}

fn unit_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(0.0..=1.0)).collect()
}

/// Random tree over `[0,1]` leaves respecting the depth and addition budget.
pub fn random_tree(rng: &mut impl Rng, slots: usize, budget: &mut TreeBudget) -> Expr {
    let roll = rng.gen_range(0..10);
    if roll < 3 {
        return Expr::Leaf(unit_vec(rng, slots));
    }
    if roll < 6 && budget.adds > 0 {
        budget.adds -= 1;
        let a = random_tree(rng, slots, budget);
        let b = random_tree(rng, slots, budget);
        return Expr::Add(Box::new(a), Box::new(b));
    }
    if roll < 8 && budget.mul_depth > 0 {
        let saved = budget.mul_depth;
        budget.mul_depth -= 1;
        let a = random_tree(rng, slots, budget);
        let b = random_tree(rng, slots, budget);
        budget.mul_depth = saved;
        return Expr::Mul(Box::new(a), Box::new(b));
    }
    if roll == 8 && budget.adds > 0 {
        budget.adds -= 1;
        let a = random_tree(rng, slots, budget);
        return Expr::PlainAdd(Box::new(a), unit_vec(rng, slots));
    }
    if roll == 9 && (!budget.plain_mul_costs_depth || budget.mul_depth > 0) {
        let saved = budget.mul_depth;
        if budget.plain_mul_costs_depth {
            budget.mul_depth -= 1;
        }
        let a = random_tree(rng, slots, budget);
        budget.mul_depth = saved;
        let p = (0..slots).map(|_| rng.gen_range(0.0..=2.0)).collect();
        return Expr::PlainMul(Box::new(a), p);
    }
    Expr::Leaf(unit_vec(rng, slots))
}

/// Slack for rounding of the final float addition in decryption.
pub fn ulp_slack(v: f64) -> f64 {
    8.0 * f64::EPSILON * v.abs().max(1.0)
}
