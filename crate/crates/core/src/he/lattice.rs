//! RLWE approximate-arithmetic backend over `Z_{2^k}[X]/(X^N + 1)`.
//!
//! Layout for depth budget `L`:
//!
//! * ring degree `N = max(8, next_pow2(2 * slot_count))`, `N/2` real slots
//!   through the canonical embedding at the roots `zeta^(5^j)`;
//! * scale `Delta = 2^d` with `d = min(40, (126 - 20) / (L + 1))`;
//! * modulus chain `Q_l = 2^(d + 20) * Delta^l`, so every level is a power
//!   of two and dropping a level is a mask. `Q_L <= 2^126`;
//! * ternary secret, uniform errors in `[-4, 4]`, relinearization by
//!   base-`2^16` gadget decomposition, rescale by exact division by `Delta`.
//!
//! Error bounds are worst case in slot units (`N` = ring degree, `B = 4`,
//! `D` = gadget digits, `M` = tracked magnitude bound):
//!
//! * fresh: `N * ((2N + 1) * B + 1/2) / Delta`
//! * add: `e_a + e_b`
//! * mul: `M_a e_b + M_b e_a + e_a e_b + N^2 D (2^16 - 1) B / Delta^2
//!   + N (1 + N) / (2 Delta)`
//! * plain add: `e_a + N / (2 Delta)`
//! * plain mul: `M_a h + (P + h) e_a + N (1 + N) / (2 Delta)` with
//!   `h = N / (2 Delta)`, `P = max |p|`; it consumes one level.
//!
//! Each bound also carries a floating-point slack of `N (M + 1) 2^-44`, and
//! products never report a bound below that of their inputs.
//! Parameters are sized for tests, not for any security level.

use std::f64::consts::PI;
use std::marker::PhantomData;

use rand::{Rng, RngCore};

use super::{
    check_same_key, fresh_key_id, open_payload, seal_payload, BackendKind, Ciphertext, EvalKey,
    HeBackend, HeError, HeParams, KeyId, KeyMaterial, PlainVector, PublicKey, ScalarOp,
    SecretKey,
};
use crate::scalar::Scalar;

const HEADROOM_BITS: u32 = 20;
const MAX_MOD_BITS: u32 = 126;
const GADGET_BITS: u32 = 16;
const ERR_B: i64 = 4;
const LATTICE_TAG: u8 = b'L';

type Poly = Vec<u128>;

#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    delta_bits: u32,
    q0_bits: u32,
    levels: u32,
    digits: usize,
}

impl Layout {
    fn for_params(p: &HeParams) -> Result<Self, HeError> {
        let n = (2 * p.slot_count).next_power_of_two().max(8);
        let delta_bits = ((MAX_MOD_BITS - HEADROOM_BITS) / (p.depth_budget + 1)).min(40);
        if delta_bits < 20 {
            return Err(HeError::InvalidParams(format!(
                "depth_budget {} leaves a {}-bit scale; the lattice backend needs at least 20",
                p.depth_budget, delta_bits
            )));
        }
        let q0_bits = delta_bits + HEADROOM_BITS;
        let top = q0_bits + p.depth_budget * delta_bits;
        Ok(Layout {
            n,
            delta_bits,
            q0_bits,
            levels: p.depth_budget,
            digits: top.div_ceil(GADGET_BITS) as usize,
        })
    }

    fn bits(&self, level: u32) -> u32 {
        self.q0_bits + level * self.delta_bits
    }

    fn delta(&self) -> f64 {
        (self.delta_bits as f64).exp2()
    }
}

fn mask(bits: u32) -> u128 {
    if bits >= 128 {
        u128::MAX
    } else {
        (1u128 << bits) - 1
    }
}

fn reduce(p: &[u128], bits: u32) -> Poly {
    let m = mask(bits);
    p.iter().map(|c| c & m).collect()
}

fn centered(c: u128, bits: u32) -> i128 {
    let c = c & mask(bits);
    let half = 1u128 << (bits - 1);
    if c >= half {
        c as i128 - (1i128 << bits)
    } else {
        c as i128
    }
}

fn from_signed(v: i128) -> u128 {
    v as u128
}

fn padd(a: &[u128], b: &[u128], bits: u32) -> Poly {
    let m = mask(bits);
    a.iter().zip(b).map(|(x, y)| x.wrapping_add(*y) & m).collect()
}

fn pmul(a: &[u128], b: &[u128], bits: u32) -> Poly {
    let n = a.len();
    let mut out = vec![0u128; n];
    for (i, &x) in a.iter().enumerate() {
        if x == 0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            let prod = x.wrapping_mul(y);
            let k = i + j;
            if k < n {
                out[k] = out[k].wrapping_add(prod);
            } else {
                out[k - n] = out[k - n].wrapping_sub(prod);
            }
        }
    }
    let m = mask(bits);
    out.iter_mut().for_each(|c| *c &= m);
    out
}

fn small_to_ring(v: &[i64]) -> Poly {
    v.iter().map(|&x| from_signed(x as i128)).collect()
}

fn sample_ternary(rng: &mut dyn RngCore, n: usize) -> Vec<i64> {
    (0..n).map(|_| rng.gen_range(-1i64..=1)).collect()
}

fn sample_error(rng: &mut dyn RngCore, n: usize) -> Vec<i64> {
    (0..n).map(|_| rng.gen_range(-ERR_B..=ERR_B)).collect()
}

fn sample_uniform(rng: &mut dyn RngCore, n: usize, bits: u32) -> Poly {
    let m = mask(bits);
    (0..n)
        .map(|_| {
            let hi = rng.next_u64() as u128;
            let lo = rng.next_u64() as u128;
            ((hi << 64) | lo) & m
        })
        .collect()
}

fn put_poly(out: &mut Vec<u8>, p: &[u128]) {
    for c in p {
        out.extend_from_slice(&c.to_le_bytes());
    }
}

fn take_poly(bytes: &[u8], n: usize) -> Result<(Poly, &[u8]), HeError> {
    if bytes.len() < n * 16 {
        return Err(HeError::Corrupted("truncated polynomial".into()));
    }
    let (head, rest) = bytes.split_at(n * 16);
    let p = head
        .chunks_exact(16)
        .map(|c| u128::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((p, rest))
}

struct LatticeCt {
    level: u32,
    used: usize,
    magnitude: f64,
    c0: Poly,
    c1: Poly,
}

/// RLWE approximate-arithmetic backend; see the module docs for the
/// parameter layout and the error formulas.
pub struct LatticeBackend<T> {
    params: HeParams,
    layout: Layout,
    /// `cos(pi * k_j * i / N)` for slot `j`, coefficient `i`.
    cos_table: Vec<Vec<f64>>,
    _scalar: PhantomData<fn() -> T>,
}

impl<T: Scalar> LatticeBackend<T> {
    pub fn new(params: HeParams) -> Result<Self, HeError> {
        params.validate()?;
        let layout = Layout::for_params(&params)?;
        let n = layout.n;
        let two_n = 2 * n;
        let mut cos_table = Vec::with_capacity(n / 2);
        let mut k = 1usize;
        for _ in 0..n / 2 {
            cos_table.push(
                (0..n)
                    .map(|i| PI * ((k * i) % two_n) as f64 / n as f64)
                    .map(f64::cos)
                    .collect(),
            );
            k = (k * 5) % two_n;
        }
        Ok(LatticeBackend {
            params,
            layout,
            cos_table,
            _scalar: PhantomData,
        })
    }

    pub fn ring_degree(&self) -> usize {
        self.layout.n
    }

    pub fn scale_bits(&self) -> u32 {
        self.layout.delta_bits
    }

    fn slack(&self, magnitude: f64) -> f64 {
        self.layout.n as f64 * (magnitude + 1.0) * (-44f64).exp2()
    }

    fn encoding_error(&self) -> f64 {
        self.layout.n as f64 * 0.5 / self.layout.delta()
    }

    fn rescale_error(&self) -> f64 {
        let n = self.layout.n as f64;
        n * (1.0 + n) / (2.0 * self.layout.delta())
    }

    fn relin_error(&self) -> f64 {
        let n = self.layout.n as f64;
        let d = self.layout.delta();
        n * n * self.layout.digits as f64 * ((1u64 << GADGET_BITS) - 1) as f64 * ERR_B as f64
            / (d * d)
    }

    fn max_magnitude(&self) -> f64 {
        ((HEADROOM_BITS - 1) as f64).exp2()
    }

    fn encode(&self, values: &[f64], bits: u32) -> Poly {
        let n = self.layout.n;
        let factor = 2.0 * self.layout.delta() / n as f64;
        (0..n)
            .map(|i| {
                let acc: f64 = values
                    .iter()
                    .zip(&self.cos_table)
                    .map(|(z, row)| z * row[i])
                    .sum();
                from_signed((factor * acc).round() as i128) & mask(bits)
            })
            .collect()
    }

    fn decode(&self, m: &[u128], bits: u32, used: usize) -> Vec<f64> {
        let coeffs: Vec<f64> = m.iter().map(|&c| centered(c, bits) as f64).collect();
        let delta = self.layout.delta();
        self.cos_table[..used]
            .iter()
            .map(|row| coeffs.iter().zip(row).map(|(c, w)| c * w).sum::<f64>() / delta)
            .collect()
    }

    fn parse(&self, ct: &Ciphertext) -> Result<LatticeCt, HeError> {
        let body = open_payload(&ct.key_id, &ct.payload)?;
        if body.first() != Some(&LATTICE_TAG) || body.len() < 17 {
            return Err(HeError::Corrupted("not a lattice ciphertext".into()));
        }
        let level = u32::from_le_bytes(body[1..5].try_into().unwrap());
        let used = u32::from_le_bytes(body[5..9].try_into().unwrap()) as usize;
        let magnitude = f64::from_le_bytes(body[9..17].try_into().unwrap());
        if level != ct.level || level > self.layout.levels || used > self.params.slot_count {
            return Err(HeError::Corrupted("header disagrees with envelope".into()));
        }
        let (c0, rest) = take_poly(&body[17..], self.layout.n)?;
        let (c1, rest) = take_poly(rest, self.layout.n)?;
        if !rest.is_empty() {
            return Err(HeError::Corrupted("trailing bytes".into()));
        }
        Ok(LatticeCt {
            level,
            used,
            magnitude,
            c0,
            c1,
        })
    }

    fn seal(&self, key_id: &KeyId, ct: &LatticeCt, error_bound: f64) -> Ciphertext {
        let mut body = Vec::with_capacity(17 + 32 * self.layout.n);
        body.push(LATTICE_TAG);
        body.extend_from_slice(&ct.level.to_le_bytes());
        body.extend_from_slice(&(ct.used as u32).to_le_bytes());
        body.extend_from_slice(&ct.magnitude.to_le_bytes());
        put_poly(&mut body, &ct.c0);
        put_poly(&mut body, &ct.c1);
        Ciphertext {
            key_id: key_id.clone(),
            level: ct.level,
            error_bound,
            payload: seal_payload(key_id, body),
        }
    }

    fn secret_poly(&self, sk: &SecretKey) -> Result<Poly, HeError> {
        if sk.bytes.len() != self.layout.n {
            return Err(HeError::Corrupted("secret key has wrong length".into()));
        }
        Ok(small_to_ring(
            &sk.bytes.iter().map(|&b| b as i64 - 1).collect::<Vec<_>>(),
        ))
    }

    fn rescale(&self, p: &[u128], from_bits: u32) -> Poly {
        let delta = 1i128 << self.layout.delta_bits;
        let to_bits = from_bits - self.layout.delta_bits;
        p.iter()
            .map(|&c| {
                let v = centered(c, from_bits);
                from_signed((v + delta / 2).div_euclid(delta)) & mask(to_bits)
            })
            .collect()
    }

    fn check_magnitude(&self, m: f64) -> Result<(), HeError> {
        if m.is_finite() && m < self.max_magnitude() {
            Ok(())
        } else {
            Err(HeError::MagnitudeOverflow(m))
        }
    }
}

impl<T: Scalar> HeBackend<T> for LatticeBackend<T> {
    fn kind(&self) -> BackendKind {
        BackendKind::Lattice
    }

    fn params(&self) -> &HeParams {
        &self.params
    }

    fn fresh_error(&self) -> f64 {
        let n = self.layout.n as f64;
        n * ((2.0 * n + 1.0) * ERR_B as f64 + 0.5) / self.layout.delta() + self.slack(1.0)
    }

    fn plain_mul_consumes_level(&self) -> bool {
        true
    }

    fn keygen(&self, rng: &mut dyn RngCore) -> Result<KeyMaterial, HeError> {
        let n = self.layout.n;
        let top = self.layout.bits(self.layout.levels);
        let key_id = fresh_key_id(rng);
        let s_small = sample_ternary(rng, n);
        let s = small_to_ring(&s_small);
        let s2 = pmul(&s, &s, top);

        let a = sample_uniform(rng, n, top);
        let e = small_to_ring(&sample_error(rng, n));
        let b = padd(&pmul(&a, &s, top).iter().map(|c| c.wrapping_neg()).collect::<Vec<_>>(), &e, top);
        let mut pk = Vec::new();
        put_poly(&mut pk, &b);
        put_poly(&mut pk, &a);

        let mut evk = Vec::new();
        for t in 0..self.layout.digits {
            let shift = GADGET_BITS * t as u32;
            let gadget: Poly = if shift >= 128 {
                vec![0; n]
            } else {
                s2.iter().map(|c| c.wrapping_shl(shift) & mask(top)).collect()
            };
            let ai = sample_uniform(rng, n, top);
            let ei = small_to_ring(&sample_error(rng, n));
            let neg_as: Poly = pmul(&ai, &s, top).iter().map(|c| c.wrapping_neg()).collect();
            let bi = padd(&padd(&neg_as, &ei, top), &gadget, top);
            put_poly(&mut evk, &bi);
            put_poly(&mut evk, &ai);
        }

        Ok(KeyMaterial {
            public_key: PublicKey {
                key_id: key_id.clone(),
                bytes: pk,
            },
            secret_key: SecretKey {
                key_id: key_id.clone(),
                bytes: s_small.iter().map(|&x| (x + 1) as u8).collect(),
            },
            eval_key: EvalKey {
                key_id: key_id.clone(),
                bytes: evk,
            },
            key_id,
        })
    }

    fn encrypt(
        &self,
        pk: &PublicKey,
        pt: &PlainVector<T>,
        rng: &mut dyn RngCore,
    ) -> Result<Ciphertext, HeError> {
        if pt.len() > self.params.slot_count {
            return Err(HeError::VectorTooLong {
                len: pt.len(),
                slots: self.params.slot_count,
            });
        }
        let values = pt.checked_f64()?;
        let magnitude = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.check_magnitude(magnitude)?;
        let n = self.layout.n;
        let top = self.layout.bits(self.layout.levels);
        let (b, rest) = take_poly(&pk.bytes, n)?;
        let (a, _) = take_poly(rest, n)?;
        let v = small_to_ring(&sample_ternary(rng, n));
        let e0 = small_to_ring(&sample_error(rng, n));
        let e1 = small_to_ring(&sample_error(rng, n));
        let m = self.encode(&values, top);
        let c0 = padd(&padd(&pmul(&b, &v, top), &e0, top), &m, top);
        let c1 = padd(&pmul(&a, &v, top), &e1, top);
        let ct = LatticeCt {
            level: self.layout.levels,
            used: values.len(),
            magnitude,
            c0,
            c1,
        };
        Ok(self.seal(&pk.key_id, &ct, HeBackend::<T>::fresh_error(self)))
    }

    fn decrypt(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<PlainVector<T>, HeError> {
        check_same_key(&sk.key_id, &ct.key_id)?;
        let c = self.parse(ct)?;
        let bits = self.layout.bits(c.level);
        let s = self.secret_poly(sk)?;
        let m = padd(&c.c0, &pmul(&c.c1, &s, bits), bits);
        Ok(PlainVector::new(
            self.decode(&m, bits, c.used).into_iter().map(T::from_f64_lossy).collect(),
        ))
    }

    fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, HeError> {
        check_same_key(&a.key_id, &b.key_id)?;
        let x = self.parse(a)?;
        let y = self.parse(b)?;
        let level = x.level.min(y.level);
        let bits = self.layout.bits(level);
        let magnitude = x.magnitude + y.magnitude;
        self.check_magnitude(magnitude)?;
        let ct = LatticeCt {
            level,
            used: x.used.max(y.used),
            magnitude,
            c0: padd(&reduce(&x.c0, bits), &reduce(&y.c0, bits), bits),
            c1: padd(&reduce(&x.c1, bits), &reduce(&y.c1, bits), bits),
        };
        Ok(self.seal(&a.key_id, &ct, a.error_bound + b.error_bound))
    }

    fn mul(
        &self,
        a: &Ciphertext,
        b: &Ciphertext,
        ek: &EvalKey,
        _rng: &mut dyn RngCore,
    ) -> Result<Ciphertext, HeError> {
        check_same_key(&a.key_id, &b.key_id)?;
        check_same_key(&a.key_id, &ek.key_id)?;
        let x = self.parse(a)?;
        let y = self.parse(b)?;
        let level = x.level.min(y.level);
        if level == 0 {
            return Err(HeError::DepthExhausted { level });
        }
        let magnitude = x.magnitude * y.magnitude;
        self.check_magnitude(magnitude)?;
        let n = self.layout.n;
        let bits = self.layout.bits(level);
        let (xc0, xc1) = (reduce(&x.c0, bits), reduce(&x.c1, bits));
        let (yc0, yc1) = (reduce(&y.c0, bits), reduce(&y.c1, bits));
        let d0 = pmul(&xc0, &yc0, bits);
        let d1 = padd(&pmul(&xc0, &yc1, bits), &pmul(&xc1, &yc0, bits), bits);
        let d2 = pmul(&xc1, &yc1, bits);

        let mut c0 = d0;
        let mut c1 = d1;
        let mut rest = ek.bytes.as_slice();
        let used_digits = bits.div_ceil(GADGET_BITS) as usize;
        for t in 0..self.layout.digits {
            let (bi, r) = take_poly(rest, n)?;
            let (ai, r) = take_poly(r, n)?;
            rest = r;
            if t >= used_digits {
                continue;
            }
            let shift = GADGET_BITS * t as u32;
            let digit: Poly = d2
                .iter()
                .map(|c| (c >> shift) & mask(GADGET_BITS))
                .collect();
            c0 = padd(&c0, &pmul(&digit, &reduce(&bi, bits), bits), bits);
            c1 = padd(&c1, &pmul(&digit, &reduce(&ai, bits), bits), bits);
        }

        let ct = LatticeCt {
            level: level - 1,
            used: x.used.max(y.used),
            magnitude,
            c0: self.rescale(&c0, bits),
            c1: self.rescale(&c1, bits),
        };
        let bound = x.magnitude * b.error_bound
            + y.magnitude * a.error_bound
            + a.error_bound * b.error_bound
            + self.relin_error()
            + self.rescale_error()
            + self.slack(magnitude);
        Ok(self.seal(&a.key_id, &ct, bound.max(a.error_bound).max(b.error_bound)))
    }

    fn scalar(
        &self,
        op: ScalarOp,
        a: &Ciphertext,
        p: &PlainVector<T>,
        _rng: &mut dyn RngCore,
    ) -> Result<Ciphertext, HeError> {
        let x = self.parse(a)?;
        if p.len() != x.used {
            return Err(HeError::LengthMismatch {
                expected: x.used,
                found: p.len(),
            });
        }
        let pv = p.checked_f64()?;
        let pmax = pv.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let bits = self.layout.bits(x.level);
        let enc_err = self.encoding_error();
        match op {
            ScalarOp::Add => {
                let magnitude = x.magnitude + pmax;
                self.check_magnitude(magnitude)?;
                let m = self.encode(&pv, bits);
                let ct = LatticeCt {
                    c0: padd(&x.c0, &m, bits),
                    magnitude,
                    ..x
                };
                Ok(self.seal(&a.key_id, &ct, a.error_bound + enc_err + self.slack(magnitude)))
            }
            ScalarOp::Mul => {
                if x.level == 0 {
                    return Err(HeError::DepthExhausted { level: 0 });
                }
                let magnitude = x.magnitude * pmax;
                self.check_magnitude(magnitude)?;
                let m = self.encode(&pv, bits);
                let ct = LatticeCt {
                    level: x.level - 1,
                    used: x.used,
                    magnitude,
                    c0: self.rescale(&pmul(&x.c0, &m, bits), bits),
                    c1: self.rescale(&pmul(&x.c1, &m, bits), bits),
                };
                let bound = x.magnitude * enc_err
                    + (pmax + enc_err) * a.error_bound
                    + self.rescale_error()
                    + self.slack(magnitude.max(x.magnitude));
                Ok(self.seal(&a.key_id, &ct, bound.max(a.error_bound)))
            }
        }
    }
}
