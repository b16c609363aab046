//! Test-side oracles, coded independently of the library.
#![allow(dead_code)]

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{Float, One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};
use uop::{ObjectBinding, ObjectName, Pdu, PduType};

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite")
}

/// Splits finite values into integer mantissas over one shared power of two:
/// `v[i] = m[i] · 2^e`.
fn common_scale(values: &[f64]) -> (Vec<BigInt>, i32) {
    let parts: Vec<(BigInt, i32)> = values
        .iter()
        .map(|&v| {
            let (mantissa, exponent, sign) = v.integer_decode();
            (BigInt::from(sign) * BigInt::from(mantissa), exponent as i32)
        })
        .collect();
    let e = parts
        .iter()
        .filter(|(m, _)| !m.is_zero())
        .map(|p| p.1)
        .min()
        .unwrap_or(0);
    let mantissas = parts
        .into_iter()
        .map(|(m, pe)| if m.is_zero() { m } else { m << (pe - e) as usize })
        .collect();
    (mantissas, e)
}

fn pow2(e: i32) -> BigRational {
    let one = BigInt::one();
    if e >= 0 {
        BigRational::from_integer(one << e as usize)
    } else {
        BigRational::new(one.clone(), one << (-e) as usize)
    }
}

/// Least-squares polynomial of degree `order` through `(x, t)`, solved exactly.
/// Inputs are rescaled to integers, the normal equations are accumulated in
/// integer arithmetic and solved by Gauss-Jordan over the rationals.
/// Returns `None` for a singular system.
pub fn exact_fit(points: &[(f64, f64)], order: usize) -> Option<Vec<BigRational>> {
    let n = order + 1;
    let (zs, ex) = common_scale(&points.iter().map(|p| p.0).collect::<Vec<_>>());
    let (us, et) = common_scale(&points.iter().map(|p| p.1).collect::<Vec<_>>());
    // powers[i][k] = z_i^k for k in 0..=2·order
    let powers: Vec<Vec<BigInt>> = zs
        .iter()
        .map(|z| {
            let mut row = vec![BigInt::one()];
            for k in 1..=2 * order {
                let next = &row[k - 1] * z;
                row.push(next);
            }
            row
        })
        .collect();
    let moment = |k: usize| -> BigInt { powers.iter().map(|p| &p[k]).sum() };
    let moments: Vec<BigInt> = (0..=2 * order).map(moment).collect();
    let mut m: Vec<Vec<BigRational>> = (0..n)
        .map(|r| {
            let mut row: Vec<BigRational> = (0..n)
                .map(|c| BigRational::from_integer(moments[r + c].clone()))
                .collect();
            let rhs: BigInt = powers.iter().zip(&us).map(|(p, u)| &p[r] * u).sum();
            row.push(BigRational::from_integer(rhs));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !m[r][col].is_zero())?;
        m.swap(col, pivot);
        let p = m[col][col].clone();
        for v in m[col].iter_mut() {
            *v = &*v / &p;
        }
        for r in 0..n {
            if r != col && !m[r][col].is_zero() {
                let factor = m[r][col].clone();
                for c in col..=n {
                    let sub = &factor * &m[col][c];
                    m[r][c] = &m[r][c] - sub;
                }
            }
        }
    }
    // The solved system is in z = x·2^-ex and u = t·2^-et.
    Some(
        m.into_iter()
            .enumerate()
            .map(|(k, row)| &row[n] * pow2(et - ex * k as i32))
            .collect(),
    )
}

/// Evaluates exact coefficients at `x` exactly, rounding once at the end.
pub fn exact_eval(w: &[BigRational], x: f64) -> f64 {
    let x = exact(x);
    let mut acc = BigRational::zero();
    for c in w.iter().rev() {
        acc = acc * &x + c;
    }
    ratio_to_f64(&acc)
}

pub fn ratio_to_f64(r: &BigRational) -> f64 {
    let (n, d) = (r.numer(), r.denom());
    // Scale so both parts fit in f64 before dividing.
    let shift = (n.bits().max(d.bits()) as i64 - 1000).max(0) as usize;
    let n = n >> shift;
    let d = d >> shift;
    if d.is_zero() {
        return if n.is_negative() { f64::MIN } else { f64::MAX };
    }
    n.to_f64().unwrap() / d.to_f64().unwrap()
}

/// A random fitting problem: coefficients, sample points and noise.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub order: usize,
    pub coefficients: Vec<f64>,
    pub points: Vec<(f64, f64)>,
}

/// Polynomial shapes in the range of resize-delay curves: a ~60 s intercept
/// with small higher-order terms, x in [0, 60]. Noise-free values stay above
/// 8 s, so targets are positive without clamping.
pub fn random_fit_problem(seed: u64, max_order: usize, max_n: usize, sigma: f64) -> FitProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = rng.random_range(0..=max_order);
    let n = rng.random_range(order + 1..=max_n.max(order + 1));
    let scales = [10.0, 0.2, 3e-3, 5e-5, 5e-7];
    let mut coefficients: Vec<f64> = (0..=order)
        .map(|j| rng.random_range(-1.0..1.0) * scales[j.min(4)])
        .collect();
    coefficients[0] += 60.0;
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(n);
    for i in 0..n {
        // Guarantee order+1 distinct abscissae, then draw freely.
        let x = if i <= order {
            i as f64 * 7.5
        } else {
            rng.random_range(0.0..60.0)
        };
        let t = horner(&coefficients, x) + noise.sample(&mut rng);
        points.push((x, t));
    }
    FitProblem {
        order,
        coefficients,
        points,
    }
}

pub fn horner(w: &[f64], x: f64) -> f64 {
    w.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Naive ijk product checksum, matching the documented `matmul_n` contract.
pub fn matmul_checksum_oracle(a: &[u64], b: &[u64], n: usize) -> u64 {
    let mut sum = 0u64;
    for i in 0..n {
        for j in 0..n {
            let mut c = 0u64;
            for k in 0..n {
                c = c.wrapping_add(a[i * n + k].wrapping_mul(b[k * n + j]));
            }
            sum = sum.wrapping_add(c.wrapping_mul((i * n + j + 1) as u64));
        }
    }
    sum
}

/// Valid PDUs with fuzzed binding counts, name lengths and value lengths.
pub fn arb_pdu() -> impl Strategy<Value = Pdu> {
    let name = prop::collection::vec(any::<u32>(), 1..=16)
        .prop_map(|ids| ObjectName::new(ids).unwrap());
    let binding = (name, prop::collection::vec(any::<u8>(), 0..64))
        .prop_map(|(n, v)| ObjectBinding::new(n, v));
    (
        prop::sample::select(PduType::ALL.to_vec()),
        any::<u32>(),
        any::<u32>(),
        prop::collection::vec(binding, 0..8),
    )
        .prop_map(|(t, id, ack, bindings)| {
            bindings
                .into_iter()
                .fold(Pdu::new(t, id).with_ack(ack), Pdu::with_binding)
        })
}
