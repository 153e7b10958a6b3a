//! Exact evaluation of ratios of count-weighted sums of doubles.
//!
//! Point estimates of the scalar ratio are computed in integer arithmetic and
//! rounded once, so θ̂ depends on Ĥ only through its exact values: any exact
//! rescaling of Ĥ returns the same bits.

use num_bigint::{BigInt, Sign};
use num_traits::{ToPrimitive, Zero};

/// Σ over `values`, weighted by `sign / count`.
#[derive(Debug, Clone)]
pub struct EventSum {
    pub sign: i64,
    pub count: u64,
    pub values: Vec<f64>,
}

/// x = m · 2^e with integer m.
fn decompose(x: f64) -> (i64, i64) {
    let bits = x.to_bits();
    let neg = bits >> 63 == 1;
    let biased = ((bits >> 52) & 0x7ff) as i64;
    let frac = (bits & ((1u64 << 52) - 1)) as i64;
    let (m, e) = if biased == 0 { (frac, -1074) } else { (frac | (1i64 << 52), biased - 1075) };
    (if neg { -m } else { m }, e)
}

/// Σ_k sign_k · S_k / count_k as (integer, power of two, positive denominator).
fn exact_group(terms: &[EventSum]) -> (BigInt, i64, BigInt) {
    let emin = terms
        .iter()
        .flat_map(|t| t.values.iter())
        .filter(|v| **v != 0.0)
        .map(|v| decompose(*v).1)
        .min()
        .unwrap_or(0);
    let denom: BigInt = terms.iter().fold(BigInt::from(1), |a, t| a * BigInt::from(t.count));
    let mut total = BigInt::zero();
    for (k, t) in terms.iter().enumerate() {
        let mut s = BigInt::zero();
        for &v in &t.values {
            if v == 0.0 {
                continue;
            }
            let (m, e) = decompose(v);
            s += BigInt::from(m) << ((e - emin) as usize);
        }
        let others: BigInt = terms
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .fold(BigInt::from(t.sign), |a, (_, o)| a * BigInt::from(o.count));
        total += s * others;
    }
    (total, emin, denom)
}

/// Correctly rounded value of (n / d) · 2^exp2.
fn round_ratio(n: BigInt, d: BigInt, mut exp2: i64) -> f64 {
    if n.is_zero() {
        return 0.0;
    }
    let negative = (n.sign() == Sign::Minus) != (d.sign() == Sign::Minus);
    let n = n.magnitude().clone();
    let d = d.magnitude().clone();
    let shift = (66 + d.bits() as i64 - n.bits() as i64).max(0);
    let n = n << shift as usize;
    exp2 -= shift;
    let q = &n / &d;
    let inexact = !(&n % &d).is_zero();
    let bl = q.bits() as i64;
    let low = bl - 64;
    let mut top = (&q >> low as usize).to_u64().expect("64-bit window");
    let dropped = !(&q - ((&q >> low as usize) << low as usize)).is_zero();
    if inexact || dropped {
        top |= 1;
    }
    let mut v = top as f64;
    let mut e = exp2 + low;
    while e > 0 {
        let step = e.min(1000);
        v *= 2f64.powi(step as i32);
        e -= step;
    }
    while e < 0 {
        let step = (-e).min(1000);
        v *= 2f64.powi(-(step as i32));
        e += step;
    }
    if negative {
        -v
    } else {
        v
    }
}

/// Exact ratio of two count-weighted sums; `None` when the denominator is exactly zero.
pub fn exact_ratio(num: &[EventSum], den: &[EventSum]) -> Option<f64> {
    let (zn, en, cn) = exact_group(num);
    let (zd, ed, cd) = exact_group(den);
    if zd.is_zero() {
        return None;
    }
    Some(round_ratio(zn * cd, zd * cn, en - ed))
}
