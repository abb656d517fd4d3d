//! Arbitrary-precision evaluation of the step metrics.

use astro_float::{BigFloat, Consts, RoundingMode, Sign};

pub const PREC: usize = 128;
const RM: RoundingMode = RoundingMode::ToEven;

pub fn big(x: f64) -> BigFloat {
    BigFloat::from_f64(x, PREC)
}

pub struct Precise {
    ln2: BigFloat,
}

impl Precise {
    pub fn new() -> Self {
        let mut cc = Consts::new().expect("constants cache");
        Self {
            ln2: cc.ln_2(PREC, RM),
        }
    }

    /// `k ln 2 + 2 atanh((m - 1) / (m + 1))` with `x = m 2^k`, `m` in `[1/sqrt 2, sqrt 2)`.
    pub fn ln(&self, x: &BigFloat) -> BigFloat {
        let mut k = x.exponent().expect("finite positive argument");
        let mut m = x.mul(&big(2f64.powi(-k)), PREC, RM);
        if m.cmp(&big(std::f64::consts::FRAC_1_SQRT_2)).unwrap() < 0 {
            m = m.mul(&big(2.0), PREC, RM);
            k -= 1;
        }
        let one = big(1.0);
        let z = m.sub(&one, PREC, RM).div(&m.add(&one, PREC, RM), PREC, RM);
        let z2 = z.mul(&z, PREC, RM);
        let mut power = z.clone();
        let mut acc = z;
        for j in 1u32.. {
            power = power.mul(&z2, PREC, RM);
            let term = power.div(&BigFloat::from_u32(2 * j + 1, PREC), PREC, RM);
            if term.is_zero() || term.exponent().unwrap() < -(PREC as i32) - 16 {
                break;
            }
            acc = acc.add(&term, PREC, RM);
        }
        acc.mul(&big(2.0), PREC, RM)
            .add(&self.ln2.mul(&BigFloat::from_i32(k, PREC), PREC, RM), PREC, RM)
    }

    /// `-sum p ln p` over positive entries.
    pub fn entropy(&self, p: &[f64]) -> BigFloat {
        let mut acc = big(0.0);
        for &v in p.iter().filter(|&&v| v > 0.0) {
            let x = big(v);
            let term = x.mul(&self.ln(&x), PREC, RM);
            acc = acc.sub(&term, PREC, RM);
        }
        acc
    }

    /// Largest minus second largest, found by sorting a copy.
    pub fn margin(&self, p: &[f64]) -> BigFloat {
        let mut sorted = p.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        big(sorted[0]).sub(&big(sorted[1]), PREC, RM)
    }

    pub fn inv_margin(&self, p: &[f64], eps: f64) -> BigFloat {
        let m = self.margin(p);
        let floor = big(eps);
        let clamped = if m.cmp(&floor).unwrap() < 0 { floor } else { m };
        big(1.0).div(&clamped, PREC, RM)
    }

    /// `sum p ln(p / q~)` with `q~ = (q + eps) / (1 + V eps)`.
    pub fn kl(&self, p: &[f64], q: &[f64], eps: f64) -> BigFloat {
        let v = big(p.len() as f64);
        let norm = big(1.0).add(&v.mul(&big(eps), PREC, RM), PREC, RM);
        let mut acc = big(0.0);
        for (&pv, &qv) in p.iter().zip(q) {
            if pv <= 0.0 {
                continue;
            }
            let qs = big(qv).add(&big(eps), PREC, RM).div(&norm, PREC, RM);
            let ratio = big(pv).div(&qs, PREC, RM);
            acc = acc.add(&big(pv).mul(&self.ln(&ratio), PREC, RM), PREC, RM);
        }
        acc
    }

    /// `|value - exact| / |exact|`, rounded to f64 through the decimal formatter.
    pub fn rel_err(&self, value: f64, exact: &BigFloat) -> f64 {
        let diff = big(value).sub(exact, PREC, RM).abs();
        to_f64(&diff.div(&exact.abs(), PREC, RM))
    }
}

/// Nearest-below f64 of the leading 64 mantissa bits; plenty for error reporting.
pub fn to_f64(x: &BigFloat) -> f64 {
    if x.is_zero() {
        return 0.0;
    }
    let (words, _, sign, exponent, _) = x.as_raw_parts().expect("finite value");
    let top = *words.last().expect("mantissa word") as f64 / 2f64.powi(64);
    let v = top * 2f64.powi(exponent);
    if sign == Sign::Neg {
        -v
    } else {
        v
    }
}
