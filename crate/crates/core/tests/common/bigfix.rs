//! Arbitrary-precision fixed-point arithmetic (2^-PREC resolution) used as an
//! independent oracle for the integer-order RDP expansion.

use num_bigint::{BigInt, Sign};
use num_traits::{One, Signed, ToPrimitive, Zero};

const PREC: u64 = 384;

#[derive(Clone, Debug)]
pub struct Fx(BigInt);

impl Fx {
    pub fn one() -> Self {
        Fx(BigInt::one() << PREC)
    }

    pub fn from_int(v: i64) -> Self {
        Fx(BigInt::from(v) << PREC)
    }

    /// Exact conversion of a finite double.
    pub fn from_f64(x: f64) -> Self {
        assert!(x.is_finite());
        if x == 0.0 {
            return Fx(BigInt::zero());
        }
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { Sign::Minus } else { Sign::Plus };
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
        let m = BigInt::from_biguint(sign, mant.into());
        let shift = PREC as i64 + e;
        assert!(shift >= 0, "value below fixed-point resolution");
        Fx(m << shift as u64)
    }

    pub fn add(&self, o: &Fx) -> Fx {
        Fx(&self.0 + &o.0)
    }

    pub fn sub(&self, o: &Fx) -> Fx {
        Fx(&self.0 - &o.0)
    }

    pub fn mul(&self, o: &Fx) -> Fx {
        Fx((&self.0 * &o.0) >> PREC)
    }

    pub fn mul_int(&self, k: &BigInt) -> Fx {
        Fx(&self.0 * k)
    }

    pub fn div(&self, o: &Fx) -> Fx {
        Fx((&self.0 << PREC) / &o.0)
    }

    /// `e^x` by halving the argument until it is below 2^-8, a Taylor series,
    /// and repeated squaring.
    pub fn exp(&self) -> Fx {
        if self.0.is_negative() {
            return Fx::one().div(&Fx(-self.0.clone()).exp());
        }
        let mut halvings = 8u64;
        if self.0.bits() > PREC {
            halvings += self.0.bits() - PREC;
        }
        let r = Fx(&self.0 >> halvings);
        let mut term = Fx::one();
        let mut sum = Fx::one();
        let mut k = 1i64;
        while !term.0.is_zero() {
            term = Fx(&term.mul(&r).0 / k);
            sum = sum.add(&term);
            k += 1;
        }
        for _ in 0..halvings {
            sum = sum.mul(&sum);
        }
        sum
    }

    /// `2 atanh(y)` for `|y| < 1`.
    fn two_atanh(y: &Fx) -> Fx {
        let y2 = y.mul(y);
        let mut p = y.clone();
        let mut sum = Fx(BigInt::zero());
        let mut k = 1i64;
        while !p.0.is_zero() {
            sum = sum.add(&Fx(&p.0 / k));
            p = p.mul(&y2);
            k += 2;
        }
        Fx(sum.0 << 1)
    }

    pub fn ln2() -> Fx {
        Self::two_atanh(&Fx::one().div(&Fx::from_int(3)))
    }

    /// Natural log of a positive value: `k ln 2 + 2 atanh((m − 1)/(m + 1))` with `m ∈ [1, 2)`.
    pub fn ln(&self) -> Fx {
        assert!(self.0.is_positive());
        let k = self.0.bits() as i64 - 1 - PREC as i64;
        let m = if k >= 0 { Fx(&self.0 >> k as u64) } else { Fx(&self.0 << (-k) as u64) };
        let y = m.sub(&Fx::one()).div(&m.add(&Fx::one()));
        Self::ln2().mul_int(&BigInt::from(k)).add(&Self::two_atanh(&y))
    }

    pub fn to_f64(&self) -> f64 {
        let shift = PREC - 64;
        (&self.0 >> shift).to_f64().expect("finite") / 2f64.powi(64)
    }
}

fn binomial(n: u32, k: u32) -> BigInt {
    let mut c = BigInt::one();
    for i in 0..k {
        c = c * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    c
}

/// `q = m · 2^-e` exactly, for `0 < q ≤ 1`.
fn dyadic(q: f64) -> (BigInt, u64) {
    assert!(q > 0.0 && q <= 1.0);
    let bits = q.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
    assert!(e < 0);
    (BigInt::from(mant), (-e) as u64)
}

/// `(α − 1)⁻¹ log Σ_k C(α,k) (1 − q)^{α−k} q^k exp(k(k − 1)/(2z²))`.
///
/// The polynomial weights are exact integers over `2^(eα)`; only the
/// exponentials and the final log are rounded, at 2^-PREC.
pub fn rdp_integer_order(q: f64, z: f64, alpha: u32) -> f64 {
    let (m, e) = dyadic(q);
    let rest = (BigInt::one() << e) - &m;
    let zf = Fx::from_f64(z);
    let inv_two_z2 = Fx::one().div(&zf.mul(&zf).mul_int(&BigInt::from(2)));
    let mut sum = Fx(BigInt::zero());
    for k in 0..=alpha {
        let weight = binomial(alpha, k) * num_traits::pow(rest.clone(), (alpha - k) as usize) * num_traits::pow(m.clone(), k as usize);
        let ex = inv_two_z2.mul_int(&BigInt::from(k as i64 * (k as i64 - 1))).exp();
        sum = sum.add(&ex.mul_int(&weight));
    }
    let log_sum = sum.ln().sub(&Fx::ln2().mul_int(&BigInt::from(e * alpha as u64)));
    (log_sum.to_f64() / (alpha - 1) as f64).max(0.0)
}
