//! Rényi-DP accounting for Poisson-subsampled Gaussian rounds.
//!
//! Integer orders use the exact binomial expansion of the log-moment;
//! fractional orders use the two-sided erfc series. Everything is evaluated in
//! log-space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fractional orders 1.1, 1.2, ..., 10.9, integers 2..=64, then 128, 256, 512.
pub fn default_orders() -> Vec<f64> {
    let mut v: Vec<f64> = (11..110).map(|i| i as f64 / 10.0).collect();
    v.extend((11..=64).map(|i| i as f64));
    v.extend([128.0, 256.0, 512.0]);
    v
}

/// Only the integer orders 2..=64, 128, 256, 512.
pub fn integer_orders() -> Vec<f64> {
    let mut v: Vec<f64> = (2..=64).map(|i| i as f64).collect();
    v.extend([128.0, 256.0, 512.0]);
    v
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `log(exp(a) − exp(b))` for `a ≥ b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

pub(crate) fn log_erfc(x: f64) -> f64 {
    let r = libm::erfc(x);
    if r > 0.0 {
        r.ln()
    } else {
        // asymptotic expansion for large x
        -std::f64::consts::PI.ln() / 2.0 - x.ln() - x * x - 0.5 * x.powi(-2) + 0.625 * x.powi(-4)
            - 37.0 / 24.0 * x.powi(-6)
            + 353.0 / 64.0 * x.powi(-8)
    }
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut log_a = f64::NEG_INFINITY;
    let mut log_binom = 0.0f64;
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let term = log_binom + kf * lq + (alpha - k) as f64 * l1q + (kf * kf - kf) / (2.0 * sigma * sigma);
        log_a = log_add(log_a, term);
    }
    log_a
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = std::f64::consts::SQRT_2 * sigma;
    let mut coef = 1.0f64;
    let mut i = 0u32;
    loop {
        if i > 0 {
            coef *= (alpha - (i - 1) as f64) / i as f64;
        }
        let log_coef = coef.abs().ln();
        let fi = i as f64;
        let j = alpha - fi;
        let log_t0 = log_coef + fi * lq + j * l1q;
        let log_t1 = log_coef + j * lq + fi * l1q;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / s2);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / s2);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if coef > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        i += 1;
        if log_s0.max(log_s1) < -30.0 || i > 10_000 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

/// Order-`alpha` RDP of one Poisson-subsampled Gaussian round with noise
/// multiplier `z` and sampling ratio `q`.
pub fn rdp_subsampled_gaussian(q: f64, z: f64, order: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::domain(format!("sampling ratio must lie in (0, 1], got {q}")));
    }
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::domain(format!("noise multiplier must be positive, got {z}")));
    }
    if !(order > 1.0) || !order.is_finite() {
        return Err(Error::domain(format!("order must exceed 1, got {order}")));
    }
    if q == 1.0 {
        return Ok(order / (2.0 * z * z));
    }
    let log_a = if order.fract() == 0.0 {
        log_a_int(q, z, order as u64)
    } else {
        log_a_frac(q, z, order)
    };
    Ok((log_a / (order - 1.0)).max(0.0))
}

/// Per-order RDP values of a mechanism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub values: Vec<f64>,
}

impl RdpCurve {
    /// One subsampled Gaussian round. `z = 0` gives an infinite curve.
    pub fn subsampled_gaussian(q: f64, z: f64, orders: &[f64]) -> Result<Self> {
        check_orders(orders)?;
        let values = if z == 0.0 {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::domain(format!("sampling ratio must lie in (0, 1], got {q}")));
            }
            vec![f64::INFINITY; orders.len()]
        } else {
            orders
                .iter()
                .map(|&a| rdp_subsampled_gaussian(q, z, a))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            orders: orders.to_vec(),
            values,
        })
    }

    /// Composition of `t` copies (orderwise sums).
    pub fn compose(&self, t: u64) -> Self {
        let values = self
            .values
            .iter()
            .map(|v| if t == 0 { 0.0 } else { v * t as f64 })
            .collect();
        Self {
            orders: self.orders.clone(),
            values,
        }
    }

    /// `min_α [RDP(α) + log(1/δ)/(α − 1)]`.
    pub fn epsilon(&self, delta: f64) -> Result<f64> {
        check_delta(delta)?;
        let ld = (1.0 / delta).ln();
        Ok(self
            .orders
            .iter()
            .zip(&self.values)
            .map(|(a, v)| v + ld / (a - 1.0))
            .fold(f64::INFINITY, f64::min))
    }
}

fn check_orders(orders: &[f64]) -> Result<()> {
    if orders.is_empty() || orders.iter().any(|a| !(*a > 1.0) || !a.is_finite()) {
        return Err(Error::domain("orders must be a non-empty list of reals > 1"));
    }
    if orders.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::domain("orders must be strictly ascending"));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// ε of `t` rounds over an explicit order grid.
pub fn epsilon_with_orders(z: f64, q: f64, t: u64, delta: f64, orders: &[f64]) -> Result<f64> {
    check_delta(delta)?;
    if !(z >= 0.0) {
        return Err(Error::domain(format!("noise multiplier must be non-negative, got {z}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::domain(format!("sampling ratio must lie in (0, 1], got {q}")));
    }
    if t == 0 {
        return Ok(0.0);
    }
    if z == 0.0 {
        return Ok(f64::INFINITY);
    }
    RdpCurve::subsampled_gaussian(q, z, orders)?.compose(t).epsilon(delta)
}

/// ε of `t` rounds over [`default_orders`].
pub fn epsilon(z: f64, q: f64, t: u64, delta: f64) -> Result<f64> {
    epsilon_with_orders(z, q, t, delta, &default_orders())
}

/// Largest `T` with `ε(z, q, T, δ) ≤ epsilon_target` (0 if `T = 1` already exceeds it).
pub fn max_iterations(epsilon_target: f64, q: f64, z: f64, delta: f64) -> Result<u64> {
    if !(epsilon_target > 0.0) {
        return Err(Error::domain(format!("target epsilon must be positive, got {epsilon_target}")));
    }
    if !(z > 0.0) {
        return Err(Error::domain(format!("noise multiplier must be positive, got {z}")));
    }
    let curve = RdpCurve::subsampled_gaussian(q, z, &default_orders())?;
    let eps_at = |t: u64| curve.compose(t).epsilon(delta);
    if eps_at(1)? > epsilon_target {
        return Ok(0);
    }
    let (mut lo, mut hi) = (1u64, 2u64);
    while eps_at(hi)? <= epsilon_target {
        lo = hi;
        hi = hi.checked_mul(2).ok_or_else(|| Error::Numeric("iteration count overflow".into()))?;
    }
    // invariant: eps(lo) <= target < eps(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if eps_at(mid)? <= epsilon_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Running privacy account of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub q: f64,
    pub z: f64,
    pub delta: f64,
    pub rounds_elapsed: u64,
    pub epsilon: f64,
    #[serde(skip)]
    round_curve: Option<RdpCurve>,
}

impl PrivacyLedger {
    pub fn new(q: f64, z: f64, delta: f64) -> Result<Self> {
        check_delta(delta)?;
        let round_curve = RdpCurve::subsampled_gaussian(q, z, &default_orders())?;
        Ok(Self {
            q,
            z,
            delta,
            rounds_elapsed: 0,
            epsilon: 0.0,
            round_curve: Some(round_curve),
        })
    }

    /// Charges one more round and refreshes ε.
    pub fn record_round(&mut self) -> Result<f64> {
        self.rounds_elapsed += 1;
        let curve = match &self.round_curve {
            Some(c) => c.clone(),
            None => RdpCurve::subsampled_gaussian(self.q, self.z, &default_orders())?,
        };
        self.epsilon = curve.compose(self.rounds_elapsed).epsilon(self.delta)?;
        self.round_curve = Some(curve);
        Ok(self.epsilon)
    }
}
