mod common;

use primorl::accountant::{default_orders, epsilon, max_iterations, rdp_subsampled_gaussian, RdpCurve};
use proptest::prelude::*;

#[test]
fn exact_points() {
    common::accountant_exact_points().unwrap();
}

#[test]
fn monotone_on_grid() {
    common::epsilon_monotone_grid().unwrap();
}

#[test]
fn integer_orders_match_arbitrary_precision() {
    println!("{}", common::high_precision_agreement().unwrap());
    let ours = rdp_subsampled_gaussian(0.01, 1.0, 2.0).unwrap();
    let oracle = common::bigfix::rdp_integer_order(0.01, 1.0, 2);
    assert!((ours - oracle).abs() <= 1e-10, "{ours} vs {oracle}");
}

#[test]
fn max_iterations_defining_inequality() {
    common::max_iterations_property(50).unwrap();
}

#[test]
fn reported_epsilons_are_reachable() {
    println!("{}", common::reported_epsilons_reachable().unwrap());
}

#[test]
fn tenfold_smaller_q_buys_at_least_fivefold_rounds() {
    let delta = 1e-5;
    for z in [0.5, 0.8, 1.0, 2.0] {
        for target in [1.0, 4.0, 10.0] {
            let a = max_iterations(target, 1e-2, z, delta).unwrap();
            let b = max_iterations(target, 1e-3, z, delta).unwrap();
            if a == 0 {
                continue;
            }
            assert!(b as f64 >= 5.0 * a as f64, "z={z} ε₀={target}: {a} → {b}");
        }
    }
}

#[test]
fn composition_is_additive() {
    let orders = default_orders();
    for (q, z) in [(1e-3, 0.45), (0.01, 1.0), (0.2, 2.0)] {
        let one = RdpCurve::subsampled_gaussian(q, z, &orders).unwrap();
        for t in [1u64, 7, 100, 3000] {
            let summed = RdpCurve {
                orders: orders.clone(),
                values: one.values.iter().map(|v| v * t as f64).collect(),
            };
            let direct = epsilon(z, q, t, 1e-5).unwrap();
            assert_eq!(direct, summed.epsilon(1e-5).unwrap(), "q={q} z={z} T={t}");
            assert_eq!(one.compose(t).values, summed.values);
        }
    }
}

#[test]
fn never_worse_than_basic_composition() {
    for (q, z) in [(1e-3, 0.3), (0.05, 0.8), (0.5, 1.5), (1.0, 3.0)] {
        let per_round = epsilon(z, q, 1, 1e-5).unwrap();
        for t in 1..=10u64 {
            let e = epsilon(z, q, t, 1e-5).unwrap();
            assert!(e <= t as f64 * per_round + 1e-12, "q={q} z={z} T={t}: {e} > {}", t as f64 * per_round);
        }
    }
}

#[test]
fn no_noise_means_no_guarantee() {
    assert_eq!(epsilon(0.0, 1e-3, 1, 1e-5).unwrap(), f64::INFINITY);
    assert_eq!(epsilon(0.0, 1e-3, 0, 1e-5).unwrap(), 0.0);
}

/// Rényi moment `E_{x∼N(0,z²)}[((1−q) + q·exp((2x−1)/(2z²)))^α]` by trapezoidal
/// quadrature in log space, then the same (ε, δ) conversion.
fn quadrature_rdp(q: f64, z: f64, alpha: f64) -> f64 {
    let log_integrand = |x: f64| {
        let ratio_log = (2.0 * x - 1.0) / (2.0 * z * z);
        let mix = if ratio_log > 0.0 {
            ratio_log + ((1.0 - q) * (-ratio_log).exp() + q).ln()
        } else {
            ((1.0 - q) + q * ratio_log.exp()).ln()
        };
        -x * x / (2.0 * z * z) - (z * (2.0 * std::f64::consts::PI).sqrt()).ln() + alpha * mix
    };
    let lo = -30.0 * z;
    let hi = alpha + 30.0 * z;
    let h = 2e-3 * z;
    let n = ((hi - lo) / h).ceil() as usize;
    let vals: Vec<f64> = (0..=n).map(|i| log_integrand(lo + i as f64 * h)).collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = vals
        .iter()
        .enumerate()
        .map(|(i, v)| if i == 0 || i == n { 0.5 } else { 1.0 } * (v - m).exp())
        .sum();
    let log_a = m + (s * h).ln();
    (log_a / (alpha - 1.0)).max(0.0)
}

#[test]
fn second_implementation_agrees_within_one_percent() {
    let (z, q, t, delta) = (1.0, 0.01, 1000u64, 1e-5f64);
    let oracle = default_orders()
        .iter()
        .map(|&a| t as f64 * quadrature_rdp(q, z, a) + (1.0 / delta).ln() / (a - 1.0))
        .fold(f64::INFINITY, f64::min);
    let ours = epsilon(z, q, t, delta).unwrap();
    assert!((ours / oracle - 1.0).abs() < 0.01, "ours {ours} vs quadrature {oracle}");
}

#[test]
fn fractional_orders_match_quadrature() {
    for (q, z) in [(1e-3, 0.25), (0.01, 1.0), (0.1, 0.6)] {
        for a in [1.5, 2.5, 4.3, 7.9] {
            let ours = rdp_subsampled_gaussian(q, z, a).unwrap();
            let quad = quadrature_rdp(q, z, a);
            assert!((ours - quad).abs() <= 1e-8 * quad.max(1e-6) + 1e-12, "q={q} z={z} α={a}: {ours} vs {quad}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn epsilon_monotone_in_rounds(z in 0.3f64..3.0, q in 1e-4f64..0.5, t1 in 0u64..5000, dt in 0u64..5000) {
        let a = epsilon(z, q, t1, 1e-5).unwrap();
        let b = epsilon(z, q, t1 + dt, 1e-5).unwrap();
        prop_assert!(a <= b);
    }

    #[test]
    fn epsilon_monotone_in_q_and_z(z in 0.3f64..3.0, dz in 0.0f64..1.0, q in 1e-4f64..0.4, dq in 0.0f64..0.5, t in 1u64..3000) {
        let base = epsilon(z, q, t, 1e-5).unwrap();
        prop_assert!(epsilon(z + dz, q, t, 1e-5).unwrap() <= base);
        prop_assert!(epsilon(z, (q + dq).min(1.0), t, 1e-5).unwrap() >= base);
    }
}
