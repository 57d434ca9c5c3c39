//! Checks shared by the integration tests and the acceptance runner. Each
//! returns `Ok(detail)` or `Err(reason)`.
#![allow(dead_code)]

pub mod bigfix;

use ndarray::Array2;
use primorl::accountant::{self, rdp_subsampled_gaussian};
use primorl::config::RunConfig;
use primorl::dataset::{collect, BehaviorPolicy, OfflineDataset};
use primorl::dp::{average_updates, concat_norm, ens_clip_gd, one_shot_sigma, tdp_train, tdp_train_observed, ClippingStrategy, PrivacyConfig};
use primorl::env::{EnvId, EnvSpec};
use primorl::model::{u_ma_of, u_mpd_of, GaussianDynamicsEnsemble, InitialSource, PessimisticMDP, Prediction, TrajectoryTensors, UncertaintyEstimator};
use primorl::nn::{LogVarBounds, MlpArch, ParamVector};
use primorl::pipeline::{run_pipeline, FaultInjection};
use primorl::policy::{actor_loss_grad, critic_loss_grad, SacConfig, SacCritics, SacPolicy};
use primorl::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * r.sample::<f64, _>(StandardNormal))
}

fn log_uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (r.random_range(lo.ln()..hi.ln())).exp()
}

fn random_tensors(r: &mut ChaCha8Rng, id: usize, in_dim: usize, out_dim: usize) -> TrajectoryTensors {
    let len = r.random_range(1..=40);
    let scale = log_uniform(r, 0.1, 10.0);
    TrajectoryTensors {
        id,
        inputs: normal_matrix(r, len, in_dim, 1.0),
        targets: normal_matrix(r, len, out_dim, scale),
    }
}

fn random_privacy_cfg(r: &mut ChaCha8Rng, clipping: ClippingStrategy) -> PrivacyConfig {
    PrivacyConfig {
        clip: log_uniform(r, 1e-3, 3.0),
        lr: log_uniform(r, 1e-3, 0.5),
        local_epochs: r.random_range(1..=3),
        batch_size: r.random_range(1..=20),
        clipping,
        ..PrivacyConfig::default()
    }
}

// ---------------------------------------------------------------- sensitivity

pub fn clip_bound_cases(cases: usize) -> Check {
    let arch = MlpArch::new(4, vec![12, 12], 8);
    let bounds = LogVarBounds::default();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for clipping in [ClippingStrategy::Flat, ClippingStrategy::PerLayer] {
        for case in 0..cases {
            let n = r.random_range(1..=4);
            let traj = random_tensors(&mut r, case, 4, 4);
            let start: Vec<ParamVector> = (0..n).map(|_| arch.init_params(&mut r)).collect();
            let cfg = random_privacy_cfg(&mut r, clipping);
            let upd = ens_clip_gd(&arch, &traj, &start, &cfg, bounds).map_err(|e| e.to_string())?;
            let norm = concat_norm(&upd);
            if norm > cfg.clip + 1e-9 {
                return Err(format!("{clipping:?} case {case}: update norm {norm} exceeds C = {}", cfg.clip));
            }
            worst = worst.max(norm / cfg.clip);
        }
    }
    Ok(format!("{} cases per strategy, max ‖update‖/C = {worst:.12}", cases))
}

pub fn neighbor_bound_cases(cases: usize) -> Check {
    let arch = MlpArch::new(4, vec![10], 8);
    let bounds = LogVarBounds::default();
    let mut r = rng(202);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let clipping = if case % 2 == 0 { ClippingStrategy::Flat } else { ClippingStrategy::PerLayer };
        let cfg = random_privacy_cfg(&mut r, clipping);
        let n = r.random_range(1..=3);
        let k = r.random_range(1..=25);
        let q = r.random_range(0.02..1.0);
        let start: Vec<ParamVector> = (0..n).map(|_| arch.init_params(&mut r)).collect();
        let trajs: Vec<TrajectoryTensors> = (0..=k).map(|i| random_tensors(&mut r, i, 4, 4)).collect();
        let updates: Vec<Vec<ParamVector>> = trajs
            .iter()
            .map(|t| ens_clip_gd(&arch, t, &start, &cfg, bounds))
            .collect::<primorl::Result<_>>()
            .map_err(|e| e.to_string())?;
        // A sampled subset of D, and the same subset plus one extra trajectory
        // (the one D' adds), in ascending id order.
        let extra = r.random_range(0..=k);
        let ids: Vec<usize> = (0..=k).filter(|i| *i == extra || r.random::<f64>() < 0.5).collect();
        let with: Vec<Vec<ParamVector>> = ids.iter().map(|i| updates[*i].clone()).collect();
        let without: Vec<Vec<ParamVector>> = ids.iter().filter(|i| **i != extra).map(|i| updates[*i].clone()).collect();
        let a = average_updates(&with, &start, q, k);
        let b = average_updates(&without, &start, q, k);
        let diff: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| x.difference(y).norm().powi(2))
            .sum::<f64>()
            .sqrt();
        let bound = cfg.clip / (q * k as f64);
        if diff > bound + 1e-9 {
            return Err(format!("case {case}: ‖Δ avg‖ = {diff} exceeds C/(qK) = {bound}"));
        }
        worst = worst.max(diff / bound);
    }
    Ok(format!("{cases} neighboring pairs, max ‖Δ‖·qK/C = {worst:.12}"))
}

// ---------------------------------------------------------------- noise

fn small_pendulum(k: usize, seed: u64) -> OfflineDataset {
    collect(&EnvSpec::pendulum(), &BehaviorPolicy::scripted_mixture(), k, seed).expect("collect")
}

pub fn noise_calibration() -> Check {
    let train = small_pendulum(200, 3);
    let test = small_pendulum(4, 4);
    let arch = GaussianDynamicsEnsemble::arch_for(3, 1, vec![8, 8]);
    let cfg = PrivacyConfig {
        q: 0.05,
        z: 1.0,
        clip: 0.5,
        max_rounds: 300,
        early_stop_patience: 1_000_000,
        eval_every: 100,
        ..PrivacyConfig::default()
    };
    let want = cfg.z * cfg.clip / (cfg.q * train.len() as f64);
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    let mut bad_sigma = None;
    tdp_train_observed(&train, &test, &arch, 2, &cfg, &mut rng(5), &mut |obs| {
        if (obs.sigma - want).abs() > 1e-15 * want {
            bad_sigma = Some(obs.sigma);
        }
        for e in obs.noise {
            sum_sq += e * e;
        }
        count += obs.noise.len();
    })
    .map_err(|e| e.to_string())?;
    if let Some(s) = bad_sigma {
        return Err(format!("round sigma {s} differs from zC/(qK) = {want}"));
    }
    if count < 100_000 {
        return Err(format!("only {count} noise coordinates pooled"));
    }
    let std = (sum_sq / count as f64).sqrt();
    let rel = (std / want - 1.0).abs();
    if rel > 0.02 {
        return Err(format!("pooled noise std {std} vs zC/(qK) = {want}: relative error {rel:.4} > 0.02"));
    }
    let sigma = one_shot_sigma(1.0, 1.0, 1e-5).map_err(|e| e.to_string())?;
    let oracle = (2.0 * (1.25e5f64).ln()).sqrt();
    if (sigma - oracle).abs() > 1e-6 {
        return Err(format!("one-shot sigma {sigma} vs {oracle}"));
    }
    Ok(format!("{count} coords, std/σ − 1 = {:+.4}; one-shot σ = {sigma:.9}", std / want - 1.0))
}

// ---------------------------------------------------------------- accountant

pub const ZS: [f64; 5] = [0.3, 0.5, 0.8, 1.2, 2.0];
pub const QS: [f64; 5] = [1e-4, 1e-3, 1e-2, 0.1, 0.5];
pub const TS: [u64; 5] = [1, 10, 100, 1000, 10_000];

pub fn epsilon_monotone_grid() -> Check {
    let delta = 1e-5;
    let mut e = vec![vec![vec![0.0; 5]; 5]; 5];
    for (i, z) in ZS.iter().enumerate() {
        for (j, q) in QS.iter().enumerate() {
            for (k, t) in TS.iter().enumerate() {
                e[i][j][k] = accountant::epsilon(*z, *q, *t, delta).map_err(|e| e.to_string())?;
            }
        }
    }
    for i in 0..5 {
        for j in 0..5 {
            for k in 0..5 {
                let here = e[i][j][k];
                if k > 0 && e[i][j][k - 1] > here {
                    return Err(format!("not monotone in T at z={} q={} T={}", ZS[i], QS[j], TS[k]));
                }
                if j > 0 && e[i][j - 1][k] > here {
                    return Err(format!("not monotone in q at z={} q={} T={}", ZS[i], QS[j], TS[k]));
                }
                if i > 0 && e[i - 1][j][k] < here {
                    return Err(format!("not anti-monotone in z at z={} q={} T={}", ZS[i], QS[j], TS[k]));
                }
            }
        }
    }
    Ok("5×5×5 grid monotone".into())
}

pub fn accountant_exact_points() -> Check {
    for (z, q, t) in [(0.45, 1e-3, 0u64), (0.0, 0.3, 0), (2.0, 1.0, 0)] {
        let e = accountant::epsilon(z, q, t, 1e-5).map_err(|e| e.to_string())?;
        if e != 0.0 {
            return Err(format!("ε(T=0) = {e} at z={z}, q={q}"));
        }
    }
    for z in [0.3, 0.7, 1.0, 2.5, 10.0] {
        let v = rdp_subsampled_gaussian(1.0, z, 2.0).map_err(|e| e.to_string())?;
        let want = 1.0 / (z * z);
        if (v - want).abs() > 1e-10 {
            return Err(format!("q=1, α=2, z={z}: {v} vs 1/z² = {want}"));
        }
    }
    Ok("ε(T=0) = 0; q=1 α=2 RDP = 1/z²".into())
}

pub const ORACLE_ORDERS: [u32; 8] = [2, 3, 5, 8, 16, 32, 64, 128];

/// Integer-order RDP against the arbitrary-precision oracle.
pub fn high_precision_agreement() -> Check {
    let mut worst = 0.0f64;
    let mut n = 0;
    for &z in &[0.5, 1.0, 2.0, 4.0] {
        for &q in &[1e-3, 0.01, 0.1, 0.5] {
            for &a in &ORACLE_ORDERS {
                if a == 128 && z < 1.0 {
                    continue;
                }
                let ours = rdp_subsampled_gaussian(q, z, a as f64).map_err(|e| e.to_string())?;
                let oracle = bigfix::rdp_integer_order(q, z, a);
                let err = (ours - oracle).abs();
                if err > 1e-10 {
                    return Err(format!("z={z} q={q} α={a}: {ours} vs oracle {oracle} (|Δ| = {err:e})"));
                }
                worst = worst.max(err);
                n += 1;
            }
        }
    }
    Ok(format!("{n} (z, q, α) points, max |Δ| = {worst:.2e}"))
}

pub fn max_iterations_property(targets: usize) -> Check {
    let delta = 1e-5;
    let mut r = rng(303);
    for _ in 0..targets {
        let target = log_uniform(&mut r, 0.3, 60.0);
        let z = r.random_range(0.5..2.5);
        let q = log_uniform(&mut r, 1e-3, 5e-2);
        let t = accountant::max_iterations(target, q, z, delta).map_err(|e| e.to_string())?;
        let at = accountant::epsilon(z, q, t, delta).map_err(|e| e.to_string())?;
        let next = accountant::epsilon(z, q, t + 1, delta).map_err(|e| e.to_string())?;
        if !(at <= target && target < next) {
            return Err(format!("target {target} (z={z}, q={q}): T={t} gives {at}, T+1 gives {next}"));
        }
    }
    Ok(format!("{targets} random targets satisfy ε(T) ≤ ε₀ < ε(T+1)"))
}

/// For each reported ε there is a T in [1e2, 1e4] landing within 15%.
pub fn reported_epsilons_reachable() -> Check {
    let delta = 1e-5;
    let q = 1e-3;
    let mut found = Vec::new();
    for (eps, z) in [(8.2, 0.45), (17.0, 0.38), (85.0, 0.25), (94.2, 0.25)] {
        let t = accountant::max_iterations(eps, q, z, delta).map_err(|e| e.to_string())?;
        let mut hit = None;
        for cand in [t, t + 1] {
            if !(100..=10_000).contains(&cand) {
                continue;
            }
            let e = accountant::epsilon(z, q, cand, delta).map_err(|e| e.to_string())?;
            if (e / eps - 1.0).abs() <= 0.15 {
                hit = Some((cand, e));
                break;
            }
        }
        match hit {
            Some((t, e)) => found.push(format!("{eps}@z={z}: T={t} ε={e:.2}")),
            None => return Err(format!("no T in [100, 10000] gives ε within 15% of {eps} at z={z} (max_iterations = {t})")),
        }
    }
    Ok(found.join("; "))
}

// ---------------------------------------------------------------- gradients

/// Largest `|a − b| / max(|a|, |b|)` over coordinates where `max(|a|, |b|) > floor`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, b)| a.abs().max(b.abs()) > floor)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()))
        .fold(0.0, f64::max)
}

pub const FD_STEP: f64 = 1e-3;
pub const REL_FLOOR: f64 = 1e-8;
pub const REL_TOL: f64 = 1e-4;

/// Central differences with one Richardson extrapolation step (error O(h⁴)).
fn central_difference(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    let mut diff = |p: &mut Vec<f64>, i: usize, h: f64| {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(p);
        p[i] = orig - h;
        let down = f(p);
        p[i] = orig;
        (up - down) / (2.0 * h)
    };
    (0..p.len())
        .map(|i| {
            let coarse = diff(&mut p, i, FD_STEP);
            let fine = diff(&mut p, i, FD_STEP / 2.0);
            (4.0 * fine - coarse) / 3.0
        })
        .collect()
}

pub fn nn_gradient_check(instances: usize) -> Check {
    let mut r = rng(404);
    let mut worst = 0.0f64;
    for case in 0..instances {
        let in_dim = r.random_range(1..=16);
        let d = r.random_range(1..=8);
        let hidden: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(2..=16)).collect();
        let arch = MlpArch::new(in_dim, hidden, 2 * d).with_weight_decay(if case % 2 == 0 { 0.0 } else { 1e-2 });
        let bounds = if case % 3 == 0 { None } else { Some(LogVarBounds::default()) };
        let params = arch.init_params(&mut r);
        let rows = r.random_range(1..=6);
        let x = normal_matrix(&mut r, rows, in_dim, 1.0);
        let y = normal_matrix(&mut r, rows, d, 1.0);
        let (_, grad) = arch.gaussian_nll_backward(&params, x.view(), y.view(), bounds).map_err(|e| e.to_string())?;
        let layout = params.layout().clone();
        let fd = central_difference(params.as_slice(), |p| {
            let pv = ParamVector::from_flat(layout.clone(), p.to_vec()).expect("layout");
            arch.gaussian_nll_backward(&pv, x.view(), y.view(), bounds).expect("finite").0
        });
        let e = max_rel_error(grad.as_slice(), &fd, REL_FLOOR);
        if e >= REL_TOL {
            return Err(format!("nn case {case}: relative error {e:e}"));
        }
        worst = worst.max(e);
    }
    Ok(format!("{instances} instances, max rel err {worst:.2e}"))
}

fn sac_instance(r: &mut ChaCha8Rng, case: usize) -> (EnvSpec, SacPolicy, SacCritics) {
    let spec = EnvSpec::new(if case % 2 == 0 { EnvId::Pendulum } else { EnvId::CartPoleSwingUp });
    let hidden: Vec<usize> = (0..r.random_range(1..=2)).map(|_| r.random_range(3..=8)).collect();
    let cfg = SacConfig {
        hidden: hidden.clone(),
        ..SacConfig::default()
    };
    let policy = SacPolicy::new(&spec, hidden, r);
    let critics = SacCritics::new(&spec, &cfg, r);
    (spec, policy, critics)
}

pub fn critic_gradient_check(instances: usize) -> Check {
    let mut r = rng(505);
    let mut worst = 0.0f64;
    for case in 0..instances {
        let (spec, _, critics) = sac_instance(&mut r, case);
        let rows = r.random_range(1..=6);
        let s = normal_matrix(&mut r, rows, spec.obs_dim, 1.0);
        let a = normal_matrix(&mut r, rows, spec.act_dim, 0.5);
        let y: Vec<f64> = (0..rows).map(|_| r.sample::<f64, _>(StandardNormal) * 3.0).collect();
        let arch = &critics.arch;
        let (_, grad) = critic_loss_grad(arch, &critics.q1, s.view(), a.view(), &y);
        let layout = critics.q1.layout().clone();
        let fd = central_difference(critics.q1.as_slice(), |p| {
            let pv = ParamVector::from_flat(layout.clone(), p.to_vec()).expect("layout");
            critic_loss_grad(arch, &pv, s.view(), a.view(), &y).0
        });
        let e = max_rel_error(grad.as_slice(), &fd, REL_FLOOR);
        if e >= REL_TOL {
            return Err(format!("critic case {case}: relative error {e:e}"));
        }
        worst = worst.max(e);
    }
    Ok(format!("{instances} instances, max rel err {worst:.2e}"))
}

pub fn actor_gradient_check(instances: usize) -> Check {
    let mut r = rng(606);
    let mut worst = 0.0f64;
    for case in 0..instances {
        let (spec, policy, critics) = sac_instance(&mut r, case);
        let rows = r.random_range(1..=6);
        let s = normal_matrix(&mut r, rows, spec.obs_dim, 1.0);
        let eps = normal_matrix(&mut r, rows, spec.act_dim, 1.0);
        let alpha = log_uniform(&mut r, 1e-2, 2.0);
        let (_, grad, _) = actor_loss_grad(&policy, &critics, s.view(), eps.view(), alpha);
        let mut probe = policy.clone();
        let fd = central_difference(policy.params.as_slice(), |p| {
            probe.params.as_mut_slice().copy_from_slice(p);
            actor_loss_grad(&probe, &critics, s.view(), eps.view(), alpha).0
        });
        let e = max_rel_error(grad.as_slice(), &fd, REL_FLOOR);
        if e >= REL_TOL {
            return Err(format!("actor case {case}: relative error {e:e}"));
        }
        worst = worst.max(e);
    }
    Ok(format!("{instances} instances, max rel err {worst:.2e}"))
}

// ---------------------------------------------------------------- uncertainty

fn random_predictions(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Prediction> {
    (0..n)
        .map(|_| Prediction {
            mean: (0..d).map(|_| r.sample::<f64, _>(StandardNormal) * 2.0).collect(),
            var: (0..d).map(|_| log_uniform(r, 1e-4, 5.0)).collect(),
        })
        .collect()
}

pub fn uncertainty_suite() -> Check {
    let mut r = rng(707);
    for case in 0..500 {
        let n = r.random_range(1..=6);
        let d = r.random_range(1..=6);
        let p = random_predictions(&mut r, n, d);
        let mut brute = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let dist = (0..d).map(|k| (p[i].mean[k] - p[j].mean[k]).powi(2)).sum::<f64>().sqrt();
                brute = brute.max(dist);
            }
        }
        if u_mpd_of(&p) != brute {
            return Err(format!("u_mpd case {case}: {} vs brute force {brute}", u_mpd_of(&p)));
        }
        let ma = p.iter().map(|m| m.var.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
        if u_ma_of(&p) != ma {
            return Err(format!("u_ma case {case}: {} vs {ma}", u_ma_of(&p)));
        }
    }
    let spec = EnvSpec::pendulum();
    let mut checked = 0;
    for n in 1..=5 {
        let arch = GaussianDynamicsEnsemble::arch_for(3, 1, vec![6]);
        let ens = std::sync::Arc::new(GaussianDynamicsEnsemble::new(3, 1, arch, n, &mut r).map_err(|e| e.to_string())?);
        for _ in 0..200 {
            let lambda = if r.random::<f64>() < 0.1 { 0.0 } else { log_uniform(&mut r, 1e-3, 10.0) };
            let est = if r.random::<bool>() { UncertaintyEstimator::MaxAleatoric } else { UncertaintyEstimator::MaxPairwiseDiff };
            let pm = PessimisticMDP::new(ens.clone(), est, lambda, 5, InitialSource::Rho0(spec.clone())).map_err(|e| e.to_string())?;
            let s: Vec<f64> = (0..3).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let a = vec![r.random_range(-2.0..2.0)];
            let raw = r.sample::<f64, _>(StandardNormal) * 10.0;
            let pen = pm.penalized_reward(&s, &a, raw).map_err(|e| e.to_string())?;
            if pen > raw {
                return Err(format!("penalized {pen} > raw {raw} at λ={lambda}"));
            }
            let preds = ens.predict(&s, &a).map_err(|e| e.to_string())?;
            let u_ma = ens.u_ma(&s, &a).map_err(|e| e.to_string())?;
            if u_ma != u_ma_of(&preds) {
                return Err("u_ma recomputation differs".into());
            }
            let lam0 = PessimisticMDP::new(ens.clone(), est, 0.0, 5, InitialSource::Rho0(spec.clone())).map_err(|e| e.to_string())?;
            if lam0.penalized_reward(&s, &a, raw).map_err(|e| e.to_string())? != raw {
                return Err("λ = 0 changed the reward".into());
            }
            let seed = r.random::<u64>();
            let stepped = lam0.step(&s, &a, &mut rng(seed)).map_err(|e| e.to_string())?;
            let plain = ens.sample_transition(&s, &a, &mut rng(seed)).map_err(|e| e.to_string())?;
            if stepped != plain {
                return Err("λ = 0 model step differs from the raw model".into());
            }
            checked += 1;
        }
    }
    Ok(format!("500 estimator cases, {checked} penalty cases"))
}

// ---------------------------------------------------------------- audit

pub fn small_pipeline_config(out: &std::path::Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::for_env(EnvId::Pendulum);
    cfg.episodes = 120;
    cfg.test_fraction = 0.05;
    cfg.model.hidden = vec![16, 16];
    cfg.privacy.z = 1.0;
    cfg.privacy.q = 0.05;
    cfg.privacy.max_rounds = 30;
    cfg.sac.hidden = vec![16, 16];
    cfg.sac.epochs = 2;
    cfg.sac.steps_per_epoch = 300;
    cfg.sac.warmup_steps = 100;
    cfg.sac.batch = 32;
    cfg.sac.eval_episodes = 2;
    cfg.seed = seed;
    cfg.out_dir = out.to_path_buf();
    cfg
}

pub fn audit_suite(dir: &std::path::Path) -> Check {
    let cfg = small_pipeline_config(&dir.join("clean"), 7);
    let rep = run_pipeline(&cfg, FaultInjection::None).map_err(|e| e.to_string())?;
    if rep.policy_phase_reads != 0 {
        return Err(format!("{} dataset reads during the policy phase", rep.policy_phase_reads));
    }
    let faulty = small_pipeline_config(&dir.join("faulty"), 7);
    match run_pipeline(&faulty, FaultInjection::DatasetInitialStates) {
        Err(Error::Audit(m)) => Ok(format!("clean run: 0 policy-phase reads; fault injection rejected ({m})")),
        Err(e) => Err(format!("fault injection failed with the wrong error: {e}")),
        Ok(_) => Err("fault-injected run passed the audit".into()),
    }
}

// ---------------------------------------------------------------- degenerate equivalence

pub struct DegenerateRun {
    pub max_abs_diff: f64,
    pub rounds_csv: Vec<u8>,
}

/// `tdp_train` at (z=0, C=1e6, q=1, K=1) next to a plain GD loop.
pub fn degenerate_equivalence(rounds: usize) -> Result<DegenerateRun, String> {
    let train = small_pendulum(1, 21);
    let test = small_pendulum(2, 22);
    let arch = GaussianDynamicsEnsemble::arch_for(3, 1, vec![16, 16]).with_weight_decay(1e-5);
    let n = 2;
    let cfg = PrivacyConfig {
        q: 1.0,
        z: 0.0,
        clip: 1e6,
        max_rounds: rounds,
        ..PrivacyConfig::default()
    };
    let seed = 31;
    let out = tdp_train(&train, &test, &arch, n, &cfg, &mut rng(seed)).map_err(|e| e.to_string())?;
    if out.logs.len() != rounds {
        return Err(format!("ran {} rounds instead of {rounds}", out.logs.len()));
    }

    let mut reference = GaussianDynamicsEnsemble::new(3, 1, arch.clone(), n, &mut rng(seed)).map_err(|e| e.to_string())?;
    reference.fit_normalizers(&train).map_err(|e| e.to_string())?;
    let data = reference.tensors(&train).map_err(|e| e.to_string())?;
    let bounds = reference.log_var_bounds;
    let (x, y) = (&data[0].inputs, &data[0].targets);
    let mut params = reference.members.clone();
    for _ in 0..rounds {
        for p in params.iter_mut() {
            for _ in 0..cfg.local_epochs {
                let mut lo = 0;
                while lo < x.nrows() {
                    let hi = (lo + cfg.batch_size).min(x.nrows());
                    let xs = x.slice(ndarray::s![lo..hi, ..]);
                    let ys = y.slice(ndarray::s![lo..hi, ..]);
                    let (_, g) = arch.gaussian_nll_backward(p, xs, ys, Some(bounds)).map_err(|e| e.to_string())?;
                    for (v, gv) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *v -= cfg.lr * gv;
                    }
                    lo = hi;
                }
            }
        }
    }
    let mut worst = 0.0f64;
    for (a, b) in out.last.iter().zip(&params) {
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            worst = worst.max((u - v).abs());
        }
    }
    let mut csv = Vec::new();
    primorl::dp::write_round_logs_to(&mut csv, &out.logs).map_err(|e| e.to_string())?;
    Ok(DegenerateRun {
        max_abs_diff: worst,
        rounds_csv: csv,
    })
}
