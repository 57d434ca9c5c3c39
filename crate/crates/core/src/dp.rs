//! Trajectory-level private ensemble training.
//!
//! Each round Poisson-samples whole trajectories, runs clipped local gradient
//! descent on every sampled trajectory, averages the clipped displacements
//! over the expected sample size `qK` and adds Gaussian noise of scale
//! `zC/(qK)` to the concatenated ensemble update.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyLedger;
use crate::dataset::OfflineDataset;
use crate::error::{Error, Result};
use crate::model::{GaussianDynamicsEnsemble, TrajectoryTensors};
use crate::nn::{LogVarBounds, MlpArch, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClippingStrategy {
    Flat,
    PerLayer,
}

impl std::str::FromStr for ClippingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "flat" => Ok(Self::Flat),
            "perlayer" => Ok(Self::PerLayer),
            _ => Err(Error::Config(format!("unknown clipping strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub q: f64,
    pub z: f64,
    pub clip: f64,
    pub delta: f64,
    pub clipping: ClippingStrategy,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_rounds: usize,
    pub early_stop_patience: usize,
    /// Rounds between test-NLL evaluations.
    pub eval_every: usize,
    /// Threads for the per-trajectory work inside a round. Results do not
    /// depend on this value.
    pub workers: usize,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            q: 1e-3,
            z: 0.0,
            clip: 1.0,
            delta: 1e-5,
            clipping: ClippingStrategy::PerLayer,
            local_epochs: 1,
            batch_size: 16,
            lr: 1e-3,
            max_rounds: 5000,
            early_stop_patience: 10,
            eval_every: 10,
            workers: 1,
        }
    }
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.q > 0.0 && self.q <= 1.0) {
            return bad(format!("q must lie in (0, 1], got {}", self.q));
        }
        if !(self.z >= 0.0 && self.z.is_finite()) {
            return bad(format!("z must be non-negative, got {}", self.z));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return bad(format!("clipping norm must be positive, got {}", self.clip));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.lr));
        }
        for (name, v) in [
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
            ("max_rounds", self.max_rounds),
            ("early_stop_patience", self.early_stop_patience),
            ("eval_every", self.eval_every),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

fn check_members(deltas: &[ParamVector], c: f64) -> Result<()> {
    if deltas.is_empty() {
        return Err(Error::domain("ensemble clipping needs at least one member"));
    }
    if !(c > 0.0) {
        return Err(Error::domain(format!("clipping norm must be positive, got {c}")));
    }
    Ok(())
}

fn clip_slice(v: &mut [f64], threshold: f64) {
    let norm = crate::nn::l2_norm(v);
    if norm > threshold {
        let s = threshold / norm;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

/// Scales each member to norm at most `C/√N`.
pub fn flat_ensemble_clip(deltas: &mut [ParamVector], c: f64) -> Result<()> {
    check_members(deltas, c)?;
    let ci = c / (deltas.len() as f64).sqrt();
    for d in deltas.iter_mut() {
        clip_slice(d.as_mut_slice(), ci);
    }
    Ok(())
}

/// Scales each layer segment of each member to norm at most `C/√(N·L)`.
pub fn per_layer_ensemble_clip(deltas: &mut [ParamVector], c: f64, layers: usize) -> Result<()> {
    check_members(deltas, c)?;
    if let Some(d) = deltas.iter().find(|d| d.layout().num_layers() != layers) {
        return Err(Error::Layout(format!(
            "per-layer clipping expects {layers} segments, member has {}",
            d.layout().num_layers()
        )));
    }
    let cil = c / ((deltas.len() * layers) as f64).sqrt();
    for d in deltas.iter_mut() {
        for l in 0..layers {
            clip_slice(d.segment_mut(l), cil);
        }
    }
    Ok(())
}

pub fn ensemble_clip(deltas: &mut [ParamVector], c: f64, strategy: ClippingStrategy) -> Result<()> {
    match strategy {
        ClippingStrategy::Flat => flat_ensemble_clip(deltas, c),
        ClippingStrategy::PerLayer => {
            let layers = deltas.first().map_or(0, |d| d.layout().num_layers());
            per_layer_ensemble_clip(deltas, c, layers)
        }
    }
}

/// ℓ₂ norm of the concatenation of all members.
pub fn concat_norm(v: &[ParamVector]) -> f64 {
    v.iter().map(|p| p.norm().powi(2)).sum::<f64>().sqrt()
}

/// Clipped local gradient descent on one trajectory. Every member sees the
/// same consecutive batches; after each batch the cumulative displacement
/// from `theta_start` is projected through the ensemble clip. Returns the
/// final displacements.
pub fn ens_clip_gd(
    arch: &MlpArch,
    traj: &TrajectoryTensors,
    theta_start: &[ParamVector],
    cfg: &PrivacyConfig,
    bounds: LogVarBounds,
) -> Result<Vec<ParamVector>> {
    let n = traj.inputs.nrows();
    if n == 0 {
        return Err(Error::domain(format!("trajectory {} has no transitions", traj.id)));
    }
    let mut theta: Vec<ParamVector> = theta_start.to_vec();
    for _ in 0..cfg.local_epochs {
        let mut lo = 0;
        while lo < n {
            let hi = (lo + cfg.batch_size).min(n);
            let x = traj.inputs.slice(ndarray::s![lo..hi, ..]);
            let y = traj.targets.slice(ndarray::s![lo..hi, ..]);
            for th in theta.iter_mut() {
                let (loss, grad) = arch.gaussian_nll_backward(th, x, y, Some(bounds)).map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("trajectory {} rows {lo}..{hi}: {m}", traj.id)),
                    other => other,
                })?;
                debug_assert!(loss.is_finite());
                th.axpy(-cfg.lr, &grad);
            }
            let mut disp: Vec<ParamVector> = theta.iter().zip(theta_start).map(|(t, s)| t.difference(s)).collect();
            ensemble_clip(&mut disp, cfg.clip, cfg.clipping)?;
            for ((th, s), d) in theta.iter_mut().zip(theta_start).zip(&disp) {
                *th = s.clone();
                th.axpy(1.0, d);
            }
            lo = hi;
        }
    }
    Ok(theta.iter().zip(theta_start).map(|(t, s)| t.difference(s)).collect())
}

/// `v + N(0, σ²)` per coordinate.
pub fn gaussian_mechanism<R: Rng + ?Sized>(v: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("noise scale must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.to_vec());
    }
    Ok(v.iter()
        .map(|x| {
            let e: f64 = rng.sample(StandardNormal);
            x + sigma * e
        })
        .collect())
}

/// Noise scale of the classical one-shot Gaussian mechanism:
/// `σ = √(2 ln(1.25/δ)) · Δ₂ / ε`.
pub fn one_shot_sigma(sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(sensitivity >= 0.0) || !(epsilon > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain("one-shot calibration needs Δ₂ ≥ 0, ε > 0, δ ∈ (0, 1)"));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() * sensitivity / epsilon)
}

/// Sum of per-trajectory displacements divided by `qK`, reduced in the
/// order given (callers pass ascending trajectory id).
pub fn average_updates(updates: &[Vec<ParamVector>], template: &[ParamVector], q: f64, k: usize) -> Vec<ParamVector> {
    let mut sum: Vec<ParamVector> = template.iter().map(|p| ParamVector::zeros(p.layout().clone())).collect();
    for u in updates {
        for (s, d) in sum.iter_mut().zip(u) {
            s.axpy(1.0, d);
        }
    }
    let denom = q * k as f64;
    for s in sum.iter_mut() {
        s.scale(1.0 / denom);
    }
    sum
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRoundLog {
    pub round: usize,
    pub sampled: usize,
    pub update_norm: f64,
    pub test_nll: Option<f64>,
    pub epsilon: f64,
}

/// What a round exposes to an observer: the averaged update before noise and
/// the noise realization, both over the concatenated ensemble vector.
pub struct RoundObservation<'a> {
    pub round: usize,
    pub sampled_ids: &'a [usize],
    pub sigma: f64,
    pub pre_noise: &'a [f64],
    pub noise: &'a [f64],
}

pub struct TdpOutcome {
    /// Members at the evaluation with the lowest test NLL.
    pub ensemble: GaussianDynamicsEnsemble,
    /// Members after the last round actually run.
    pub last: Vec<ParamVector>,
    pub ledger: PrivacyLedger,
    pub logs: Vec<TrainingRoundLog>,
    pub best_test_nll: f64,
}

fn flatten(v: &[ParamVector]) -> Vec<f64> {
    v.iter().flat_map(|p| p.as_slice().iter().copied()).collect()
}

pub fn tdp_train<R: Rng + ?Sized>(
    train: &OfflineDataset,
    test: &OfflineDataset,
    arch: &MlpArch,
    n: usize,
    cfg: &PrivacyConfig,
    rng: &mut R,
) -> Result<TdpOutcome> {
    tdp_train_observed(train, test, arch, n, cfg, rng, &mut |_| {})
}

pub fn tdp_train_observed<R: Rng + ?Sized>(
    train: &OfflineDataset,
    test: &OfflineDataset,
    arch: &MlpArch,
    n: usize,
    cfg: &PrivacyConfig,
    rng: &mut R,
    observer: &mut dyn FnMut(&RoundObservation),
) -> Result<TdpOutcome> {
    cfg.validate()?;
    if train.spec() != test.spec() {
        return Err(Error::Config("train and test splits come from different tasks".into()));
    }
    let spec = train.spec();
    let mut ens = GaussianDynamicsEnsemble::new(spec.obs_dim, spec.act_dim, arch.clone(), n, rng)?;
    ens.fit_normalizers(train)?;
    let train_t = ens.tensors(train)?;
    let test_t = ens.tensors(test)?;
    let bounds = ens.log_var_bounds;
    let k = train.len();
    let sigma = cfg.z * cfg.clip / (cfg.q * k as f64);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let mut ledger = PrivacyLedger::new(cfg.q, cfg.z, cfg.delta)?;
    let mut logs = Vec::new();
    let mut best_nll = f64::INFINITY;
    let mut best = ens.members.clone();
    let mut stale = 0usize;

    for round in 0..cfg.max_rounds {
        let sampled: Vec<usize> = train.poisson_sample(cfg.q, rng)?.iter().map(|t| t.id).collect();
        let start = ens.members.clone();
        let work = |id: &usize| ens_clip_gd(arch, &train_t[*id], &start, cfg, bounds);
        let updates: Vec<Vec<ParamVector>> = if cfg.workers > 1 {
            pool.install(|| sampled.par_iter().map(work).collect::<Result<_>>())?
        } else {
            sampled.iter().map(work).collect::<Result<_>>()?
        };
        let avg = average_updates(&updates, &start, cfg.q, k);
        let pre = flatten(&avg);
        let update_norm = crate::nn::l2_norm(&pre);
        let noisy = gaussian_mechanism(&pre, sigma, rng)?;
        let noise: Vec<f64> = noisy.iter().zip(&pre).map(|(a, b)| a - b).collect();
        observer(&RoundObservation {
            round,
            sampled_ids: &sampled,
            sigma,
            pre_noise: &pre,
            noise: &noise,
        });
        let mut off = 0;
        for m in ens.members.iter_mut() {
            let len = m.len();
            for (p, u) in m.as_mut_slice().iter_mut().zip(&noisy[off..off + len]) {
                *p += u;
            }
            off += len;
            if !m.is_finite() {
                return Err(Error::Numeric(format!("non-finite parameters after round {round}")));
            }
        }
        let epsilon = ledger.record_round()?;
        let eval_now = (round + 1) % cfg.eval_every == 0 || round + 1 == cfg.max_rounds;
        let mut test_nll = None;
        if eval_now {
            let nll = ens.mean_nll(&test_t)?;
            test_nll = Some(nll);
            if nll < best_nll {
                best_nll = nll;
                best = ens.members.clone();
                stale = 0;
            } else {
                stale += 1;
            }
        }
        logs.push(TrainingRoundLog {
            round,
            sampled: sampled.len(),
            update_norm,
            test_nll,
            epsilon,
        });
        if stale >= cfg.early_stop_patience {
            break;
        }
    }
    let last = ens.members.clone();
    ens.members = best;
    Ok(TdpOutcome {
        ensemble: ens,
        last,
        ledger,
        logs,
        best_test_nll: best_nll,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_round_logs_to<W: Write>(mut w: W, logs: &[TrainingRoundLog]) -> Result<()> {
    writeln!(w, "round,sampled,update_norm,test_nll,epsilon")?;
    for l in logs {
        writeln!(w, "{},{},{},{},{}", l.round, l.sampled, l.update_norm, fmt_opt(l.test_nll), l.epsilon)?;
    }
    Ok(())
}

pub fn write_round_logs(path: impl AsRef<Path>, logs: &[TrainingRoundLog]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    write_round_logs_to(f, logs)
}
