//! Soft Actor-Critic trained only on rollouts of the pessimistic model, and
//! evaluation in the true task.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{self, push_f64_block, Reader};
use crate::env::{self, EnvSpec};
use crate::error::{Error, Result};
use crate::model::PessimisticMDP;
use crate::nn::{softplus, Adam, MlpArch, ParamVector};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const POLICY_MAGIC: [u8; 8] = *b"PMRLPOL1";
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub lr: f64,
    pub batch: usize,
    pub gamma: f64,
    pub polyak: f64,
    pub target_entropy: f64,
    pub init_alpha: f64,
    pub hidden: Vec<usize>,
    pub replay_capacity: usize,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Model steps between update bursts; each burst performs this many updates.
    pub update_every: usize,
    pub eval_episodes: usize,
    pub eval_seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch: 256,
            gamma: 0.99,
            polyak: 0.995,
            target_entropy: -3.0,
            init_alpha: 1.0,
            hidden: vec![64, 64],
            replay_capacity: 1_000_000,
            warmup_steps: 1000,
            epochs: 60,
            steps_per_epoch: 1000,
            update_every: 1,
            eval_episodes: 10,
            eval_seed: 12345,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("sac lr must be positive");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return bad("polyak must lie in (0, 1]");
        }
        if !(self.init_alpha > 0.0) {
            return bad("initial alpha must be positive");
        }
        if self.batch == 0 || self.replay_capacity == 0 || self.steps_per_epoch == 0 || self.update_every == 0 {
            return bad("batch, replay_capacity, steps_per_epoch and update_every must be positive");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be at least 1");
        }
        Ok(())
    }
}

/// Tanh-squashed diagonal Gaussian actor.
#[derive(Clone, Debug, PartialEq)]
pub struct SacPolicy {
    pub arch: MlpArch,
    pub params: ParamVector,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

/// Reparameterized actions for a batch together with what the actor gradient needs.
pub struct SquashedSample {
    pub actions: Array2<f64>,
    pub log_prob: Array1<f64>,
    tape: crate::nn::Tape,
    tanh_u: Array2<f64>,
    std: Array2<f64>,
    eps: Array2<f64>,
    clamped: Array2<bool>,
}

/// `log(1 − tanh²u)` without cancellation.
fn log1m_tanh2(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

impl SacPolicy {
    pub fn new<R: Rng + ?Sized>(spec: &EnvSpec, hidden: Vec<usize>, rng: &mut R) -> Self {
        let arch = MlpArch::new(spec.obs_dim, hidden, 2 * spec.act_dim);
        let params = arch.init_params(rng);
        Self {
            arch,
            params,
            action_low: spec.action_low.clone(),
            action_high: spec.action_high.clone(),
        }
    }

    pub fn act_dim(&self) -> usize {
        self.action_low.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn half(&self, j: usize) -> f64 {
        0.5 * (self.action_high[j] - self.action_low[j])
    }

    fn center(&self, j: usize) -> f64 {
        0.5 * (self.action_high[j] + self.action_low[j])
    }

    /// Squashed actions and log-densities for given standard-normal noise.
    pub fn sample_with_noise(&self, states: ArrayView2<f64>, eps: ArrayView2<f64>) -> SquashedSample {
        let d = self.act_dim();
        let tape = self.arch.forward_tape(self.params.as_slice(), states);
        let out = tape.output();
        let n = states.nrows();
        let mut actions = Array2::zeros((n, d));
        let mut log_prob = Array1::zeros(n);
        let mut tanh_u = Array2::zeros((n, d));
        let mut std = Array2::zeros((n, d));
        let mut clamped = Array2::from_elem((n, d), false);
        for r in 0..n {
            let mut lp = 0.0;
            for j in 0..d {
                let raw = out[[r, d + j]];
                let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                clamped[[r, j]] = raw != ls;
                let s = ls.exp();
                let e = eps[[r, j]];
                let u = out[[r, j]] + s * e;
                let t = u.tanh();
                actions[[r, j]] = self.center(j) + self.half(j) * t;
                lp += -0.5 * e * e - ls - HALF_LN_2PI - log1m_tanh2(u) - self.half(j).ln();
                tanh_u[[r, j]] = t;
                std[[r, j]] = s;
            }
            log_prob[r] = lp;
        }
        SquashedSample {
            actions,
            log_prob,
            tape,
            tanh_u,
            std,
            eps: eps.to_owned(),
            clamped,
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, states: ArrayView2<f64>, rng: &mut R) -> SquashedSample {
        let eps = Array2::from_shape_fn((states.nrows(), self.act_dim()), |_| rng.sample::<f64, _>(StandardNormal));
        self.sample_with_noise(states, eps.view())
    }

    /// Action for one state; `deterministic` returns the squashed mean.
    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R, deterministic: bool) -> Result<Vec<f64>> {
        Ok(self.act_with_log_prob(s, rng, deterministic)?.0)
    }

    /// Action and its log-density under the squashed Gaussian.
    pub fn act_with_log_prob<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R, deterministic: bool) -> Result<(Vec<f64>, f64)> {
        if s.len() != self.obs_dim() {
            return Err(Error::Dimension {
                what: "policy state",
                expected: self.obs_dim(),
                found: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite state given to the policy"));
        }
        let x = ArrayView2::from_shape((1, s.len()), s).expect("checked");
        let eps = if deterministic {
            Array2::zeros((1, self.act_dim()))
        } else {
            Array2::from_shape_fn((1, self.act_dim()), |_| rng.sample::<f64, _>(StandardNormal))
        };
        let smp = self.sample_with_noise(x, eps.view());
        Ok((smp.actions.row(0).to_vec(), smp.log_prob[0]))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = PolicyHeader {
            version: 1,
            arch: self.arch.clone(),
            action_low: self.action_low.clone(),
            action_high: self.action_high.clone(),
        };
        let mut out = container::encode_envelope(&POLICY_MAGIC, &header)?;
        push_f64_block(&mut out, self.params.as_slice());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        let h: PolicyHeader = rd.envelope(&POLICY_MAGIC)?;
        h.arch.validate()?;
        let layout = h.arch.layout();
        let values = rd.f64_block(Some(layout.total_len()))?;
        rd.finish()?;
        if h.action_low.len() != h.action_high.len() || h.arch.output_dim != 2 * h.action_low.len() {
            return Err(Error::Config("policy checkpoint has inconsistent action dimensions".into()));
        }
        Ok(Self {
            params: ParamVector::from_flat(layout, values)?,
            arch: h.arch,
            action_low: h.action_low,
            action_high: h.action_high,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path.as_ref())?)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    version: u32,
    arch: MlpArch,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SacCritics {
    pub arch: MlpArch,
    pub q1: ParamVector,
    pub q2: ParamVector,
    pub q1_targ: ParamVector,
    pub q2_targ: ParamVector,
    pub polyak: f64,
    pub log_alpha: f64,
    pub target_entropy: f64,
}

impl SacCritics {
    pub fn new<R: Rng + ?Sized>(spec: &EnvSpec, cfg: &SacConfig, rng: &mut R) -> Self {
        let arch = MlpArch::new(spec.obs_dim + spec.act_dim, cfg.hidden.clone(), 1);
        let q1 = arch.init_params(rng);
        let q2 = arch.init_params(rng);
        Self {
            q1_targ: q1.clone(),
            q2_targ: q2.clone(),
            q1,
            q2,
            arch,
            polyak: cfg.polyak,
            log_alpha: cfg.init_alpha.ln(),
            target_entropy: cfg.target_entropy,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn q_values(&self, params: &ParamVector, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array1<f64> {
        let x = ndarray::concatenate(Axis(1), &[states, actions]).expect("same rows");
        self.arch.forward_batch(params.as_slice(), x.view()).column(0).to_owned()
    }

    /// `ω_targ ← ρ ω_targ + (1 − ρ) ω` for both critics.
    pub fn polyak_update(&mut self) {
        let rho = self.polyak;
        for (t, o) in [(&mut self.q1_targ, &self.q1), (&mut self.q2_targ, &self.q2)] {
            for (tv, ov) in t.as_mut_slice().iter_mut().zip(o.as_slice()) {
                *tv = rho * *tv + (1.0 - rho) * ov;
            }
        }
    }
}

/// Bellman target for one transition:
/// `r + γ(1 − d)(min_i Q_targ,i(s′, ã′) − α log π(ã′|s′))` with a fresh `ã′`.
#[allow(clippy::too_many_arguments)]
pub fn q_target<R: Rng + ?Sized>(
    critics: &SacCritics,
    policy: &SacPolicy,
    r: f64,
    s_next: &[f64],
    done: bool,
    gamma: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<f64> {
    if !r.is_finite() || s_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite transition in Bellman target"));
    }
    let s = ArrayView2::from_shape((1, s_next.len()), s_next).map_err(|_| Error::domain("state shape"))?;
    let y = batch_targets(critics, policy, &[r], s, &[done], gamma, alpha, rng);
    Ok(y[0])
}

#[allow(clippy::too_many_arguments)]
fn batch_targets<R: Rng + ?Sized>(
    critics: &SacCritics,
    policy: &SacPolicy,
    r: &[f64],
    s_next: ArrayView2<f64>,
    done: &[bool],
    gamma: f64,
    alpha: f64,
    rng: &mut R,
) -> Vec<f64> {
    let smp = policy.sample_batch(s_next, rng);
    let t1 = critics.q_values(&critics.q1_targ, s_next, smp.actions.view());
    let t2 = critics.q_values(&critics.q2_targ, s_next, smp.actions.view());
    (0..r.len())
        .map(|i| {
            if done[i] || gamma == 0.0 {
                r[i]
            } else {
                r[i] + gamma * (t1[i].min(t2[i]) - alpha * smp.log_prob[i])
            }
        })
        .collect()
}

/// `½ mean (Q(s,a) − y)²` and its gradient.
pub fn critic_loss_grad(
    arch: &MlpArch,
    params: &ParamVector,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    y: &[f64],
) -> (f64, ParamVector) {
    let n = states.nrows();
    let x = ndarray::concatenate(Axis(1), &[states, actions]).expect("same rows");
    let tape = arch.forward_tape(params.as_slice(), x.view());
    let q = tape.output().column(0).to_owned();
    let mut d_out = Array2::zeros((n, 1));
    let mut loss = 0.0;
    for i in 0..n {
        let e = q[i] - y[i];
        loss += 0.5 * e * e / n as f64;
        d_out[[i, 0]] = e / n as f64;
    }
    let mut grad = ParamVector::zeros(params.layout().clone());
    arch.backward_batch(params.as_slice(), &tape, d_out, grad.as_mut_slice(), false);
    (loss, grad)
}

/// Actor objective `mean(α log π(ã|s) − min_i Q_i(s, ã))` for fixed noise,
/// its gradient, and the batch-mean log-density.
pub fn actor_loss_grad(
    policy: &SacPolicy,
    critics: &SacCritics,
    states: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    alpha: f64,
) -> (f64, ParamVector, f64) {
    let n = states.nrows();
    let d = policy.act_dim();
    let od = states.ncols();
    let smp = policy.sample_with_noise(states, eps);
    let x = ndarray::concatenate(Axis(1), &[states, smp.actions.view()]).expect("same rows");
    let tape1 = critics.arch.forward_tape(critics.q1.as_slice(), x.view());
    let tape2 = critics.arch.forward_tape(critics.q2.as_slice(), x.view());
    let (q1, q2) = (tape1.output().column(0).to_owned(), tape2.output().column(0).to_owned());
    let inv_n = 1.0 / n as f64;
    let mut d1 = Array2::zeros((n, 1));
    let mut d2 = Array2::zeros((n, 1));
    let mut loss = 0.0;
    for i in 0..n {
        let qmin = q1[i].min(q2[i]);
        loss += inv_n * (alpha * smp.log_prob[i] - qmin);
        if q1[i] <= q2[i] {
            d1[[i, 0]] = 1.0;
        } else {
            d2[[i, 0]] = 1.0;
        }
    }
    let mut scratch = vec![0.0; critics.q1.len()];
    let gx1 = critics.arch.backward_batch(critics.q1.as_slice(), &tape1, d1, &mut scratch, true).expect("input grad");
    let gx2 = critics.arch.backward_batch(critics.q2.as_slice(), &tape2, d2, &mut scratch, true).expect("input grad");
    let mut d_out = Array2::zeros((n, 2 * d));
    for i in 0..n {
        for j in 0..d {
            let t = smp.tanh_u[[i, j]];
            let dq_da = gx1[[i, od + j]] + gx2[[i, od + j]];
            let d_u = inv_n * (alpha * 2.0 * t - dq_da * policy.half(j) * (1.0 - t * t));
            d_out[[i, j]] = d_u;
            d_out[[i, d + j]] = if smp.clamped[[i, j]] {
                0.0
            } else {
                d_u * smp.std[[i, j]] * smp.eps[[i, j]] - alpha * inv_n
            };
        }
    }
    let mut grad = ParamVector::zeros(policy.params.layout().clone());
    policy.arch.backward_batch(policy.params.as_slice(), &smp.tape, d_out, grad.as_mut_slice(), false);
    let mean_lp = smp.log_prob.mean().unwrap_or(0.0);
    (loss, grad, mean_lp)
}

/// One model-generated transition as stored for SAC.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelTransition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    /// Penalized reward `r̂ − λu`.
    pub r: f64,
    /// The ensemble's sampled reward before the penalty.
    pub r_model: f64,
    pub s_next: Vec<f64>,
    /// True task termination (task horizon reached).
    pub done: bool,
    /// Cut by the rollout length; the target still bootstraps.
    pub truncated: bool,
}

/// Bounded FIFO of model transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<ModelTransition>,
}

pub struct Batch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Vec<f64>,
    pub s_next: Array2<f64>,
    pub done: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: ModelTransition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Batch {
        let first = &self.items[0];
        let (od, ad) = (first.s.len(), first.a.len());
        let mut b = Batch {
            s: Array2::zeros((n, od)),
            a: Array2::zeros((n, ad)),
            r: Vec::with_capacity(n),
            s_next: Array2::zeros((n, od)),
            done: Vec::with_capacity(n),
        };
        for row in 0..n {
            let t = &self.items[rng.random_range(0..self.items.len())];
            b.s.row_mut(row).assign(&ndarray::ArrayView1::from(&t.s[..]));
            b.a.row_mut(row).assign(&ndarray::ArrayView1::from(&t.a[..]));
            b.s_next.row_mut(row).assign(&ndarray::ArrayView1::from(&t.s_next[..]));
            b.r.push(t.r);
            b.done.push(t.done);
        }
        b
    }
}

/// Actor, critics and their optimizer state.
pub struct SacLearner {
    pub policy: SacPolicy,
    pub critics: SacCritics,
    opt_actor: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_alpha: Adam,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub mean_log_prob: f64,
    pub alpha: f64,
}

impl SacLearner {
    pub fn new<R: Rng + ?Sized>(spec: &EnvSpec, cfg: &SacConfig, rng: &mut R) -> Self {
        let policy = SacPolicy::new(spec, cfg.hidden.clone(), rng);
        let critics = SacCritics::new(spec, cfg, rng);
        Self {
            opt_actor: Adam::new(policy.params.len(), cfg.lr),
            opt_q1: Adam::new(critics.q1.len(), cfg.lr),
            opt_q2: Adam::new(critics.q2.len(), cfg.lr),
            opt_alpha: Adam::new(1, cfg.lr),
            policy,
            critics,
        }
    }

    /// Critic step, actor step, temperature step, then the polyak update.
    pub fn update<R: Rng + ?Sized>(&mut self, b: &Batch, cfg: &SacConfig, rng: &mut R) -> Result<UpdateStats> {
        let alpha = self.critics.alpha();
        let y = batch_targets(&self.critics, &self.policy, &b.r, b.s_next.view(), &b.done, cfg.gamma, alpha, rng);
        let (l1, g1) = critic_loss_grad(&self.critics.arch, &self.critics.q1, b.s.view(), b.a.view(), &y);
        let (l2, g2) = critic_loss_grad(&self.critics.arch, &self.critics.q2, b.s.view(), b.a.view(), &y);
        if !(l1 + l2).is_finite() {
            return Err(Error::Numeric(format!("critic loss is {} / {}", l1, l2)));
        }
        self.opt_q1.step(self.critics.q1.as_mut_slice(), g1.as_slice());
        self.opt_q2.step(self.critics.q2.as_mut_slice(), g2.as_slice());

        let eps = Array2::from_shape_fn((b.s.nrows(), self.policy.act_dim()), |_| rng.sample::<f64, _>(StandardNormal));
        let (la, ga, mean_lp) = actor_loss_grad(&self.policy, &self.critics, b.s.view(), eps.view(), alpha);
        if !la.is_finite() {
            return Err(Error::Numeric(format!("actor loss is {la}")));
        }
        self.opt_actor.step(self.policy.params.as_mut_slice(), ga.as_slice());

        // loss_α = −log α · (mean log π + H̄)
        let g_alpha = -(mean_lp + self.critics.target_entropy);
        let mut la_param = [self.critics.log_alpha];
        self.opt_alpha.step(&mut la_param, &[g_alpha]);
        self.critics.log_alpha = la_param[0];

        self.critics.polyak_update();
        Ok(UpdateStats {
            critic_loss: l1 + l2,
            actor_loss: la,
            mean_log_prob: mean_lp,
            alpha: self.critics.alpha(),
        })
    }
}

/// Incremental rollout in the pessimistic model.
pub struct Rollout {
    state: Vec<f64>,
    t: usize,
    task_t: usize,
}

impl Rollout {
    pub fn start<R: Rng + ?Sized>(pmdp: &PessimisticMDP, rng: &mut R) -> Self {
        Self {
            state: pmdp.initial_source.sample(rng),
            t: 0,
            task_t: 0,
        }
    }

    /// Advances one step. `None` means the model produced non-finite values
    /// and the rollout was cut before this step.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        pmdp: &PessimisticMDP,
        action: Vec<f64>,
        task_horizon: usize,
        rng: &mut R,
    ) -> Option<(ModelTransition, bool)> {
        let preds = pmdp.ensemble.predict(&self.state, &action).ok()?;
        let (s_next, r_model) = {
            let i = rng.random_range(0..preds.len());
            let p = &preds[i];
            let d = p.mean.len();
            let draw: Vec<f64> = (0..d)
                .map(|j| p.mean[j] + p.var[j].sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let next: Vec<f64> = self.state.iter().zip(&draw).map(|(a, b)| a + b).collect();
            (next, draw[d - 1])
        };
        let u = match pmdp.estimator {
            crate::model::UncertaintyEstimator::MaxAleatoric => crate::model::u_ma_of(&preds),
            crate::model::UncertaintyEstimator::MaxPairwiseDiff => crate::model::u_mpd_of(&preds),
        };
        let r = r_model - pmdp.lambda * u;
        if !r.is_finite() || s_next.iter().any(|v| !v.is_finite()) {
            return None;
        }
        self.t += 1;
        self.task_t += 1;
        let done = self.task_t >= task_horizon;
        let truncated = !done && self.t >= pmdp.horizon;
        let tr = ModelTransition {
            s: std::mem::replace(&mut self.state, s_next.clone()),
            a: action,
            r,
            r_model,
            s_next,
            done,
            truncated,
        };
        Some((tr, done || truncated))
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }
}

/// One complete rollout of at most `H` steps from `ρ0`.
pub fn model_rollout<R: Rng + ?Sized>(
    pmdp: &PessimisticMDP,
    policy: &SacPolicy,
    task_horizon: usize,
    rng: &mut R,
) -> Result<Vec<ModelTransition>> {
    let mut ro = Rollout::start(pmdp, rng);
    let mut out = Vec::with_capacity(pmdp.horizon);
    loop {
        let a = policy.act(ro.state(), rng, false)?;
        match ro.step(pmdp, a, task_horizon, rng) {
            Some((tr, end)) => {
                out.push(tr);
                if end {
                    break;
                }
            }
            None => break,
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub normalized: Vec<f64>,
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized_return: f64,
}

/// Deterministic policy in the true task, `episodes` full episodes.
pub fn evaluate(spec: &EnvSpec, policy: &SacPolicy, episodes: usize, seed: u64) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::domain("evaluation needs at least one episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env::reset_with(spec, &mut rng);
        let mut total = 0.0;
        loop {
            let obs = env::observe(spec, &state);
            let a = policy.act(&obs, &mut rng, true)?;
            let out = env::step(spec, &state, &a)?;
            total += out.reward;
            state = out.state;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(summarize(spec, returns))
}

fn summarize(spec: &EnvSpec, returns: Vec<f64>) -> EvalResult {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let normalized: Vec<f64> = returns.iter().map(|r| env::normalize_return(spec, *r)).collect();
    EvalResult {
        mean_return: mean,
        std_return: var.sqrt(),
        normalized_return: normalized.iter().sum::<f64>() / n,
        returns,
        normalized,
    }
}

/// Evaluation of an arbitrary state-feedback controller, for baselines.
pub fn evaluate_fn(
    spec: &EnvSpec,
    episodes: usize,
    seed: u64,
    mut controller: impl FnMut(&[f64]) -> Vec<f64>,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::domain("evaluation needs at least one episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env::reset_with(spec, &mut rng);
        let mut total = 0.0;
        loop {
            let a = controller(&env::observe(spec, &state));
            let out = env::step(spec, &state, &a)?;
            total += out.reward;
            state = out.state;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(summarize(spec, returns))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized_return: f64,
}

pub struct SacOutcome {
    pub policy: SacPolicy,
    pub metrics: Vec<EpochMetrics>,
    pub cut_rollouts: usize,
    pub final_alpha: f64,
}

/// Full SAC run on model rollouts; evaluated in the true task after every epoch.
pub fn sac_train<R: Rng + ?Sized>(pmdp: &PessimisticMDP, spec: &EnvSpec, cfg: &SacConfig, rng: &mut R) -> Result<SacOutcome> {
    cfg.validate()?;
    let mut learner = SacLearner::new(spec, cfg, rng);
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    let mut ro = Rollout::start(pmdp, rng);
    let mut cut = 0usize;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut total_steps = 0usize;
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let a = if total_steps < cfg.warmup_steps {
                spec.action_low
                    .iter()
                    .zip(&spec.action_high)
                    .map(|(lo, hi)| rng.random_range(*lo..=*hi))
                    .collect()
            } else {
                learner.policy.act(ro.state(), rng, false)?
            };
            match ro.step(pmdp, a, spec.episode_length, rng) {
                Some((tr, end)) => {
                    buffer.push(tr);
                    if end {
                        ro = Rollout::start(pmdp, rng);
                    }
                }
                None => {
                    cut += 1;
                    ro = Rollout::start(pmdp, rng);
                }
            }
            total_steps += 1;
            if total_steps >= cfg.warmup_steps && total_steps % cfg.update_every == 0 && !buffer.is_empty() {
                for _ in 0..cfg.update_every {
                    let b = buffer.sample(cfg.batch, rng);
                    learner.update(&b, cfg, rng)?;
                }
            }
        }
        let ev = evaluate(spec, &learner.policy, cfg.eval_episodes, cfg.eval_seed)?;
        metrics.push(EpochMetrics {
            epoch,
            mean_return: ev.mean_return,
            std_return: ev.std_return,
            normalized_return: ev.normalized_return,
        });
    }
    Ok(SacOutcome {
        final_alpha: learner.critics.alpha(),
        policy: learner.policy,
        metrics,
        cut_rollouts: cut,
    })
}

pub fn write_epoch_metrics_to<W: Write>(mut w: W, metrics: &[EpochMetrics]) -> Result<()> {
    writeln!(w, "epoch,mean_return,std_return,normalized_return")?;
    for m in metrics {
        writeln!(w, "{},{},{},{}", m.epoch, m.mean_return, m.std_return, m.normalized_return)?;
    }
    Ok(())
}

pub fn write_epoch_metrics(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    write_epoch_metrics_to(f, metrics)
}
