//! Offline trajectories, the PMRL1 container, episode-level splitting,
//! scripted data collection and the dataset access audit.
//!
//! The unit of privacy is one trajectory. Every read of a trajectory through
//! the public accessors is counted by the dataset's [`AccessAudit`], which is
//! what lets the pipeline prove that policy optimization never touched the
//! private data.

use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{self, Reader};
use crate::env::{self, angle_normalize, EnvId, EnvSpec};
use crate::error::{Error, FormatError, Result};

pub const PMRL_MAGIC: &[u8; 8] = b"PMRL0001";
pub const PMRL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f32>,
    pub a: Vec<f32>,
    pub r: f32,
    pub s_next: Vec<f32>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.r as f64).sum()
    }

    fn validate(&self, spec: &EnvSpec) -> Result<()> {
        let bad = |msg: String| Err(Error::domain(format!("trajectory {}: {msg}", self.id)));
        if self.transitions.is_empty() {
            return bad("empty".into());
        }
        let last = self.transitions.len() - 1;
        for (t, tr) in self.transitions.iter().enumerate() {
            if tr.s.len() != spec.obs_dim || tr.s_next.len() != spec.obs_dim || tr.a.len() != spec.act_dim {
                return bad(format!("step {t} has wrong dimensions"));
            }
            let finite = tr.s.iter().chain(&tr.a).chain(&tr.s_next).all(|v| v.is_finite()) && tr.r.is_finite();
            if !finite {
                return bad(format!("step {t} has non-finite entries"));
            }
            if tr.done != (t == last) {
                return bad(format!("done flag at step {t} must be {}", t == last));
            }
            if t < last && tr.s_next != self.transitions[t + 1].s {
                return bad(format!("s_next at step {t} does not match the next state"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    ModelTraining = 0,
    PolicyTraining = 1,
    Evaluation = 2,
}

/// Counts trajectory reads. Shared by a dataset and everything split from it.
#[derive(Debug)]
pub struct AccessAudit {
    reads: AtomicU64,
    phase: AtomicU8,
    policy_phase_reads: AtomicU64,
}

impl Default for AccessAudit {
    fn default() -> Self {
        Self {
            reads: AtomicU64::new(0),
            phase: AtomicU8::new(Phase::ModelTraining as u8),
            policy_phase_reads: AtomicU64::new(0),
        }
    }
}

impl AccessAudit {
    pub fn read_counter(&self) -> u64 {
        self.reads.load(Ordering::SeqCst)
    }

    /// Reads recorded while the phase was `PolicyTraining`.
    pub fn policy_phase_reads(&self) -> u64 {
        self.policy_phase_reads.load(Ordering::SeqCst)
    }

    pub fn phase(&self) -> Phase {
        match self.phase.load(Ordering::SeqCst) {
            0 => Phase::ModelTraining,
            1 => Phase::PolicyTraining,
            _ => Phase::Evaluation,
        }
    }

    pub fn set_phase(&self, phase: Phase) {
        self.phase.store(phase as u8, Ordering::SeqCst);
    }

    fn record(&self, n: u64) {
        self.reads.fetch_add(n, Ordering::SeqCst);
        if self.phase() == Phase::PolicyTraining {
            self.policy_phase_reads.fetch_add(n, Ordering::SeqCst);
        }
    }

    /// Enters the policy phase and returns a guard that checks, on
    /// [`PolicyPhaseGuard::finish`], that no trajectory was read meanwhile.
    pub fn enter_policy_phase(self: &Arc<Self>) -> PolicyPhaseGuard {
        self.set_phase(Phase::PolicyTraining);
        PolicyPhaseGuard {
            audit: Arc::clone(self),
            start: self.read_counter(),
        }
    }
}

pub struct PolicyPhaseGuard {
    audit: Arc<AccessAudit>,
    start: u64,
}

impl PolicyPhaseGuard {
    pub fn reads_so_far(&self) -> u64 {
        self.audit.read_counter() - self.start
    }

    pub fn finish(self) -> Result<u64> {
        let delta = self.reads_so_far();
        self.audit.set_phase(Phase::Evaluation);
        if delta != 0 {
            return Err(Error::Audit(format!(
                "{delta} trajectory reads happened during policy training"
            )));
        }
        Ok(delta)
    }
}

pub struct OfflineDataset {
    spec: EnvSpec,
    trajectories: Vec<Trajectory>,
    provenance: String,
    audit: Arc<AccessAudit>,
}

impl std::fmt::Debug for OfflineDataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OfflineDataset")
            .field("env", &self.spec.id)
            .field("K", &self.trajectories.len())
            .field("provenance", &self.provenance)
            .finish()
    }
}

/// Content equality; the audit counters are not part of the data.
impl PartialEq for OfflineDataset {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.trajectories == other.trajectories && self.provenance == other.provenance
    }
}

impl OfflineDataset {
    pub fn new(spec: EnvSpec, trajectories: Vec<Trajectory>, provenance: impl Into<String>) -> Result<Self> {
        Self::with_audit(spec, trajectories, provenance.into(), Arc::new(AccessAudit::default()))
    }

    fn with_audit(
        spec: EnvSpec,
        trajectories: Vec<Trajectory>,
        provenance: String,
        audit: Arc<AccessAudit>,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::DegenerateDataset("a dataset needs at least one trajectory".into()));
        }
        for (k, tr) in trajectories.iter().enumerate() {
            if tr.id != k {
                return Err(Error::domain(format!("trajectory at position {k} has id {}", tr.id)));
            }
            tr.validate(&spec)?;
        }
        Ok(Self {
            spec,
            trajectories,
            provenance,
            audit,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn audit(&self) -> &Arc<AccessAudit> {
        &self.audit
    }

    pub fn episode_lengths(&self) -> Vec<usize> {
        self.trajectories.iter().map(Trajectory::len).collect()
    }

    /// Audited read of one trajectory.
    pub fn trajectory(&self, k: usize) -> &Trajectory {
        self.audit.record(1);
        &self.trajectories[k]
    }

    /// Audited iteration over all trajectories in id order.
    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> + '_ {
        self.trajectories.iter().inspect(move |_| self.audit.record(1))
    }

    /// Poisson subsampling: each trajectory is included independently with
    /// probability `q`. One uniform draw per trajectory, in id order.
    pub fn poisson_sample<R: Rng + ?Sized>(&self, q: f64, rng: &mut R) -> Result<Vec<&Trajectory>> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::domain(format!("sampling ratio must lie in (0, 1], got {q}")));
        }
        let mut picked = Vec::new();
        for tr in &self.trajectories {
            if rng.random::<f64>() < q {
                picked.push(tr);
            }
        }
        self.audit.record(picked.len() as u64);
        Ok(picked)
    }

    /// Partitions whole trajectories into train and test sets.
    pub fn split_by_episode(&self, test_fraction: f64, seed: u64) -> Result<EpisodeSplit> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::domain(format!("test fraction must lie in (0, 1), got {test_fraction}")));
        }
        let k = self.len();
        if k < 2 {
            return Err(Error::DegenerateDataset(format!("cannot split {k} trajectory")));
        }
        let n_test = ((test_fraction * k as f64).round() as usize).clamp(1, k - 1);
        let mut order: Vec<usize> = (0..k).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates
        for i in (1..k).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut test_ids = order[..n_test].to_vec();
        let mut train_ids = order[n_test..].to_vec();
        test_ids.sort_unstable();
        train_ids.sort_unstable();
        let build = |ids: &[usize], role: &str| -> Result<OfflineDataset> {
            let trajectories = ids
                .iter()
                .enumerate()
                .map(|(new_id, &src)| {
                    let mut t = self.trajectory(src).clone();
                    t.id = new_id;
                    t
                })
                .collect();
            let provenance = serde_json::json!({
                "split": role,
                "public": role == "test",
                "seed": seed,
                "test_fraction": test_fraction,
                "source_ids": ids,
                "parent": self.provenance,
            })
            .to_string();
            OfflineDataset::with_audit(self.spec.clone(), trajectories, provenance, Arc::clone(&self.audit))
        };
        Ok(EpisodeSplit {
            train: build(&train_ids, "train")?,
            test: build(&test_ids, "test")?,
            train_ids,
            test_ids,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = PmrlHeader {
            version: PMRL_VERSION,
            env_id: self.spec.id.name().to_string(),
            obs_dim: self.spec.obs_dim,
            act_dim: self.spec.act_dim,
            k: self.len(),
            episode_lengths: self.episode_lengths(),
            provenance: self.provenance.clone(),
        };
        let mut out = container::encode_envelope(PMRL_MAGIC, &header)?;
        for tr in self.iter() {
            out.extend_from_slice(&(tr.len() as u32).to_le_bytes());
            for t in &tr.transitions {
                let done = if t.done { 1.0f32 } else { 0.0f32 };
                for v in t.s.iter().chain(&t.a).chain(std::iter::once(&t.r)).chain(&t.s_next).chain(std::iter::once(&done)) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        let header: PmrlHeader = rd.envelope(PMRL_MAGIC)?;
        if header.version != PMRL_VERSION {
            return Err(FormatError::VersionMismatch {
                offset: 12,
                expected: PMRL_VERSION,
                found: header.version.to_string(),
            }
            .into());
        }
        let id = EnvId::from_name(&header.env_id).ok_or_else(|| FormatError::Header {
            offset: 12,
            detail: format!("unknown env_id {:?}", header.env_id),
        })?;
        let spec = EnvSpec::new(id);
        if header.obs_dim != spec.obs_dim || header.act_dim != spec.act_dim {
            return Err(FormatError::DimensionMismatch {
                offset: 12,
                detail: format!(
                    "header declares obs_dim {} / act_dim {} but {} has {} / {}",
                    header.obs_dim, header.act_dim, id, spec.obs_dim, spec.act_dim
                ),
            }
            .into());
        }
        if header.episode_lengths.len() != header.k {
            return Err(FormatError::DimensionMismatch {
                offset: 12,
                detail: format!(
                    "K = {} but {} episode lengths listed",
                    header.k,
                    header.episode_lengths.len()
                ),
            }
            .into());
        }
        let (od, ad) = (spec.obs_dim, spec.act_dim);
        let mut trajectories = Vec::with_capacity(header.k);
        for k in 0..header.k {
            let at = rd.offset();
            let t_k = rd.u32()? as usize;
            if t_k != header.episode_lengths[k] {
                return Err(FormatError::DimensionMismatch {
                    offset: at,
                    detail: format!(
                        "episode {k} block has {t_k} steps, header says {}",
                        header.episode_lengths[k]
                    ),
                }
                .into());
            }
            let mut transitions = Vec::with_capacity(t_k);
            for _ in 0..t_k {
                let mut read_n = |n: usize| -> std::result::Result<Vec<f32>, FormatError> {
                    (0..n).map(|_| rd.f32()).collect()
                };
                let s = read_n(od)?;
                let a = read_n(ad)?;
                let r = read_n(1)?[0];
                let s_next = read_n(od)?;
                let done_at = rd.offset();
                let done = match rd.f32()? {
                    d if d == 0.0 => false,
                    d if d == 1.0 => true,
                    d => {
                        return Err(FormatError::InvalidRecord {
                            offset: done_at,
                            detail: format!("done flag must be 0.0 or 1.0, found {d}"),
                        }
                        .into())
                    }
                };
                transitions.push(Transition { s, a, r, s_next, done });
            }
            trajectories.push(Trajectory { id: k, transitions });
        }
        rd.finish()?;
        OfflineDataset::new(spec, trajectories, header.provenance)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct PmrlHeader {
    version: u32,
    env_id: String,
    obs_dim: usize,
    act_dim: usize,
    #[serde(rename = "K")]
    k: usize,
    episode_lengths: Vec<usize>,
    provenance: String,
}

#[derive(Debug)]
pub struct EpisodeSplit {
    pub train: OfflineDataset,
    pub test: OfflineDataset,
    /// Source ids (in the parent dataset) of the train trajectories.
    pub train_ids: Vec<usize>,
    /// Source ids of the test trajectories.
    pub test_ids: Vec<usize>,
}

/// Scripted controllers standing in for a learned data-collection agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Controller {
    /// Uniform actions over the action box.
    Random,
    /// Weak energy shaping with heavy action noise.
    Medium,
    /// Tuned energy pumping with a stabilizing PD law near the top.
    Expert,
}

impl Controller {
    pub fn act<R: Rng + ?Sized>(self, spec: &EnvSpec, physical: &[f64], rng: &mut R) -> Vec<f64> {
        if self == Controller::Random {
            return spec
                .action_low
                .iter()
                .zip(&spec.action_high)
                .map(|(lo, hi)| rng.random_range(*lo..=*hi))
                .collect();
        }
        let noise: f64 = rng.sample(StandardNormal);
        let u = match spec.id {
            EnvId::Pendulum => pendulum_controller(self, physical, noise),
            EnvId::CartPoleBalance | EnvId::CartPoleSwingUp => cartpole_controller(self, physical, noise),
        };
        spec.clamp_action(&[u])
    }
}

fn pendulum_controller(kind: Controller, x: &[f64], noise: f64) -> f64 {
    let th = angle_normalize(x[0]);
    let thdot = x[1];
    // energy relative to upright rest, from θ̈ = 15 sin θ + 3 u
    let energy = 0.5 * thdot * thdot + 15.0 * (th.cos() - 1.0);
    match kind {
        Controller::Expert => {
            if th.cos() > 0.85 {
                -(12.0 * th + 2.5 * thdot)
            } else if thdot.abs() > 0.05 {
                -0.5 * energy * thdot
            } else {
                2.0
            }
        }
        _ => {
            let u = if th.cos() > 0.9 {
                -(5.0 * th + 0.8 * thdot)
            } else if thdot.abs() > 0.05 {
                -0.08 * energy * thdot
            } else {
                1.0
            };
            u + 1.5 * noise
        }
    }
}

fn cartpole_controller(kind: Controller, x: &[f64], noise: f64) -> f64 {
    let (pos, th, vel, thdot) = (x[0], angle_normalize(x[1]), x[2], x[3]);
    let balance = 2.0 * (th * 20.0 + thdot * 3.0 + pos * 1.0 + vel * 1.5) / 10.0;
    let u = if th.cos() > 0.8 {
        balance
    } else {
        // pump pole energy: E = ½ θ̇² l_eff + g (cos θ − 1)
        let energy = 0.5 * thdot * thdot * (2.0 / 3.0) + 9.81 * (th.cos() - 1.0);
        let dir = (thdot * th.cos()).signum();
        -dir * (-energy).min(1.0) - 0.1 * pos
    };
    match kind {
        Controller::Expert => u,
        _ => 0.5 * u + 0.6 * noise,
    }
}

/// Per-episode mixture over scripted controllers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicy {
    pub mixture: Vec<(Controller, f64)>,
}

impl BehaviorPolicy {
    pub fn single(c: Controller) -> Self {
        Self {
            mixture: vec![(c, 1.0)],
        }
    }

    /// Random / medium / expert episodes in a 30 / 40 / 30 mix.
    pub fn scripted_mixture() -> Self {
        Self {
            mixture: vec![
                (Controller::Random, 0.3),
                (Controller::Medium, 0.4),
                (Controller::Expert, 0.3),
            ],
        }
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> Controller {
        let total: f64 = self.mixture.iter().map(|(_, w)| w).sum();
        let mut u = rng.random::<f64>() * total;
        for (c, w) in &self.mixture {
            if u < *w {
                return *c;
            }
            u -= w;
        }
        self.mixture.last().expect("non-empty mixture").0
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

/// Rolls out `k` full episodes of the behavior policy in the real task.
pub fn collect(spec: &EnvSpec, behavior: &BehaviorPolicy, k: usize, seed: u64) -> Result<OfflineDataset> {
    if k == 0 {
        return Err(Error::DegenerateDataset("K must be at least 1".into()));
    }
    if behavior.mixture.is_empty() || behavior.mixture.iter().any(|(_, w)| !(*w >= 0.0)) {
        return Err(Error::Config("behavior mixture needs non-negative weights".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = std::collections::BTreeMap::<String, usize>::new();
    let mut trajectories = Vec::with_capacity(k);
    for id in 0..k {
        let controller = behavior.pick(&mut rng);
        *counts.entry(format!("{controller:?}")).or_default() += 1;
        let mut state = env::reset_with(spec, &mut rng);
        let mut obs = to_f32(&env::observe(spec, &state));
        let mut transitions = Vec::with_capacity(spec.episode_length);
        loop {
            let action = controller.act(spec, &state.physical, &mut rng);
            let out = env::step(spec, &state, &action)?;
            let next_obs = to_f32(&env::observe(spec, &out.state));
            transitions.push(Transition {
                s: obs,
                a: to_f32(&action),
                r: out.reward as f32,
                s_next: next_obs.clone(),
                done: out.done,
            });
            obs = next_obs;
            state = out.state;
            if out.done {
                break;
            }
        }
        trajectories.push(Trajectory { id, transitions });
    }
    let provenance = serde_json::json!({
        "collector": "scripted",
        "env": spec.id.name(),
        "mixture": behavior.mixture.iter().map(|(c, w)| (format!("{c:?}"), *w)).collect::<Vec<_>>(),
        "episodes_per_controller": counts,
        "seed": seed,
    })
    .to_string();
    OfflineDataset::new(spec.clone(), trajectories, provenance)
}
