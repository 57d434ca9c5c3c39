//! Gaussian dynamics ensemble over `(Δs, r)`, uncertainty estimators and the
//! pessimistic MDP that policy optimization runs in.

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{self, push_f64_block, Reader};
use crate::dataset::OfflineDataset;
use crate::env::{self, EnvSpec};
use crate::error::{Error, Result};
use crate::nn::{LogVarBounds, MlpArch, ParamVector};

const MODEL_MAGIC: [u8; 8] = *b"PMRLMOD1";

/// Per-feature affine standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column statistics of `rows`. Near-constant columns keep unit scale.
    pub fn fit(rows: ArrayView2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::DegenerateDataset("cannot fit a normalizer on zero rows".into()));
        }
        let mean = rows.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std = rows
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|s| if *s > 1e-8 { *s } else { 1.0 })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_rows(&self, rows: &mut Array2<f64>) {
        for mut row in rows.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("normalizer needs matching lengths and positive std".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UncertaintyEstimator {
    MaxAleatoric,
    MaxPairwiseDiff,
}

impl FromStr for UncertaintyEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ma" | "max-aleatoric" | "maxaleatoric" => Ok(Self::MaxAleatoric),
            "mpd" | "max-pairwise-diff" | "maxpairwisediff" => Ok(Self::MaxPairwiseDiff),
            _ => Err(Error::Config(format!("unknown uncertainty estimator {s:?} (use ma or mpd)"))),
        }
    }
}

/// Mean and diagonal variance over `(Δs, r)` from one member.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalized model-training tensors for one trajectory.
#[derive(Clone, Debug)]
pub struct TrajectoryTensors {
    pub id: usize,
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDynamicsEnsemble {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub arch: MlpArch,
    pub members: Vec<ParamVector>,
    pub input_norm: Normalizer,
    pub target_norm: Normalizer,
    pub log_var_bounds: LogVarBounds,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    obs_dim: usize,
    act_dim: usize,
    n: usize,
    arch: MlpArch,
    log_var_bounds: LogVarBounds,
}

impl GaussianDynamicsEnsemble {
    pub fn arch_for(obs_dim: usize, act_dim: usize, hidden: Vec<usize>) -> MlpArch {
        MlpArch::new(obs_dim + act_dim, hidden, 2 * (obs_dim + 1))
    }

    /// Freshly initialized members with identity normalizers.
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, arch: MlpArch, n: usize, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("ensemble size N must be at least 1".into()));
        }
        let members = (0..n).map(|_| arch.init_params(rng)).collect();
        Self::from_parts(
            obs_dim,
            act_dim,
            arch,
            members,
            Normalizer::identity(obs_dim + act_dim),
            Normalizer::identity(obs_dim + 1),
            LogVarBounds::default(),
        )
    }

    pub fn from_parts(
        obs_dim: usize,
        act_dim: usize,
        arch: MlpArch,
        members: Vec<ParamVector>,
        input_norm: Normalizer,
        target_norm: Normalizer,
        log_var_bounds: LogVarBounds,
    ) -> Result<Self> {
        arch.validate()?;
        if arch.input_dim != obs_dim + act_dim || arch.output_dim != 2 * (obs_dim + 1) {
            return Err(Error::Config(format!(
                "dynamics net must map {} inputs to {} outputs",
                obs_dim + act_dim,
                2 * (obs_dim + 1)
            )));
        }
        if members.is_empty() {
            return Err(Error::Config("ensemble size N must be at least 1".into()));
        }
        let layout = arch.layout();
        if members.iter().any(|m| *m.layout() != layout) {
            return Err(Error::Layout("every member must share the ensemble architecture".into()));
        }
        input_norm.validate()?;
        target_norm.validate()?;
        if input_norm.dim() != obs_dim + act_dim || target_norm.dim() != obs_dim + 1 {
            return Err(Error::Config("normalizer width does not match the task".into()));
        }
        LogVarBounds::new(log_var_bounds.lo, log_var_bounds.hi)?;
        Ok(Self {
            obs_dim,
            act_dim,
            arch,
            members,
            input_norm,
            target_norm,
            log_var_bounds,
        })
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    fn target_dim(&self) -> usize {
        self.obs_dim + 1
    }

    fn raw_rows(&self, ds: &OfflineDataset) -> (Array2<f64>, Array2<f64>) {
        let rows: usize = ds.episode_lengths().iter().sum();
        let mut x = Array2::zeros((rows, self.obs_dim + self.act_dim));
        let mut y = Array2::zeros((rows, self.target_dim()));
        let mut r = 0;
        for tr in ds.iter() {
            for t in &tr.transitions {
                fill_row(&mut x, &mut y, r, t, self.obs_dim);
                r += 1;
            }
        }
        (x, y)
    }

    /// Fits input and target normalizers on a (training) dataset.
    pub fn fit_normalizers(&mut self, ds: &OfflineDataset) -> Result<()> {
        self.check_dataset(ds)?;
        let (x, y) = self.raw_rows(ds);
        self.input_norm = Normalizer::fit(x.view())?;
        self.target_norm = Normalizer::fit(y.view())?;
        Ok(())
    }

    fn check_dataset(&self, ds: &OfflineDataset) -> Result<()> {
        if ds.spec().obs_dim != self.obs_dim || ds.spec().act_dim != self.act_dim {
            return Err(Error::Dimension {
                what: "dataset observation width",
                expected: self.obs_dim,
                found: ds.spec().obs_dim,
            });
        }
        Ok(())
    }

    /// Per-trajectory normalized `(input, target)` matrices, in id order.
    pub fn tensors(&self, ds: &OfflineDataset) -> Result<Vec<TrajectoryTensors>> {
        self.check_dataset(ds)?;
        let mut out = Vec::with_capacity(ds.len());
        for tr in ds.iter() {
            let n = tr.len();
            let mut x = Array2::zeros((n, self.obs_dim + self.act_dim));
            let mut y = Array2::zeros((n, self.target_dim()));
            for (r, t) in tr.transitions.iter().enumerate() {
                fill_row(&mut x, &mut y, r, t, self.obs_dim);
            }
            self.input_norm.apply_rows(&mut x);
            self.target_norm.apply_rows(&mut y);
            out.push(TrajectoryTensors {
                id: tr.id,
                inputs: x,
                targets: y,
            });
        }
        Ok(out)
    }

    /// Mean (over members and transitions) Gaussian NLL in normalized target space.
    pub fn mean_nll(&self, data: &[TrajectoryTensors]) -> Result<f64> {
        let plain = MlpArch {
            weight_decay: 0.0,
            ..self.arch.clone()
        };
        let mut total = 0.0;
        let mut rows = 0usize;
        for t in data {
            let n = t.inputs.nrows();
            for m in &self.members {
                let (loss, _) = plain.gaussian_nll_backward(m, t.inputs.view(), t.targets.view(), Some(self.log_var_bounds))?;
                total += loss * n as f64;
            }
            rows += n;
        }
        if rows == 0 {
            return Err(Error::DegenerateDataset("no transitions to evaluate".into()));
        }
        Ok(total / (rows * self.n()) as f64)
    }

    fn check_input(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.obs_dim {
            return Err(Error::Dimension {
                what: "state",
                expected: self.obs_dim,
                found: s.len(),
            });
        }
        if a.len() != self.act_dim {
            return Err(Error::Dimension {
                what: "action",
                expected: self.act_dim,
                found: a.len(),
            });
        }
        if s.iter().chain(a).any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite state or action"));
        }
        Ok(())
    }

    /// Member predictions for a batch of `(s, a)` rows: for each member a
    /// `(mean, var)` pair of `rows × (obs_dim + 1)` matrices in physical units.
    pub fn predict_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        let n = states.nrows();
        if actions.nrows() != n || states.ncols() != self.obs_dim || actions.ncols() != self.act_dim {
            return Err(Error::Dimension {
                what: "batched state/action",
                expected: self.obs_dim + self.act_dim,
                found: states.ncols() + actions.ncols(),
            });
        }
        if states.iter().chain(actions.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite state or action"));
        }
        let mut x = ndarray::concatenate(Axis(1), &[states, actions]).expect("row counts checked");
        self.input_norm.apply_rows(&mut x);
        let d = self.target_dim();
        let b = self.log_var_bounds;
        Ok(self
            .members
            .iter()
            .map(|m| {
                let out = self.arch.forward_batch(m.as_slice(), x.view());
                let mut mean = Array2::zeros((n, d));
                let mut var = Array2::zeros((n, d));
                for r in 0..n {
                    for j in 0..d {
                        let sd = self.target_norm.std[j];
                        mean[[r, j]] = out[[r, j]] * sd + self.target_norm.mean[j];
                        var[[r, j]] = b.apply(out[[r, d + j]]).exp() * sd * sd;
                    }
                }
                (mean, var)
            })
            .collect())
    }

    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<Prediction>> {
        self.check_input(s, a)?;
        let sv = ArrayView2::from_shape((1, self.obs_dim), s).expect("checked");
        let av = ArrayView2::from_shape((1, self.act_dim), a).expect("checked");
        Ok(self
            .predict_batch(sv, av)?
            .into_iter()
            .map(|(m, v)| Prediction {
                mean: m.row(0).to_vec(),
                var: v.row(0).to_vec(),
            })
            .collect())
    }

    /// One simulated step: a uniformly chosen member, then a Gaussian draw of
    /// `(Δs, r)`. Returns `(s + Δs, r)` before any penalty.
    pub fn sample_transition<R: Rng + ?Sized>(&self, s: &[f64], a: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let preds = self.predict(s, a)?;
        let (next, r, _) = draw(&preds, s, rng);
        Ok((next, r))
    }

    pub fn u_ma(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(u_ma_of(&self.predict(s, a)?))
    }

    pub fn u_mpd(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(u_mpd_of(&self.predict(s, a)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            version: 1,
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            n: self.n(),
            arch: self.arch.clone(),
            log_var_bounds: self.log_var_bounds,
        };
        let mut out = container::encode_envelope(&MODEL_MAGIC, &header)?;
        for v in [&self.input_norm.mean, &self.input_norm.std, &self.target_norm.mean, &self.target_norm.std] {
            push_f64_block(&mut out, v);
        }
        for m in &self.members {
            push_f64_block(&mut out, m.as_slice());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        let h: ModelHeader = rd.envelope(&MODEL_MAGIC)?;
        let din = h.obs_dim + h.act_dim;
        let dout = h.obs_dim + 1;
        let im = rd.f64_block(Some(din))?;
        let is = rd.f64_block(Some(din))?;
        let tm = rd.f64_block(Some(dout))?;
        let ts = rd.f64_block(Some(dout))?;
        let layout = h.arch.layout();
        let mut members = Vec::with_capacity(h.n);
        for _ in 0..h.n {
            members.push(ParamVector::from_flat(layout.clone(), rd.f64_block(Some(layout.total_len()))?)?);
        }
        rd.finish()?;
        Self::from_parts(
            h.obs_dim,
            h.act_dim,
            h.arch,
            members,
            Normalizer { mean: im, std: is },
            Normalizer { mean: tm, std: ts },
            h.log_var_bounds,
        )
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        Self::from_bytes(&bytes)
    }
}

fn fill_row(x: &mut Array2<f64>, y: &mut Array2<f64>, r: usize, t: &crate::dataset::Transition, obs_dim: usize) {
    for (j, v) in t.s.iter().chain(&t.a).enumerate() {
        x[[r, j]] = *v as f64;
    }
    for j in 0..obs_dim {
        y[[r, j]] = t.s_next[j] as f64 - t.s[j] as f64;
    }
    y[[r, obs_dim]] = t.r as f64;
}

/// Returns `(s + Δs, r, member index)`.
fn draw<R: Rng + ?Sized>(preds: &[Prediction], s: &[f64], rng: &mut R) -> (Vec<f64>, f64, usize) {
    let i = rng.random_range(0..preds.len());
    let p = &preds[i];
    let d = p.mean.len();
    let sample: Vec<f64> = (0..d)
        .map(|j| {
            let e: f64 = rng.sample(StandardNormal);
            p.mean[j] + p.var[j].sqrt() * e
        })
        .collect();
    let next = s.iter().zip(&sample).map(|(a, b)| a + b).collect();
    (next, sample[d - 1], i)
}

/// `max_i ‖diag(var_i)‖_F`.
pub fn u_ma_of(preds: &[Prediction]) -> f64 {
    preds
        .iter()
        .map(|p| p.var.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// `max_{i,j} ‖mean_i − mean_j‖₂`.
pub fn u_mpd_of(preds: &[Prediction]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            let d = preds[i]
                .mean
                .iter()
                .zip(&preds[j].mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.max(d);
        }
    }
    best
}

/// Where simulated episodes start.
#[derive(Clone, Debug)]
pub enum InitialSource {
    /// The task's own initial-state distribution, independent of any dataset.
    Rho0(EnvSpec),
    /// States drawn from a dataset. Every draw is an audited read.
    DatasetStates(Arc<OfflineDataset>),
}

impl InitialSource {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            InitialSource::Rho0(spec) => env::sample_initial_observation(spec, rng),
            InitialSource::DatasetStates(ds) => {
                let k = rng.random_range(0..ds.len());
                let tr = ds.trajectory(k);
                let t = rng.random_range(0..tr.len());
                tr.transitions[t].s.iter().map(|v| *v as f64).collect()
            }
        }
    }
}

/// `M̃ = (S, A, P̂, r̂ − λu, γ, ρ0)` built on a trained ensemble.
#[derive(Clone, Debug)]
pub struct PessimisticMDP {
    pub ensemble: Arc<GaussianDynamicsEnsemble>,
    pub estimator: UncertaintyEstimator,
    pub lambda: f64,
    pub horizon: usize,
    pub initial_source: InitialSource,
}

impl PessimisticMDP {
    pub fn new(
        ensemble: Arc<GaussianDynamicsEnsemble>,
        estimator: UncertaintyEstimator,
        lambda: f64,
        horizon: usize,
        initial_source: InitialSource,
    ) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
        }
        if horizon == 0 {
            return Err(Error::Config("rollout horizon must be at least 1".into()));
        }
        Ok(Self {
            ensemble,
            estimator,
            lambda,
            horizon,
            initial_source,
        })
    }

    pub fn uncertainty(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        match self.estimator {
            UncertaintyEstimator::MaxAleatoric => self.ensemble.u_ma(s, a),
            UncertaintyEstimator::MaxPairwiseDiff => self.ensemble.u_mpd(s, a),
        }
    }

    fn uncertainty_of(&self, preds: &[Prediction]) -> f64 {
        match self.estimator {
            UncertaintyEstimator::MaxAleatoric => u_ma_of(preds),
            UncertaintyEstimator::MaxPairwiseDiff => u_mpd_of(preds),
        }
    }

    pub fn penalized_reward(&self, s: &[f64], a: &[f64], r_hat: f64) -> Result<f64> {
        if !r_hat.is_finite() {
            return Err(Error::domain("non-finite reward"));
        }
        Ok(r_hat - self.lambda * self.uncertainty(s, a)?)
    }

    /// One step in `M̃`: `(s', r̃)`.
    pub fn step<R: Rng + ?Sized>(&self, s: &[f64], a: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let preds = self.ensemble.predict(s, a)?;
        let u = self.uncertainty_of(&preds);
        let (next, r, _) = draw(&preds, s, rng);
        Ok((next, r - self.lambda * u))
    }

    /// Batched step. Each row gets its own member choice and noise, in row order.
    pub fn step_batch<R: Rng + ?Sized>(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        let per_member = self.ensemble.predict_batch(states, actions)?;
        let n = states.nrows();
        let d = self.ensemble.target_dim();
        let mut next = Array2::zeros((n, self.ensemble.obs_dim));
        let mut rewards = Vec::with_capacity(n);
        for r in 0..n {
            let preds: Vec<Prediction> = per_member
                .iter()
                .map(|(m, v)| Prediction {
                    mean: m.row(r).to_vec(),
                    var: v.row(r).to_vec(),
                })
                .collect();
            let s = states.row(r).to_vec();
            let (sn, rew, _) = draw(&preds, &s, rng);
            next.row_mut(r).assign(&ndarray::ArrayView1::from(&sn[..]));
            rewards.push(rew - self.lambda * self.uncertainty_of(&preds));
            debug_assert_eq!(preds[0].mean.len(), d);
        }
        if next.iter().any(|v| !v.is_finite()) || rewards.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("model rollout produced non-finite values".into()));
        }
        Ok((next, rewards))
    }
}

/// Convenience for tests and tools: an ensemble whose members are all the
/// same parameter vector.
pub fn replicated(arch: &MlpArch, obs_dim: usize, act_dim: usize, n: usize, seed: u64) -> Result<GaussianDynamicsEnsemble> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = arch.init_params(&mut rng);
    GaussianDynamicsEnsemble::from_parts(
        obs_dim,
        act_dim,
        arch.clone(),
        vec![p; n],
        Normalizer::identity(obs_dim + act_dim),
        Normalizer::identity(obs_dim + 1),
        LogVarBounds::default(),
    )
}
