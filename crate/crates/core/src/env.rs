//! Native continuous-control tasks used both to collect offline data and to
//! evaluate policies in the true dynamics.
//!
//! * `Pendulum`: torque-limited inverted pendulum (g = 10, m = 1, l = 1,
//!   dt = 0.05 s, torque in [-2, 2], angular velocity clamped to ±8),
//!   reward `-(θ² + 0.1 θ̇² + 0.001 a²)` with θ wrapped to [-π, π),
//!   observation `(cos θ, sin θ, θ̇)`, 200 steps.
//! * `CartPoleBalance` / `CartPoleSwingUp`: planar cart-pole integrated with
//!   semi-implicit Euler substeps over a 0.025 s control step, smooth reward in
//!   [0, 1], observation `(x, cos θ, sin θ, ẋ, θ̇)`, 1000 steps.
//!
//! Angles are measured from the upright position in every task.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvId {
    Pendulum,
    CartPoleBalance,
    CartPoleSwingUp,
}

impl EnvId {
    pub fn name(self) -> &'static str {
        match self {
            EnvId::Pendulum => "Pendulum",
            EnvId::CartPoleBalance => "CartPoleBalance",
            EnvId::CartPoleSwingUp => "CartPoleSwingUp",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "Pendulum" => Some(EnvId::Pendulum),
            "CartPoleBalance" => Some(EnvId::CartPoleBalance),
            "CartPoleSwingUp" => Some(EnvId::CartPoleSwingUp),
            _ => None,
        }
    }
}

impl std::fmt::Display for EnvId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvId::from_name(s).ok_or_else(|| Error::Config(format!("unknown environment id {s:?}")))
    }
}

// Pendulum constants.
const PEND_G: f64 = 10.0;
const PEND_M: f64 = 1.0;
const PEND_L: f64 = 1.0;
const PEND_DT: f64 = 0.05;
const PEND_MAX_SPEED: f64 = 8.0;
const PEND_MAX_TORQUE: f64 = 2.0;

// Cart-pole constants.
const CP_GRAVITY: f64 = 9.81;
const CP_CART_MASS: f64 = 1.0;
const CP_POLE_MASS: f64 = 0.1;
const CP_HALF_LENGTH: f64 = 0.5;
const CP_FORCE_GAIN: f64 = 10.0;
const CP_CONTROL_DT: f64 = 0.025;
const CP_SUBSTEPS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: EnvId,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub episode_length: usize,
    pub reward_range: (f64, f64),
}

impl EnvSpec {
    pub fn new(id: EnvId) -> Self {
        match id {
            EnvId::Pendulum => EnvSpec {
                id,
                obs_dim: 3,
                act_dim: 1,
                action_low: vec![-PEND_MAX_TORQUE],
                action_high: vec![PEND_MAX_TORQUE],
                episode_length: 200,
                reward_range: (
                    -(PI * PI
                        + 0.1 * PEND_MAX_SPEED * PEND_MAX_SPEED
                        + 0.001 * PEND_MAX_TORQUE * PEND_MAX_TORQUE),
                    0.0,
                ),
            },
            EnvId::CartPoleBalance | EnvId::CartPoleSwingUp => EnvSpec {
                id,
                obs_dim: 5,
                act_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                episode_length: 1000,
                reward_range: (0.0, 1.0),
            },
        }
    }

    pub fn pendulum() -> Self {
        Self::new(EnvId::Pendulum)
    }

    pub fn clamp_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }
}

/// Internal physical coordinates plus the elapsed step count.
///
/// Pendulum: `[θ, θ̇]`. Cart-pole: `[x, θ, ẋ, θ̇]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub physical: Vec<f64>,
    pub step_count: usize,
}

/// Draws an initial state from the task's initial distribution.
pub fn reset(spec: &EnvSpec, seed: u64) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    reset_with(spec, &mut rng)
}

pub fn reset_with<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> EnvState {
    let physical = match spec.id {
        EnvId::Pendulum => vec![rng.random_range(-PI..=PI), rng.random_range(-1.0..=1.0)],
        EnvId::CartPoleBalance => vec![
            rng.random_range(-0.1..=0.1),
            rng.random_range(-0.034..=0.034),
            0.01 * rng.sample::<f64, _>(StandardNormal),
            0.01 * rng.sample::<f64, _>(StandardNormal),
        ],
        EnvId::CartPoleSwingUp => vec![
            0.01 * rng.sample::<f64, _>(StandardNormal),
            PI + 0.01 * rng.sample::<f64, _>(StandardNormal),
            0.01 * rng.sample::<f64, _>(StandardNormal),
            0.01 * rng.sample::<f64, _>(StandardNormal),
        ],
    };
    EnvState {
        physical,
        step_count: 0,
    }
}

/// One observation drawn from the public initial-state distribution.
pub fn sample_initial_observation<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Vec<f64> {
    observe(spec, &reset_with(spec, rng))
}

/// Wraps an angle into [-π, π).
pub fn angle_normalize(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

pub fn step(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
    if action.len() != spec.act_dim {
        return Err(Error::Dimension {
            what: "action",
            expected: spec.act_dim,
            found: action.len(),
        });
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::domain("non-finite action"));
    }
    if state.step_count >= spec.episode_length {
        return Err(Error::domain("episode already finished"));
    }
    let a = spec.clamp_action(action);
    let (physical, reward) = match spec.id {
        EnvId::Pendulum => pendulum_step(&state.physical, a[0]),
        EnvId::CartPoleBalance | EnvId::CartPoleSwingUp => cartpole_step(&state.physical, a[0]),
    };
    let step_count = state.step_count + 1;
    Ok(StepOutcome {
        state: EnvState {
            physical,
            step_count,
        },
        reward,
        done: step_count == spec.episode_length,
    })
}

fn pendulum_step(x: &[f64], torque: f64) -> (Vec<f64>, f64) {
    let (th, thdot) = (x[0], x[1]);
    let th_n = angle_normalize(th);
    let cost = th_n * th_n + 0.1 * thdot * thdot + 0.001 * torque * torque;
    let accel = 3.0 * PEND_G / (2.0 * PEND_L) * th.sin() + 3.0 / (PEND_M * PEND_L * PEND_L) * torque;
    let new_thdot = (thdot + accel * PEND_DT).clamp(-PEND_MAX_SPEED, PEND_MAX_SPEED);
    let new_th = th + new_thdot * PEND_DT;
    (vec![new_th, new_thdot], -cost)
}

fn cartpole_step(x: &[f64], action: f64) -> (Vec<f64>, f64) {
    let reward = cartpole_reward(x, action);
    let (mut pos, mut th, mut vel, mut thdot) = (x[0], x[1], x[2], x[3]);
    let force = CP_FORCE_GAIN * action;
    let total = CP_CART_MASS + CP_POLE_MASS;
    let h = CP_CONTROL_DT / CP_SUBSTEPS as f64;
    for _ in 0..CP_SUBSTEPS {
        let (s, c) = th.sin_cos();
        let temp = (force + CP_POLE_MASS * CP_HALF_LENGTH * thdot * thdot * s) / total;
        let th_acc = (CP_GRAVITY * s - c * temp)
            / (CP_HALF_LENGTH * (4.0 / 3.0 - CP_POLE_MASS * c * c / total));
        let x_acc = temp - CP_POLE_MASS * CP_HALF_LENGTH * th_acc * c / total;
        vel += h * x_acc;
        thdot += h * th_acc;
        pos += h * vel;
        th += h * thdot;
    }
    (vec![pos, th, vel, thdot], reward)
}

/// Gaussian-shaped tolerance: 1 at 0, 0.1 at |x| = margin.
fn gaussian_tolerance(x: f64, margin: f64) -> f64 {
    let scale = (-2.0 * 0.1f64.ln()).sqrt();
    let d = x / margin * scale;
    (-0.5 * d * d).exp()
}

fn cartpole_reward(x: &[f64], action: f64) -> f64 {
    let upright = (x[1].cos() + 1.0) / 2.0;
    let centered = (1.0 + gaussian_tolerance(x[0], 2.0)) / 2.0;
    let small_control = (4.0 + (1.0 - action * action).max(0.0)) / 5.0;
    let small_velocity = (1.0 + gaussian_tolerance(x[3], 5.0)) / 2.0;
    upright * centered * small_control * small_velocity
}

pub fn observe(spec: &EnvSpec, state: &EnvState) -> Vec<f64> {
    let p = &state.physical;
    match spec.id {
        EnvId::Pendulum => vec![p[0].cos(), p[0].sin(), p[1]],
        EnvId::CartPoleBalance | EnvId::CartPoleSwingUp => {
            vec![p[0], p[1].cos(), p[1].sin(), p[2], p[3]]
        }
    }
}

/// Maps a raw Pendulum return onto [0, 1000]; identity for the other tasks.
pub fn normalize_return(spec: &EnvSpec, raw_return: f64) -> f64 {
    match spec.id {
        EnvId::Pendulum => (1000.0 * (raw_return + 1500.0) / 1500.0).clamp(0.0, 1000.0),
        _ => raw_return,
    }
}
