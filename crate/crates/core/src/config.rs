//! Run configuration: one JSON document, task-specific defaults, flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::digest_hex;
use crate::dp::{ClippingStrategy, PrivacyConfig};
use crate::env::{EnvId, EnvSpec};
use crate::error::{Error, Result};
use crate::model::UncertaintyEstimator;
use crate::nn::MlpArch;
use crate::policy::SacConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub ensemble_size: usize,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvId,
    /// Number of trajectories to collect (K before the split).
    pub episodes: usize,
    pub test_fraction: f64,
    /// Existing PMRL1 dataset to use instead of collecting one.
    pub dataset: Option<PathBuf>,
    pub model: ModelConfig,
    pub privacy: PrivacyConfig,
    pub sac: SacConfig,
    pub estimator: UncertaintyEstimator,
    pub lambda: f64,
    pub rollout_length: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Defaults for a task (network sizes, N, clipping, H and λ per task).
    pub fn for_env(env: EnvId) -> Self {
        let (hidden, n, clipping, h) = match env {
            EnvId::Pendulum => (vec![64, 64], 3, ClippingStrategy::PerLayer, 30),
            EnvId::CartPoleBalance | EnvId::CartPoleSwingUp => (vec![128, 128], 5, ClippingStrategy::Flat, 20),
        };
        Self {
            env,
            episodes: 2000,
            test_fraction: 0.01,
            dataset: None,
            model: ModelConfig {
                hidden,
                ensemble_size: n,
                weight_decay: 1e-5,
            },
            privacy: PrivacyConfig {
                clipping,
                ..PrivacyConfig::default()
            },
            sac: SacConfig::default(),
            estimator: UncertaintyEstimator::MaxAleatoric,
            lambda: 2.0,
            rollout_length: h,
            seed: 0,
            out_dir: PathBuf::from("runs").join(env.name()),
        }
    }

    /// Parses a JSON document on top of the defaults of the task it names.
    /// Unknown keys are rejected with their path.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let obj = user
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let env = match obj.get("env") {
            Some(v) => serde_json::from_value::<EnvId>(v.clone()).map_err(|e| Error::Config(format!("key `env`: {e}")))?,
            None => EnvId::Pendulum,
        };
        let mut base = serde_json::to_value(Self::for_env(env))?;
        merge(&mut base, &user, "")?;
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.privacy.validate()?;
        self.sac.validate()?;
        if self.episodes == 0 {
            return Err(Error::Config("key `episodes` must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("key `test_fraction` must lie in (0, 1)".into()));
        }
        if self.model.ensemble_size == 0 {
            return Err(Error::Config("key `model.ensemble_size` must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("key `lambda` must be non-negative".into()));
        }
        if self.rollout_length == 0 {
            return Err(Error::Config("key `rollout_length` must be at least 1".into()));
        }
        if let Some(p) = &self.dataset {
            if !p.exists() {
                return Err(Error::Config(format!("key `dataset`: file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec::new(self.env)
    }

    pub fn model_arch(&self) -> MlpArch {
        let s = self.spec();
        crate::model::GaussianDynamicsEnsemble::arch_for(s.obs_dim, s.act_dim, self.model.hidden.clone())
            .with_weight_decay(self.model.weight_decay)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Short digest of the canonical JSON form, seed excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("seed");
            m.remove("out_dir");
        }
        digest_hex(v.to_string().as_bytes())
    }

    /// Stage seeds derived from the run seed.
    pub fn stage_seeds(&self) -> StageSeeds {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        StageSeeds {
            data: r.random(),
            split: r.random(),
            model: r.random(),
            policy: r.random(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSeeds {
    pub data: u64,
    pub split: u64,
    pub model: u64,
    pub policy: u64,
}

fn merge(base: &mut Value, user: &Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }
            Ok(())
        }
        (b, u) => {
            *b = u.clone();
            Ok(())
        }
    }
}
