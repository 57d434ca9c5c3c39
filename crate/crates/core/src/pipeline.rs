//! Stage functions shared by the CLI subcommands, and the chained pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accountant;
use crate::config::RunConfig;
use crate::container::digest_hex;
use crate::dataset::{collect, BehaviorPolicy, EpisodeSplit, OfflineDataset};
use crate::dp::{tdp_train, write_round_logs, TdpOutcome};
use crate::error::{Error, Result};
use crate::model::{GaussianDynamicsEnsemble, InitialSource, PessimisticMDP};
use crate::policy::{sac_train, write_epoch_metrics, SacOutcome};

pub const DATASET_FILE: &str = "dataset.pmrl";
pub const TRAIN_FILE: &str = "train.pmrl";
pub const TEST_FILE: &str = "test.pmrl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const LEDGER_FILE: &str = "ledger.json";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

/// Deliberate violation used to check that the audit catches dataset reads
/// during policy optimization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FaultInjection {
    #[default]
    None,
    /// Start model rollouts from dataset states instead of the task's initial distribution.
    DatasetInitialStates,
}

/// Contents of the ledger file written next to a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerRecord {
    pub q: f64,
    pub z: f64,
    pub clip: f64,
    pub delta: f64,
    pub rounds: u64,
    /// Written as the string "inf" when no noise was added.
    #[serde(with = "inf_as_string")]
    pub epsilon: f64,
    pub config_hash: String,
    pub seed: u64,
}

impl LedgerRecord {
    pub fn recompute_epsilon(&self) -> Result<f64> {
        accountant::epsilon(self.z, self.q, self.rounds, self.delta)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

/// Artifact digests tagged with the configuration hash and seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    fn path(out: &Path) -> PathBuf {
        out.join(MANIFEST_FILE)
    }

    /// Loads the manifest of `out` if it belongs to the same config and seed.
    fn load_or_new(cfg: &RunConfig) -> Self {
        let fresh = Manifest {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            artifacts: BTreeMap::new(),
        };
        match std::fs::read_to_string(Self::path(&cfg.out_dir)).ok().and_then(|t| serde_json::from_str::<Manifest>(&t).ok()) {
            Some(m) if m.config_hash == fresh.config_hash && m.seed == fresh.seed => m,
            _ => fresh,
        }
    }

    /// Records the digests of the named files in `cfg.out_dir`.
    pub fn record(cfg: &RunConfig, files: &[&str]) -> Result<()> {
        let mut m = Self::load_or_new(cfg);
        for f in files {
            let bytes = std::fs::read(cfg.out_dir.join(f))?;
            m.artifacts.insert((*f).to_string(), digest_hex(&bytes));
        }
        std::fs::write(Self::path(&cfg.out_dir), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Creates the output directory and writes the effective config next to the artifacts.
pub(crate) fn ensure_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_json()? + "\n")?;
    Ok(())
}

/// Loads `cfg.dataset` or collects a fresh scripted-mixture dataset.
pub fn stage_collect(cfg: &RunConfig) -> Result<OfflineDataset> {
    match &cfg.dataset {
        Some(p) => {
            let ds = OfflineDataset::read(p)?;
            if ds.spec().id != cfg.env {
                return Err(Error::Config(format!(
                    "key `dataset`: file holds {} trajectories but `env` is {}",
                    ds.spec().id.name(),
                    cfg.env.name()
                )));
            }
            Ok(ds)
        }
        None => collect(&cfg.spec(), &BehaviorPolicy::scripted_mixture(), cfg.episodes, cfg.stage_seeds().data),
    }
}

pub fn stage_split(cfg: &RunConfig, ds: &OfflineDataset) -> Result<EpisodeSplit> {
    ds.split_by_episode(cfg.test_fraction, cfg.stage_seeds().split)
}

pub fn stage_train_model(cfg: &RunConfig, train: &OfflineDataset, test: &OfflineDataset) -> Result<(TdpOutcome, LedgerRecord)> {
    let mut rng = rng_for(cfg.stage_seeds().model);
    let out = tdp_train(train, test, &cfg.model_arch(), cfg.model.ensemble_size, &cfg.privacy, &mut rng)?;
    let rec = LedgerRecord {
        q: cfg.privacy.q,
        z: cfg.privacy.z,
        clip: cfg.privacy.clip,
        delta: cfg.privacy.delta,
        rounds: out.ledger.rounds_elapsed,
        epsilon: out.ledger.epsilon,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    Ok((out, rec))
}

/// Policy optimization on the pessimistic model. `audited` are the datasets
/// that must not be read meanwhile; the check fails with [`Error::Audit`].
pub fn stage_train_policy(
    cfg: &RunConfig,
    model: GaussianDynamicsEnsemble,
    audited: &[Arc<OfflineDataset>],
    fault: FaultInjection,
) -> Result<SacOutcome> {
    let spec = cfg.spec();
    let guards: Vec<_> = audited.iter().map(|d| d.audit().enter_policy_phase()).collect();
    let source = match (fault, audited.first()) {
        (FaultInjection::DatasetInitialStates, Some(d)) => InitialSource::DatasetStates(Arc::clone(d)),
        (FaultInjection::DatasetInitialStates, None) => {
            return Err(Error::Config("fault injection needs a dataset to read from".into()));
        }
        (FaultInjection::None, _) => InitialSource::Rho0(spec.clone()),
    };
    let pmdp = PessimisticMDP::new(Arc::new(model), cfg.estimator, cfg.lambda, cfg.rollout_length, source)?;
    let mut rng = rng_for(cfg.stage_seeds().policy);
    let outcome = sac_train(&pmdp, &spec, &cfg.sac, &mut rng);
    for g in guards {
        g.finish()?;
    }
    outcome
}

#[derive(Debug)]
pub struct PipelineReport {
    pub ledger: LedgerRecord,
    pub best_test_nll: f64,
    pub final_normalized_return: f64,
    pub best_normalized_return: f64,
    pub policy_phase_reads: u64,
    pub cut_rollouts: usize,
}

/// collect → split → private model training → accounting → policy optimization,
/// writing every artifact to `cfg.out_dir`.
pub fn run_pipeline(cfg: &RunConfig, fault: FaultInjection) -> Result<PipelineReport> {
    cfg.validate()?;
    ensure_out(cfg)?;
    let out = &cfg.out_dir;
    let ds = stage_collect(cfg)?;
    ds.write(out.join(DATASET_FILE))?;
    let split = stage_split(cfg, &ds)?;
    drop(ds);
    split.train.write(out.join(TRAIN_FILE))?;
    split.test.write(out.join(TEST_FILE))?;
    Manifest::record(cfg, &[DATASET_FILE, TRAIN_FILE, TEST_FILE])?;

    let (trained, rec) = stage_train_model(cfg, &split.train, &split.test)?;
    let recomputed = rec.recompute_epsilon()?;
    if recomputed.to_bits() != rec.epsilon.to_bits() {
        return Err(Error::Numeric(format!(
            "ledger epsilon {} disagrees with recomputed {}",
            rec.epsilon, recomputed
        )));
    }
    trained.ensemble.write(out.join(MODEL_FILE))?;
    write_round_logs(out.join(ROUNDS_FILE), &trained.logs)?;
    rec.write(out.join(LEDGER_FILE))?;
    Manifest::record(cfg, &[MODEL_FILE, ROUNDS_FILE, LEDGER_FILE])?;

    let train = Arc::new(split.train);
    let test = Arc::new(split.test);
    let before = train.audit().read_counter();
    let sac = stage_train_policy(cfg, trained.ensemble, &[Arc::clone(&train), Arc::clone(&test)], fault)?;
    let policy_phase_reads = train.audit().read_counter() - before;
    sac.policy.write(out.join(POLICY_FILE))?;
    write_epoch_metrics(out.join(EPOCHS_FILE), &sac.metrics)?;
    Manifest::record(cfg, &[POLICY_FILE, EPOCHS_FILE])?;

    let final_nr = sac.metrics.last().map(|m| m.normalized_return).unwrap_or(f64::NAN);
    let best_nr = sac.metrics.iter().map(|m| m.normalized_return).fold(f64::NEG_INFINITY, f64::max);
    Ok(PipelineReport {
        ledger: rec,
        best_test_nll: trained.best_test_nll,
        final_normalized_return: final_nr,
        best_normalized_return: best_nr,
        policy_phase_reads,
        cut_rollouts: sac.cut_rollouts,
    })
}
