//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::accountant;
use crate::config::RunConfig;
use crate::dataset::OfflineDataset;
use crate::env::EnvId;
use crate::error::{Error, Result};
use crate::model::{GaussianDynamicsEnsemble, UncertaintyEstimator};
use crate::pipeline::{self, FaultInjection, Manifest};
use crate::policy::{evaluate, write_epoch_metrics, SacPolicy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_AUDIT: i32 = 5;
pub const EXIT_IO: i32 = 6;

const TABLE_TARGETS: [f64; 8] = [0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];

#[derive(Debug, Parser)]
#[command(name = "primorl", version, about = "Trajectory-level private offline model-based RL")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect an offline dataset with the scripted behavior mixture.
    Collect {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of trajectories.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Split a dataset into private train and public test parts by episode.
    Split {
        #[command(flatten)]
        common: CommonArgs,
        /// Input dataset (default: <out>/dataset.pmrl).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the dynamics ensemble with trajectory-level DP.
    TrainModel {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        privacy: PrivacyArgs,
        /// Train split (default: <out>/train.pmrl).
        #[arg(long)]
        train: Option<PathBuf>,
        /// Test split (default: <out>/test.pmrl).
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Print ε for (z, q, T, δ), or the largest T meeting a target ε.
    Account {
        #[arg(long)]
        z: f64,
        #[arg(long)]
        q: f64,
        #[arg(long = "T", value_name = "T", required_unless_present_any = ["target_epsilon", "table"])]
        rounds: Option<u64>,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        /// Report max_iterations for this ε instead.
        #[arg(long)]
        target_epsilon: Option<f64>,
        /// Print a CSV of max_iterations over targets for q, q/10 and q/100.
        #[arg(long, conflicts_with_all = ["target_epsilon", "rounds"])]
        table: bool,
    },
    /// Optimize a policy on the pessimistic model.
    TrainPolicy {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Model checkpoint (default: <out>/model.ckpt).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset placed under the access audit for the duration of training.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum)]
        fault_inject: Option<FaultArg>,
    },
    /// Evaluate a policy checkpoint in the true task.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Policy checkpoint (default: <out>/policy.ckpt).
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Evaluation episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run every stage and assert the access audit.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        privacy: PrivacyArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum)]
        fault_inject: Option<FaultArg>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Task (used when no config file is given).
    #[arg(long, value_parser = parse_env)]
    pub env: Option<EnvId>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PrivacyArgs {
    #[arg(long)]
    pub z: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    /// Threads for per-round trajectory processing.
    #[arg(long, env = "PRIMORL_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    #[arg(long)]
    pub lambda: Option<f64>,
    /// ma or mpd.
    #[arg(long, value_parser = parse_estimator)]
    pub estimator: Option<UncertaintyEstimator>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    /// Start rollouts from dataset states.
    DatasetStates,
}

impl From<Option<FaultArg>> for FaultInjection {
    fn from(v: Option<FaultArg>) -> Self {
        match v {
            Some(FaultArg::DatasetStates) => FaultInjection::DatasetInitialStates,
            None => FaultInjection::None,
        }
    }
}

fn parse_env(s: &str) -> std::result::Result<EnvId, String> {
    EnvId::from_name(s).ok_or_else(|| format!("unknown env {s:?} (Pendulum, CartPoleBalance, CartPoleSwingUp)"))
}

fn parse_estimator(s: &str) -> std::result::Result<UncertaintyEstimator, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl CommonArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, self.env) {
            (Some(p), env) => {
                let c = RunConfig::load(p)?;
                if let Some(e) = env {
                    if e != c.env {
                        return Err(Error::Config(format!("--env {e} contradicts key `env` = {} in the config file", c.env)));
                    }
                }
                c
            }
            (None, env) => RunConfig::for_env(env.unwrap_or(EnvId::Pendulum)),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

impl PrivacyArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let p = &mut cfg.privacy;
        if let Some(v) = self.z {
            p.z = v;
        }
        if let Some(v) = self.q {
            p.q = v;
        }
        if let Some(v) = self.clip {
            p.clip = v;
        }
        if let Some(v) = self.delta {
            p.delta = v;
        }
        if let Some(v) = self.max_rounds {
            p.max_rounds = v;
        }
        if let Some(v) = self.workers {
            p.workers = v;
        }
    }
}

impl PolicyArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.estimator {
            cfg.estimator = v;
        }
        if let Some(v) = self.epochs {
            cfg.sac.epochs = v;
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Format(_) | Error::Json(_) => EXIT_FORMAT,
        Error::Numeric(_) | Error::Domain(_) | Error::Dimension { .. } | Error::Layout(_) | Error::DegenerateDataset(_) => {
            EXIT_NUMERIC
        }
        Error::Audit(_) => EXIT_AUDIT,
        Error::Io(_) => EXIT_IO,
    }
}

fn input(path: &Option<PathBuf>, cfg: &RunConfig, default: &str, flag: &str) -> Result<PathBuf> {
    let p = path.clone().unwrap_or_else(|| cfg.out_dir.join(default));
    if !p.exists() {
        return Err(Error::Config(format!("--{flag}: file {} does not exist", p.display())));
    }
    Ok(p)
}

fn prepare(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    pipeline::ensure_out(cfg)
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Collect { common, episodes } => {
            let mut cfg = common.config()?;
            if let Some(k) = episodes {
                cfg.episodes = k;
            }
            prepare(&cfg)?;
            let ds = pipeline::stage_collect(&cfg)?;
            ds.write(cfg.out_dir.join(pipeline::DATASET_FILE))?;
            Manifest::record(&cfg, &[pipeline::DATASET_FILE])?;
            writeln!(out, "collected {} trajectories into {}", ds.len(), cfg.out_dir.join(pipeline::DATASET_FILE).display())?;
        }
        Command::Split { common, dataset } => {
            let cfg = common.config()?;
            let src = input(&dataset, &cfg, pipeline::DATASET_FILE, "dataset")?;
            prepare(&cfg)?;
            let ds = OfflineDataset::read(&src)?;
            let split = pipeline::stage_split(&cfg, &ds)?;
            split.train.write(cfg.out_dir.join(pipeline::TRAIN_FILE))?;
            split.test.write(cfg.out_dir.join(pipeline::TEST_FILE))?;
            Manifest::record(&cfg, &[pipeline::TRAIN_FILE, pipeline::TEST_FILE])?;
            writeln!(out, "train {} / test {} trajectories", split.train.len(), split.test.len())?;
        }
        Command::TrainModel {
            common,
            privacy,
            train,
            test,
        } => {
            let mut cfg = common.config()?;
            privacy.apply(&mut cfg);
            let train = input(&train, &cfg, pipeline::TRAIN_FILE, "train")?;
            let test = input(&test, &cfg, pipeline::TEST_FILE, "test")?;
            prepare(&cfg)?;
            let train = OfflineDataset::read(train)?;
            let test = OfflineDataset::read(test)?;
            let (trained, rec) = pipeline::stage_train_model(&cfg, &train, &test)?;
            trained.ensemble.write(cfg.out_dir.join(pipeline::MODEL_FILE))?;
            crate::dp::write_round_logs(cfg.out_dir.join(pipeline::ROUNDS_FILE), &trained.logs)?;
            rec.write(cfg.out_dir.join(pipeline::LEDGER_FILE))?;
            Manifest::record(&cfg, &[pipeline::MODEL_FILE, pipeline::ROUNDS_FILE, pipeline::LEDGER_FILE])?;
            writeln!(
                out,
                "rounds = {}\nbest_test_nll = {}\nepsilon = {}",
                rec.rounds, trained.best_test_nll, rec.epsilon
            )?;
        }
        Command::Account {
            z,
            q,
            rounds,
            delta,
            target_epsilon,
            table,
        } => match target_epsilon {
            _ if table => {
                writeln!(out, "q,z,delta,epsilon_target,max_iterations")?;
                for qq in [q, q / 10.0, q / 100.0] {
                    for target in TABLE_TARGETS {
                        let t = accountant::max_iterations(target, qq, z, delta)?;
                        writeln!(out, "{qq},{z},{delta},{target},{t}")?;
                    }
                }
            }
            Some(target) => {
                let t = accountant::max_iterations(target, q, z, delta)?;
                writeln!(out, "max_iterations = {t}")?;
            }
            None => {
                let eps = accountant::epsilon(z, q, rounds.unwrap_or(0), delta)?;
                writeln!(out, "epsilon = {eps}")?;
            }
        },
        Command::TrainPolicy {
            common,
            policy,
            model,
            dataset,
            fault_inject,
        } => {
            let mut cfg = common.config()?;
            policy.apply(&mut cfg);
            let model = input(&model, &cfg, pipeline::MODEL_FILE, "model")?;
            let dataset = match &dataset {
                Some(_) => Some(input(&dataset, &cfg, "", "dataset")?),
                None => None,
            };
            prepare(&cfg)?;
            let ens = GaussianDynamicsEnsemble::read(model)?;
            let audited: Vec<Arc<OfflineDataset>> = match dataset {
                Some(p) => vec![Arc::new(OfflineDataset::read(p)?)],
                None => Vec::new(),
            };
            let sac = pipeline::stage_train_policy(&cfg, ens, &audited, fault_inject.into())?;
            sac.policy.write(cfg.out_dir.join(pipeline::POLICY_FILE))?;
            write_epoch_metrics(cfg.out_dir.join(pipeline::EPOCHS_FILE), &sac.metrics)?;
            Manifest::record(&cfg, &[pipeline::POLICY_FILE, pipeline::EPOCHS_FILE])?;
            if let Some(m) = sac.metrics.last() {
                writeln!(out, "final normalized return = {}", m.normalized_return)?;
            }
            writeln!(out, "policy-phase dataset reads = 0")?;
        }
        Command::Evaluate { common, policy, episodes } => {
            let cfg = common.config()?;
            let path = input(&policy, &cfg, pipeline::POLICY_FILE, "policy")?;
            let pol = SacPolicy::read(path)?;
            let ev = evaluate(&cfg.spec(), &pol, episodes.unwrap_or(cfg.sac.eval_episodes), cfg.sac.eval_seed)?;
            writeln!(
                out,
                "mean_return = {}\nstd_return = {}\nnormalized_return = {}",
                ev.mean_return, ev.std_return, ev.normalized_return
            )?;
        }
        Command::Pipeline {
            common,
            privacy,
            policy,
            episodes,
            fault_inject,
        } => {
            let mut cfg = common.config()?;
            privacy.apply(&mut cfg);
            policy.apply(&mut cfg);
            if let Some(k) = episodes {
                cfg.episodes = k;
            }
            let rep = pipeline::run_pipeline(&cfg, fault_inject.into())?;
            writeln!(
                out,
                "rounds = {}\nepsilon = {}\nbest_test_nll = {}\nfinal_normalized_return = {}\npolicy_phase_reads = {}",
                rep.ledger.rounds, rep.ledger.epsilon, rep.best_test_nll, rep.final_normalized_return, rep.policy_phase_reads
            )?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command, returning the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
