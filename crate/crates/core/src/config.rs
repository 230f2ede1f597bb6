//! Run configuration: one JSON document describing a full training run.
//! Unknown keys are rejected so typos fail loudly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ispl::IsplConfig;
use crate::meta::{Algorithm, BetaSchedule, EvalSettings, MetaConfig, SignOrder};
use crate::nn::{Activation, NetworkSpec, OptimizerKind, OptimizerState, OutputHead};
use crate::tasks::{self, EpisodeDir, NoiseKind, NoiseSpec, TaskSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    Sine,
    SyntheticCls,
    EpisodeDir,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerOptimizer {
    #[serde(default = "defaults::opt_kind")]
    pub kind: OptimizerKind,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// Adam first-moment coefficient; the inner loop defaults to 0.
    #[serde(default)]
    pub beta1: f64,
}

impl Default for InnerOptimizer {
    fn default() -> Self {
        InnerOptimizer { kind: OptimizerKind::Sgd, learning_rate: 0.02, beta1: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "defaults::noise_kind")]
    pub kind: NoiseKind,
    #[serde(default)]
    pub p: f64,
    #[serde(default)]
    pub pairing_seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { kind: NoiseKind::None, p: 0.0, pairing_seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsplSettings {
    pub enabled: bool,
    #[serde(default = "defaults::prior_count")]
    pub prior_count: usize,
    #[serde(default = "defaults::gamma0")]
    pub gamma0: f64,
    #[serde(default = "defaults::mu")]
    pub mu: f64,
    #[serde(default = "defaults::period")]
    pub period: usize,
    #[serde(default = "defaults::prior_fraction")]
    pub prior_fraction: f64,
    /// Defaults to the main inner-step count.
    #[serde(default)]
    pub prior_steps: Option<usize>,
    #[serde(default)]
    pub per_step_decay: bool,
}

impl Default for IsplSettings {
    fn default() -> Self {
        IsplSettings {
            enabled: false,
            prior_count: defaults::prior_count(),
            gamma0: defaults::gamma0(),
            mu: defaults::mu(),
            period: defaults::period(),
            prior_fraction: defaults::prior_fraction(),
            prior_steps: None,
            per_step_decay: false,
        }
    }
}

mod defaults {
    use super::*;

    pub fn opt_kind() -> OptimizerKind {
        OptimizerKind::Sgd
    }
    pub fn learning_rate() -> f64 {
        0.02
    }
    pub fn noise_kind() -> NoiseKind {
        NoiseKind::None
    }
    pub fn prior_count() -> usize {
        2
    }
    pub fn gamma0() -> f64 {
        10.0
    }
    pub fn mu() -> f64 {
        0.6
    }
    pub fn period() -> usize {
        1000
    }
    pub fn prior_fraction() -> f64 {
        0.5
    }
    pub fn n_way() -> usize {
        5
    }
    pub fn k_test() -> usize {
        15
    }
    pub fn input_dim() -> usize {
        16
    }
    pub fn hidden() -> Vec<usize> {
        vec![64, 64]
    }
    pub fn activation() -> Activation {
        Activation::Tanh
    }
    pub fn eval_interval() -> usize {
        500
    }
    pub fn eval_task_count() -> usize {
        100
    }
    pub fn eval_adapt_steps() -> usize {
        32
    }
    pub fn eval_shot() -> usize {
        1
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("runs/out")
    }
}

/// Everything one `train` invocation needs, straight from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskFamily,
    pub algorithm: Algorithm,
    pub beta: f64,
    pub meta_batch: usize,
    pub inner_steps: usize,
    pub outer_iterations: usize,
    #[serde(default)]
    pub beta_schedule: BetaSchedule,
    #[serde(default)]
    pub sign_order: SignOrder,
    /// Samples per inner gradient step; omitted means full batch.
    #[serde(default)]
    pub inner_batch_size: Option<usize>,

    /// Classes per episode (classification families).
    #[serde(default = "defaults::n_way")]
    pub n_way: usize,
    /// Shots per class during meta-training (sine: points per task).
    /// Defaults to K = 10 for sine and to the train-shot rule
    /// ceil(inner_steps * meta_batch / n_way) + 1 for classification.
    #[serde(default)]
    pub k_train: Option<usize>,
    /// Query samples per class in evaluation episodes.
    #[serde(default = "defaults::k_test")]
    pub k_test: usize,
    /// Shots per class when adapting on evaluation episodes.
    #[serde(default = "defaults::eval_shot")]
    pub eval_shot: usize,
    #[serde(default = "defaults::input_dim")]
    pub input_dim: usize,
    #[serde(default)]
    pub episode_dir: Option<PathBuf>,

    #[serde(default = "defaults::hidden")]
    pub hidden_sizes: Vec<usize>,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
    #[serde(default)]
    pub optimizer: InnerOptimizer,

    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub ispl: IsplSettings,

    pub seed: u64,
    #[serde(default = "defaults::eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "defaults::eval_task_count")]
    pub eval_task_count: usize,
    #[serde(default = "defaults::eval_adapt_steps")]
    pub eval_adapt_steps: usize,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
}

/// A validated run with every component constructed.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub config: RunConfig,
    pub meta: MetaConfig,
    pub net: NetworkSpec,
    pub opt: OptimizerState,
    pub source: TaskSource,
    pub ispl: Option<IsplConfig>,
    pub eval: EvalSettings,
    pub inner_batch: Option<usize>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn resolve(&self, seed_override: Option<u64>, output_override: Option<PathBuf>) -> Result<ResolvedRun> {
        let mut config = self.clone();
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        if let Some(out) = output_override {
            config.output_dir = out;
        }
        let seed = config.seed;

        let meta = MetaConfig {
            algorithm: config.algorithm,
            beta: config.beta,
            meta_batch: config.meta_batch,
            inner_steps: config.inner_steps,
            outer_iterations: config.outer_iterations,
            beta_schedule: config.beta_schedule,
            sign_order: config.sign_order,
        };
        meta.validate()?;

        if config.optimizer.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.optimizer.beta1) {
            return Err(Error::Config("adam beta1 must be in [0, 1)".into()));
        }
        let opt = match config.optimizer.kind {
            OptimizerKind::Sgd => OptimizerState::sgd(config.optimizer.learning_rate),
            OptimizerKind::Adam => OptimizerState::adam(config.optimizer.learning_rate, config.optimizer.beta1),
        };

        let noise = NoiseSpec { kind: config.noise.kind, p: config.noise.p, pairing_seed: config.noise.pairing_seed };
        noise.validate()?;
        if config.task == TaskFamily::Sine && noise.kind != NoiseKind::None {
            return Err(Error::Config("label noise requires a classification task family".into()));
        }

        if config.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if config.eval_task_count == 0 {
            return Err(Error::Config("eval_task_count must be >= 1".into()));
        }
        if config.inner_batch_size == Some(0) {
            return Err(Error::Config("inner_batch_size must be >= 1".into()));
        }

        let (net, source) = match config.task {
            TaskFamily::Sine => {
                let mut sizes = vec![1usize];
                sizes.extend(&config.hidden_sizes);
                sizes.push(1);
                let net = NetworkSpec::uniform(&sizes, config.activation, OutputHead::RegressionLinear)?;
                let k = config.k_train.unwrap_or(10);
                if k == 0 {
                    return Err(Error::Config("k_train must be >= 1".into()));
                }
                (net, TaskSource::sine(seed, k))
            }
            TaskFamily::SyntheticCls => {
                if config.n_way < 2 {
                    return Err(Error::Config("n_way must be >= 2".into()));
                }
                if config.k_test == 0 || config.eval_shot == 0 {
                    return Err(Error::Config("k_test and eval_shot must be >= 1".into()));
                }
                let mut sizes = vec![config.input_dim];
                sizes.extend(&config.hidden_sizes);
                sizes.push(config.n_way);
                let net = NetworkSpec::uniform(&sizes, config.activation, OutputHead::ClassificationSoftmax)?;
                let rule_batch = config.inner_batch_size.unwrap_or(config.meta_batch);
                let train_shot = config
                    .k_train
                    .unwrap_or_else(|| tasks::compute_train_shot(config.inner_steps, rule_batch, config.n_way));
                let source = TaskSource::synthetic(
                    seed,
                    config.n_way,
                    train_shot,
                    config.eval_shot,
                    config.k_test,
                    config.input_dim,
                    noise,
                );
                (net, source)
            }
            TaskFamily::EpisodeDir => {
                let dir_path = config
                    .episode_dir
                    .as_ref()
                    .ok_or_else(|| Error::Config("episode-dir task family needs episode_dir".into()))?;
                let dir = EpisodeDir::load(dir_path)?;
                if config.n_way < 2 {
                    return Err(Error::Config("n_way must be >= 2".into()));
                }
                let input_dim = dir.input_dim();
                let mut sizes = vec![input_dim];
                sizes.extend(&config.hidden_sizes);
                sizes.push(config.n_way);
                let net = NetworkSpec::uniform(&sizes, config.activation, OutputHead::ClassificationSoftmax)?;
                let rule_batch = config.inner_batch_size.unwrap_or(config.meta_batch);
                let train_shot = config
                    .k_train
                    .unwrap_or_else(|| tasks::compute_train_shot(config.inner_steps, rule_batch, config.n_way));
                let source = TaskSource::directory(
                    seed,
                    dir,
                    config.n_way,
                    train_shot,
                    config.eval_shot,
                    config.k_test,
                    noise,
                );
                (net, source)
            }
        };

        let ispl = if config.ispl.enabled {
            let cfg = IsplConfig {
                prior_count: config.ispl.prior_count,
                gamma0: config.ispl.gamma0,
                mu: config.ispl.mu,
                period: config.ispl.period,
                prior_fraction: config.ispl.prior_fraction,
                prior_steps: config.ispl.prior_steps.unwrap_or(config.inner_steps),
                per_step_decay: config.ispl.per_step_decay,
            };
            cfg.validate()?;
            Some(cfg)
        } else {
            None
        };

        let eval = EvalSettings {
            interval: config.eval_interval,
            task_count: config.eval_task_count,
            adapt_steps: config.eval_adapt_steps,
        };
        let output_dir = config.output_dir.clone();
        let inner_batch = config.inner_batch_size;
        Ok(ResolvedRun { config, meta, net, opt, source, ispl, eval, inner_batch, seed, output_dir })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_sine_json() -> serde_json::Value {
        serde_json::json!({
            "task": "sine",
            "algorithm": "eigen-reptile",
            "beta": 1.0,
            "meta_batch": 10,
            "inner_steps": 5,
            "outer_iterations": 100,
            "seed": 1,
            "output_dir": "runs/test"
        })
    }

    #[test]
    fn minimal_config_resolves() {
        let cfg: RunConfig = serde_json::from_value(minimal_sine_json()).unwrap();
        let resolved = cfg.resolve(None, None).unwrap();
        assert_eq!(resolved.net.layer_sizes(), &[1, 64, 64, 1]);
        assert_eq!(resolved.net.param_count(), 4353);
        assert!(resolved.ispl.is_none());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = minimal_sine_json();
        v["innre_steps"] = serde_json::json!(5);
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_value(v);
        assert!(parsed.is_err());
    }

    #[test]
    fn noise_probability_validated() {
        let mut v = minimal_sine_json();
        v["task"] = serde_json::json!("synthetic-cls");
        v["noise"] = serde_json::json!({"kind": "symmetric", "p": 1.5});
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        assert!(cfg.resolve(None, None).is_err());
    }

    #[test]
    fn noise_on_sine_rejected() {
        let mut v = minimal_sine_json();
        v["noise"] = serde_json::json!({"kind": "symmetric", "p": 0.5});
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        assert!(cfg.resolve(None, None).is_err());
    }

    #[test]
    fn train_shot_rule_applied_by_default() {
        let mut v = minimal_sine_json();
        v["task"] = serde_json::json!("synthetic-cls");
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        let resolved = cfg.resolve(None, None).unwrap();
        // ceil(5*10/5)+1 = 11 shots per class in meta-training
        let batch = resolved.source.train_batch(0, 0).unwrap();
        assert_eq!(batch.len(), 5 * 11);
    }

    #[test]
    fn overrides_take_effect() {
        let cfg: RunConfig = serde_json::from_value(minimal_sine_json()).unwrap();
        let resolved = cfg.resolve(Some(99), Some(PathBuf::from("elsewhere"))).unwrap();
        assert_eq!(resolved.seed, 99);
        assert_eq!(resolved.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(resolved.config.seed, 99);
    }

    #[test]
    fn ispl_settings_resolve_with_inner_step_default() {
        let mut v = minimal_sine_json();
        v["ispl"] = serde_json::json!({"enabled": true, "gamma0": 2.0, "mu": 0.1, "period": 50});
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        let resolved = cfg.resolve(None, None).unwrap();
        let ispl = resolved.ispl.unwrap();
        assert_eq!(ispl.prior_steps, 5);
        assert_eq!(ispl.prior_count, 2);
    }
}
