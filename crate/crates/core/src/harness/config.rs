use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::algo::{max_episode_steps, BaselineKind, BaselineSpec, PpoConfig, ReinforceConfig};
use crate::env::RewardMode;
use crate::model::{ModelConfig, Normalization};
use crate::problems::ProblemKind;

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "NEUROUTE_";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Ppo,
    Reinforce,
}

/// Everything needed to reproduce a training run, as one flat table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ProblemKind,
    pub n: usize,
    /// Instances per collection (`M`).
    pub num_instances: usize,
    /// Trajectories per instance (`N`).
    pub trajectories_per_instance: usize,
    pub reward_mode: RewardMode,

    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub feedforward_dim: usize,
    pub logit_clip: f64,
    pub normalization: Normalization,

    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub num_minibatches: usize,
    pub update_epochs: usize,
    pub clip_coefficient: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub baseline: BaselineKind,
    pub baseline_significance: f64,

    /// Training stops before a collection would exceed this many env steps.
    pub total_env_steps: u64,
    /// Optional wall-clock limit in seconds; 0 disables it.
    pub max_wall_time_s: f64,
    pub eval_size: usize,
    pub eval_seed: u64,
    /// Greedy evaluation every this many collections.
    pub eval_every: usize,
    /// Numbered checkpoint every this many collections.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let p = PpoConfig::default();
        ExperimentConfig {
            kind: ProblemKind::Tsp,
            n: 10,
            num_instances: 64,
            trajectories_per_instance: 10,
            reward_mode: RewardMode::PerStep,
            embed_dim: m.embed_dim,
            num_heads: m.num_heads,
            num_encoder_layers: m.num_encoder_layers,
            feedforward_dim: m.feedforward_dim,
            logit_clip: m.logit_clip,
            normalization: m.normalization,
            algorithm: Algorithm::Ppo,
            learning_rate: p.learning_rate,
            // one minibatch per collection: 64 x 10 x 10 = 6400 transitions
            num_minibatches: 1,
            update_epochs: p.update_epochs,
            clip_coefficient: p.clip_coefficient,
            discount: p.discount,
            gae_lambda: p.gae_lambda,
            value_coef: p.value_coef,
            entropy_coef: p.entropy_coef,
            max_grad_norm: p.max_grad_norm,
            baseline: BaselineKind::Critic,
            baseline_significance: 0.05,
            total_env_steps: 640_000,
            max_wall_time_s: 0.0,
            eval_size: 256,
            eval_seed: 0,
            eval_every: 10,
            checkpoint_every: 10,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| HarnessError::io(path, e))
    }

    fn keys() -> Vec<String> {
        match toml::Value::try_from(ExperimentConfig::default()) {
            Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    /// Builds a config from an optional file, then `NEUROUTE_<KEY>` variables,
    /// then `key=value` overrides; later sources win.
    ///
    /// Environment variables that do not name a config key are ignored;
    /// unknown override keys are an error.
    pub fn from_sources<I>(file: Option<&Path>, env: I, overrides: &[String]) -> Result<Self, HarnessError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| HarnessError::Config(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        let keys = Self::keys();
        let mut from_env: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| {
                let key = k.strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
                keys.contains(&key).then_some((key, v))
            })
            .collect();
        from_env.sort();
        for (k, v) in from_env {
            table.insert(k, parse_value(&v));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override `{o}` is not of the form key=value")))?;
            let k = k.trim();
            if !keys.iter().any(|x| x == k) {
                return Err(HarnessError::Config(format!("unknown config key `{k}`")));
            }
            table.insert(k.to_string(), parse_value(v.trim()));
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            num_encoder_layers: self.num_encoder_layers,
            logit_clip: self.logit_clip,
            feedforward_dim: self.feedforward_dim,
            normalization: self.normalization,
        }
    }

    /// Episode steps collected per trajectory.
    pub fn horizon(&self) -> usize {
        max_episode_steps(self.kind, self.n)
    }

    /// Trajectories sampled per instance in one collection.
    pub fn rows_per_instance(&self) -> usize {
        match (self.algorithm, self.baseline) {
            (Algorithm::Ppo, _) | (Algorithm::Reinforce, BaselineKind::SharedRollouts) => self.trajectories_per_instance,
            (Algorithm::Reinforce, _) => 1,
        }
    }

    /// Env steps charged per collection: `M · rows · horizon`.
    pub fn steps_per_collection(&self) -> u64 {
        (self.num_instances * self.rows_per_instance() * self.horizon()) as u64
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            learning_rate: self.learning_rate,
            steps_per_batch: self.steps_per_collection() as usize,
            num_minibatches: self.num_minibatches,
            update_epochs: self.update_epochs,
            clip_coefficient: self.clip_coefficient,
            discount: self.discount,
            gae_lambda: self.gae_lambda,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
            max_grad_norm: self.max_grad_norm,
        }
    }

    pub fn reinforce_config(&self) -> ReinforceConfig {
        ReinforceConfig { learning_rate: self.learning_rate, value_coef: self.value_coef, max_grad_norm: self.max_grad_norm }
    }

    pub fn baseline_spec(&self) -> BaselineSpec {
        BaselineSpec {
            kind: self.baseline,
            significance: self.baseline_significance,
            num_rollouts: self.trajectories_per_instance,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let min_n = match self.kind {
            ProblemKind::Tsp => 2,
            ProblemKind::Cvrp => 1,
        };
        if self.n < min_n {
            return bad(format!("n = {} is below the minimum of {min_n}", self.n));
        }
        if self.num_instances == 0 || self.trajectories_per_instance == 0 {
            return bad("num_instances and trajectories_per_instance must be positive".into());
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("eval_every and checkpoint_every must be positive".into());
        }
        if self.eval_size == 0 {
            return bad("eval_size must be positive".into());
        }
        if !(self.max_wall_time_s >= 0.0) {
            return bad("max_wall_time_s must be nonnegative".into());
        }
        self.model_config().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        match self.algorithm {
            Algorithm::Ppo => self.ppo_config().validate()?,
            Algorithm::Reinforce => {
                if !(self.learning_rate > 0.0 && self.max_grad_norm > 0.0) {
                    return bad("learning_rate and max_grad_norm must be positive".into());
                }
                if self.baseline == BaselineKind::GreedyRollout && self.eval_size < 2 {
                    return bad("the greedy-rollout baseline needs eval_size >= 2".into());
                }
            }
        }
        Ok(())
    }
}
