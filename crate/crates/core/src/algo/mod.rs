//! Policy-gradient training: rollout collection, GAE, PPO and the REINFORCE family.

pub mod bandit;
mod buffer;
mod ppo;
mod reinforce;
mod rollout;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::EnvError;
use crate::model::ModelError;
use crate::nn::{ParamSet, Real, Tape, Var};

pub use buffer::{compute_advantages, RolloutBuffer};
pub use ppo::{ppo_loss, ppo_update, PpoConfig, PpoLoss, UpdateStats};
pub use reinforce::{
    maybe_promote_baseline, one_sided_paired_p_value, reinforce_loss, reinforce_update, update_baseline,
    BaselineKind, ReinforceLoss, BaselineSpec, Promotion, ReinforceConfig,
};
pub use rollout::{collect_rollouts, max_episode_steps, RoutingContext};

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("batch mismatch: {0}")]
    BatchMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("advantages have not been computed for this buffer")]
    AdvantagesMissing,
    #[error(
        "training diverged ({what}): policy_loss={policy_loss} value_loss={value_loss} entropy={entropy} grad_norm={grad_norm}"
    )]
    Divergence { what: String, policy_loss: f64, value_loss: f64, entropy: f64, grad_norm: f64 },
}

/// How actions are chosen during a rollout.
pub enum Actor<'a> {
    Greedy,
    Sample(&'a mut ChaCha8Rng),
    /// One generator per row, so row `b` draws the same actions whatever the batch size.
    SampleRows(&'a mut [ChaCha8Rng]),
    /// Row `b` opens with `starts[b]`, greedy afterwards.
    GreedyFrom(&'a [usize]),
    /// `script[row][t]`; rows must have an entry for every step they are active.
    Script(&'a [Vec<usize>]),
}

/// Per-transition quantities recorded on a tape, each `[Q]`.
#[derive(Clone, Copy, Debug)]
pub struct StepEval {
    pub log_prob: Var,
    pub entropy: Var,
    pub value: Var,
}

/// What the training algorithms need from a policy.
pub trait Policy<F: Real> {
    /// Data stored alongside a rollout for re-evaluation.
    type Context;
    type Instance: Clone;
    /// Side results of a training-mode evaluation (e.g. normalization statistics).
    type Aux;

    fn params(&self) -> &ParamSet<F>;

    fn params_mut(&mut self) -> &mut ParamSet<F>;

    fn has_critic(&self) -> bool {
        true
    }

    /// Complete episodes, `per_instance` rows per instance, instance-major.
    fn rollouts(
        &self,
        instances: &[Self::Instance],
        per_instance: usize,
        actor: Actor<'_>,
    ) -> Result<RolloutBuffer<Self::Context>, AlgoError>;

    /// Re-evaluates the flat transitions `idx` (`t·B + b`, ascending) under the current parameters.
    fn evaluate(
        &self,
        tape: &mut Tape<F>,
        buffer: &RolloutBuffer<Self::Context>,
        idx: &[usize],
    ) -> Result<(StepEval, Self::Aux), AlgoError>;

    fn absorb(&mut self, aux: Self::Aux);
}
