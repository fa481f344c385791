use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::ppo::UpdateStats;
use super::{Actor, AlgoError, Policy, RolloutBuffer};
use crate::nn::{clip_grad_norm, Adam, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Critic,
    GreedyRollout,
    SharedRollouts,
}

impl std::str::FromStr for BaselineKind {
    type Err = AlgoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "critic" => Ok(BaselineKind::Critic),
            "greedy_rollout" | "greedy" => Ok(BaselineKind::GreedyRollout),
            "shared_rollouts" | "shared" | "pomo" => Ok(BaselineKind::SharedRollouts),
            other => Err(AlgoError::Config(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    /// Promotion threshold of the paired test (greedy rollout only).
    pub significance: f64,
    /// Rollouts per instance (shared rollouts only).
    pub num_rollouts: usize,
}

impl BaselineSpec {
    pub fn critic() -> Self {
        BaselineSpec { kind: BaselineKind::Critic, significance: 0.05, num_rollouts: 1 }
    }

    pub fn greedy_rollout(significance: f64) -> Self {
        BaselineSpec { kind: BaselineKind::GreedyRollout, significance, num_rollouts: 1 }
    }

    pub fn shared_rollouts(n: usize) -> Self {
        BaselineSpec { kind: BaselineKind::SharedRollouts, significance: 0.05, num_rollouts: n }
    }

    /// Rows sampled per instance.
    pub fn rollouts_per_instance(&self) -> usize {
        match self.kind {
            BaselineKind::SharedRollouts => self.num_rollouts,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReinforceConfig {
    pub learning_rate: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        ReinforceConfig { learning_rate: 1e-3, value_coef: 0.5, max_grad_norm: 1.0 }
    }
}

fn greedy_returns<F: Real, P: Policy<F>>(policy: &P, instances: &[P::Instance]) -> Result<Vec<f64>, AlgoError> {
    Ok(policy.rollouts(instances, 1, Actor::Greedy)?.episode_returns)
}

/// Baseline value per row of `buffer`, in return units.
pub fn update_baseline<F: Real, P: Policy<F>>(
    spec: &BaselineSpec,
    policy: &P,
    buffer: &RolloutBuffer<P::Context>,
    instances: &[P::Instance],
    baseline_policy: Option<&P>,
) -> Result<Vec<f64>, AlgoError> {
    let rows = 0..buffer.batch;
    match spec.kind {
        BaselineKind::Critic => {
            if !policy.has_critic() {
                return Err(AlgoError::Config("critic baseline needs a policy with a critic head".into()));
            }
            Ok(buffer.values[..buffer.batch].to_vec())
        }
        BaselineKind::GreedyRollout => {
            let bl = baseline_policy
                .ok_or_else(|| AlgoError::Config("greedy-rollout baseline needs a baseline policy".into()))?;
            let per_instance = greedy_returns(bl, instances)?;
            Ok(rows.map(|b| per_instance[buffer.row_group[b]]).collect())
        }
        BaselineKind::SharedRollouts => {
            let mut sum = vec![0.0; buffer.num_groups];
            let mut count = vec![0usize; buffer.num_groups];
            for b in rows.clone() {
                sum[buffer.row_group[b]] += buffer.episode_returns[b];
                count[buffer.row_group[b]] += 1;
            }
            Ok(rows.map(|b| sum[buffer.row_group[b]] / count[buffer.row_group[b]] as f64).collect())
        }
    }
}

/// REINFORCE objective recorded on a tape.
pub struct ReinforceLoss<A> {
    pub total: Var,
    pub policy_term: Var,
    pub value_loss: Option<Var>,
    pub entropy: f64,
    pub aux: A,
}

/// `−mean_b (R_b − baseline_b)·log p(π_b)` plus, when `value_coef > 0`, the critic's
/// squared error at the first state.
pub fn reinforce_loss<F: Real, P: Policy<F>>(
    tape: &mut Tape<F>,
    policy: &P,
    buffer: &RolloutBuffer<P::Context>,
    baselines: &[f64],
    value_coef: f64,
) -> Result<ReinforceLoss<P::Aux>, AlgoError> {
    if baselines.len() != buffer.batch {
        return Err(AlgoError::BatchMismatch(format!("{} baselines for {} rows", baselines.len(), buffer.batch)));
    }
    let bsz = buffer.batch;
    let idx = buffer.valid_transitions();
    let (ev, aux) = policy.evaluate(tape, buffer, &idx)?;
    let rows: Vec<usize> = idx.iter().map(|&i| i % bsz).collect();
    let per_row = tape.segment_sum(ev.log_prob, rows, bsz);
    let w: Vec<F> =
        (0..bsz).map(|b| F::c(-(buffer.episode_returns[b] - baselines[b]) / bsz as f64)).collect();
    let pg = tape.weighted_sum(per_row, w);
    let entropy = tape.mean(ev.entropy);
    let entropy = tape.value(entropy).item().f64();
    if value_coef > 0.0 {
        let first: Vec<usize> = idx.iter().enumerate().filter(|(_, &i)| i < bsz).map(|(k, _)| k).collect();
        if first.len() != bsz {
            return Err(AlgoError::BatchMismatch("every row needs a first transition".into()));
        }
        let v0 = tape.gather_rows(ev.value, Arc::new(first));
        let ret = tape.constant(Tensor::from_f64(vec![bsz], &buffer.episode_returns));
        let err = tape.sub(v0, ret);
        let sq = tape.square(err);
        let vloss = tape.mean(sq);
        let scaled = tape.scale(vloss, F::c(value_coef));
        let total = tape.add(pg, scaled);
        Ok(ReinforceLoss { total, policy_term: pg, value_loss: Some(vloss), entropy, aux })
    } else {
        Ok(ReinforceLoss { total: pg, policy_term: pg, value_loss: None, entropy, aux })
    }
}

/// One REINFORCE step on freshly sampled full rollouts of `instances`.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_update<F: Real, P: Policy<F>>(
    policy: &mut P,
    instances: &[P::Instance],
    spec: &BaselineSpec,
    baseline_policy: Option<&P>,
    cfg: &ReinforceConfig,
    optimizer: &mut Adam<F>,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, AlgoError> {
    if spec.kind == BaselineKind::SharedRollouts && spec.num_rollouts == 0 {
        return Err(AlgoError::Config("shared-rollouts baseline needs at least one rollout".into()));
    }
    let buffer = policy.rollouts(instances, spec.rollouts_per_instance(), Actor::Sample(rng))?;
    let baselines = update_baseline(spec, &*policy, &buffer, instances, baseline_policy)?;
    let value_coef = if spec.kind == BaselineKind::Critic { cfg.value_coef } else { 0.0 };
    optimizer.lr = cfg.learning_rate;
    let mut tape = Tape::new();
    let loss = reinforce_loss(&mut tape, &*policy, &buffer, &baselines, value_coef)?;
    let (entropy, aux) = (loss.entropy, loss.aux);
    let mean_return = buffer.episode_returns.iter().sum::<f64>() / buffer.batch.max(1) as f64;
    let pl = tape.value(loss.policy_term).item().f64();
    let vl = loss.value_loss.map_or(0.0, |v| tape.value(v).item().f64());
    let mut grads = tape.backward(loss.total).for_params(&tape, policy.params());
    let gn = clip_grad_norm(&mut grads, cfg.max_grad_norm);
    if !pl.is_finite() || !vl.is_finite() || !gn.is_finite() {
        return Err(AlgoError::Divergence {
            what: "non-finite REINFORCE loss".into(),
            policy_loss: pl,
            value_loss: vl,
            entropy,
            grad_norm: gn,
        });
    }
    optimizer.step(policy.params_mut(), &grads);
    policy.absorb(aux);
    let mut stats = UpdateStats::default();
    stats.accumulate(pl, vl, entropy, 0.0, 0.0, gn);
    let mut stats = stats.finish();
    stats.mean_episode_return = mean_return;
    Ok(stats)
}

/// p-value of the one-sided paired t-test for "mean of `diffs` > 0".
pub fn one_sided_paired_p_value(diffs: &[f64]) -> Result<f64, AlgoError> {
    let n = diffs.len();
    if n < 2 {
        return Err(AlgoError::Config(format!("paired test needs at least 2 instances, got {n}")));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    if se == 0.0 {
        return Ok(if mean > 0.0 { 0.0 } else { 1.0 });
    }
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| AlgoError::Config(e.to_string()))?;
    Ok(1.0 - dist.cdf(mean / se))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Promotion {
    pub promoted: bool,
    pub p_value: f64,
    /// Mean greedy-return gain of the candidate over the baseline.
    pub mean_improvement: f64,
}

/// Copies `current` into `baseline` when its greedy returns are significantly better.
pub fn maybe_promote_baseline<F: Real, P: Policy<F>>(
    current: &P,
    baseline: &mut P,
    eval_instances: &[P::Instance],
    alpha: f64,
) -> Result<Promotion, AlgoError> {
    if eval_instances.len() < 2 {
        return Err(AlgoError::Config(format!(
            "baseline evaluation set needs at least 2 instances, got {}",
            eval_instances.len()
        )));
    }
    let cur = greedy_returns(current, eval_instances)?;
    let bl = greedy_returns(&*baseline, eval_instances)?;
    let diffs: Vec<f64> = cur.iter().zip(&bl).map(|(a, b)| a - b).collect();
    let p_value = one_sided_paired_p_value(&diffs)?;
    let promoted = p_value < alpha;
    if promoted {
        baseline.params_mut().copy_from(current.params());
    }
    Ok(Promotion { promoted, p_value, mean_improvement: diffs.iter().sum::<f64>() / diffs.len() as f64 })
}
