use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AlgoError, Policy, RolloutBuffer};
use crate::nn::{clip_grad_norm, Adam, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub steps_per_batch: usize,
    pub num_minibatches: usize,
    pub update_epochs: usize,
    pub clip_coefficient: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            learning_rate: 1e-3,
            steps_per_batch: 1024 * 51,
            num_minibatches: 8,
            update_epochs: 4,
            clip_coefficient: 0.2,
            discount: 1.0,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), AlgoError> {
        let bad = |what: &str| Err(AlgoError::Config(format!("{what} is out of range")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate");
        }
        if self.steps_per_batch == 0 || self.num_minibatches == 0 || self.update_epochs == 0 {
            return bad("batch shape");
        }
        if self.steps_per_batch % self.num_minibatches != 0 {
            return Err(AlgoError::Config(format!(
                "steps_per_batch {} is not divisible by num_minibatches {}",
                self.steps_per_batch, self.num_minibatches
            )));
        }
        if !(self.clip_coefficient >= 0.0) {
            return bad("clip_coefficient");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda");
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0 && self.max_grad_norm > 0.0) {
            return bad("loss coefficients");
        }
        Ok(())
    }
}

/// Loss terms of one minibatch; `total` is on the tape.
#[derive(Clone, Debug)]
pub struct PpoLoss<A> {
    pub total: Var,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub aux: A,
}

/// Averages over the minibatch updates of one call.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
    /// Mean return of the rows collected for this update.
    pub mean_episode_return: f64,
}

impl UpdateStats {
    pub(crate) fn accumulate(&mut self, pl: f64, vl: f64, ent: f64, cf: f64, kl: f64, gn: f64) {
        self.policy_loss += pl;
        self.value_loss += vl;
        self.entropy += ent;
        self.clip_fraction += cf;
        self.approx_kl += kl;
        self.grad_norm += gn;
        self.minibatches += 1;
    }

    pub(crate) fn finish(mut self) -> Self {
        let k = self.minibatches.max(1) as f64;
        self.policy_loss /= k;
        self.value_loss /= k;
        self.entropy /= k;
        self.clip_fraction /= k;
        self.approx_kl /= k;
        self.grad_norm /= k;
        self
    }
}

/// Advantages of `idx` scaled to mean 0 and (population) std 1, std floored at 1e-8.
pub(crate) fn normalized(values: &[f64]) -> Vec<f64> {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
    values.iter().map(|v| (v - mean) / std).collect()
}

fn constant<F: Real>(tape: &mut Tape<F>, v: &[f64]) -> Var {
    tape.constant(Tensor::from_f64(vec![v.len()], v))
}

/// Clipped surrogate + value + entropy loss for the transitions `idx` (ascending).
pub fn ppo_loss<F: Real, P: Policy<F>>(
    tape: &mut Tape<F>,
    policy: &P,
    buffer: &RolloutBuffer<P::Context>,
    idx: &[usize],
    cfg: &PpoConfig,
) -> Result<PpoLoss<P::Aux>, AlgoError> {
    if !buffer.advantages_ready() {
        return Err(AlgoError::AdvantagesMissing);
    }
    let (ev, aux) = policy.evaluate(tape, buffer, idx)?;
    let adv = normalized(&idx.iter().map(|&i| buffer.advantages[i]).collect::<Vec<_>>());
    let old: Vec<f64> = idx.iter().map(|&i| buffer.log_probs[i]).collect();
    let ret: Vec<f64> = idx.iter().map(|&i| buffer.returns[i]).collect();
    let (adv_v, old_v, ret_v) = (constant(tape, &adv), constant(tape, &old), constant(tape, &ret));

    let diff = tape.sub(ev.log_prob, old_v);
    let ratio = tape.exp(diff);
    let eps = cfg.clip_coefficient;
    let s1 = tape.mul(ratio, adv_v);
    let clipped = tape.clamp(ratio, F::c(1.0 - eps), F::c(1.0 + eps));
    let s2 = tape.mul(clipped, adv_v);
    let surr = tape.minimum(s1, s2);
    let surr = tape.mean(surr);
    let pg = tape.scale(surr, F::c(-1.0));

    let err = tape.sub(ev.value, ret_v);
    let sq = tape.square(err);
    let vloss = tape.mean(sq);
    let ent = tape.mean(ev.entropy);

    let v_term = tape.scale(vloss, F::c(cfg.value_coef));
    let e_term = tape.scale(ent, F::c(-cfg.entropy_coef));
    let total = tape.add(pg, v_term);
    let total = tape.add(total, e_term);

    let ratios = tape.data(ratio);
    let diffs = tape.data(diff);
    let q = idx.len().max(1) as f64;
    let clip_fraction = ratios.iter().filter(|r| (r.f64() - 1.0).abs() > eps).count() as f64 / q;
    // k3 estimator of KL(old ‖ new)
    let approx_kl = ratios.iter().zip(diffs).map(|(r, d)| (r.f64() - 1.0) - d.f64()).sum::<f64>() / q;
    Ok(PpoLoss {
        total,
        policy_loss: tape.value(pg).item().f64(),
        value_loss: tape.value(vloss).item().f64(),
        entropy: tape.value(ent).item().f64(),
        clip_fraction,
        approx_kl,
        aux,
    })
}

/// Epochs of shuffled minibatch updates over a buffer with computed advantages.
///
/// Minibatches are formed from whole instances (all rows and steps of an
/// instance land in the same minibatch) so each minibatch encodes every
/// instance it touches exactly once.
pub fn ppo_update<F: Real, P: Policy<F>>(
    policy: &mut P,
    buffer: &RolloutBuffer<P::Context>,
    cfg: &PpoConfig,
    optimizer: &mut Adam<F>,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, AlgoError> {
    cfg.validate()?;
    if !buffer.advantages_ready() {
        return Err(AlgoError::AdvantagesMissing);
    }
    optimizer.lr = cfg.learning_rate;
    let mut stats = UpdateStats::default();
    let mut groups: Vec<usize> = (0..buffer.num_groups).collect();
    let k = cfg.num_minibatches.min(groups.len()).max(1);
    for _ in 0..cfg.update_epochs {
        groups.shuffle(rng);
        for m in 0..k {
            let chunk = &groups[m * groups.len() / k..(m + 1) * groups.len() / k];
            let idx = buffer.transitions_of_groups(chunk);
            if idx.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let loss = ppo_loss(&mut tape, &*policy, buffer, &idx, cfg)?;
            let total = tape.value(loss.total).item().f64();
            let mut grads = tape.backward(loss.total).for_params(&tape, policy.params());
            let gn = clip_grad_norm(&mut grads, cfg.max_grad_norm);
            if !total.is_finite() || !gn.is_finite() {
                return Err(AlgoError::Divergence {
                    what: "non-finite PPO loss".into(),
                    policy_loss: loss.policy_loss,
                    value_loss: loss.value_loss,
                    entropy: loss.entropy,
                    grad_norm: gn,
                });
            }
            optimizer.step(policy.params_mut(), &grads);
            policy.absorb(loss.aux);
            stats.accumulate(loss.policy_loss, loss.value_loss, loss.entropy, loss.clip_fraction, loss.approx_kl, gn);
        }
    }
    let mut stats = stats.finish();
    stats.mean_episode_return = buffer.episode_returns.iter().sum::<f64>() / buffer.batch.max(1) as f64;
    Ok(stats)
}
