//! Tabular softmax bandit: a one-step policy used to sanity-check the algorithms.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Actor, AlgoError, Policy, RolloutBuffer, StepEval};
use crate::model::{argmax, sample_categorical};
use crate::nn::{ParamSet, Tape, Tensor};

/// `K` arms with logits, a scalar value estimate, and per-instance reward noise.
///
/// Instance `s` pays `means[a] + noise·u_a(s)` for arm `a`, with `u(s)`
/// uniform on `[-1, 1]` and seeded by `s`.
#[derive(Clone, Debug)]
pub struct SoftmaxBandit {
    params: ParamSet<f64>,
    means: Vec<f64>,
    noise: f64,
}

impl SoftmaxBandit {
    /// Zero logits (uniform policy) and zero value.
    pub fn new(means: Vec<f64>, noise: f64) -> Self {
        let mut params = ParamSet::new();
        params.add("logits", Tensor::zeros(vec![means.len()]));
        params.add("value", Tensor::zeros(vec![1]));
        SoftmaxBandit { params, means, noise }
    }

    pub fn arms(&self) -> usize {
        self.means.len()
    }

    pub fn logits(&self) -> &[f64] {
        self.params.value(0).data()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let l = self.logits();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|x| (x - m).exp()).sum();
        l.iter().map(|x| (x - m).exp() / z).collect()
    }

    pub fn best_arm(&self) -> usize {
        argmax(&self.means)
    }

    pub fn greedy_arm(&self) -> usize {
        argmax(self.logits())
    }

    pub fn reward(&self, instance: u64, arm: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(instance);
        let u: Vec<f64> = (0..self.arms()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        self.means[arm] + self.noise * u[arm]
    }

    fn log_probs(&self) -> Vec<f64> {
        self.probabilities().iter().map(|p| p.ln()).collect()
    }
}

impl Policy<f64> for SoftmaxBandit {
    type Context = ();
    type Instance = u64;
    type Aux = ();

    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.params
    }

    fn rollouts(&self, instances: &[u64], per_instance: usize, mut actor: Actor<'_>) -> Result<RolloutBuffer<()>, AlgoError> {
        let batch = instances.len() * per_instance;
        let lp = self.log_probs();
        let value = self.params.value(1).data()[0];
        let mut buf = RolloutBuffer::new((), 1, batch, (0..batch).map(|b| b / per_instance.max(1)).collect());
        for b in 0..batch {
            let a = match &mut actor {
                Actor::Greedy => argmax(&lp),
                Actor::Sample(rng) => sample_categorical(&lp, *rng),
                Actor::SampleRows(rngs) => sample_categorical(&lp, &mut rngs[b]),
                Actor::GreedyFrom(starts) => starts[b],
                Actor::Script(s) => *s.get(b).and_then(|r| r.first()).ok_or_else(|| {
                    AlgoError::BatchMismatch(format!("action script has no entry for row {b}"))
                })?,
            };
            buf.record(0, b, a, lp[a], self.reward(instances[b / per_instance], a), true, value);
        }
        Ok(buf)
    }

    fn evaluate(&self, tape: &mut Tape<f64>, buffer: &RolloutBuffer<()>, idx: &[usize]) -> Result<(StepEval, ()), AlgoError> {
        let q = idx.len();
        let zeros = Arc::new(vec![0; q]);
        let logits = tape.param(&self.params, 0);
        let logits = tape.reshape(logits, vec![1, self.arms()]);
        let rows = tape.gather_rows(logits, zeros.clone());
        let lp = tape.log_softmax(rows);
        let log_prob = tape.pick(lp, Arc::new(idx.iter().map(|&i| buffer.actions[i]).collect()));
        let entropy = tape.entropy(lp);
        let v = tape.param(&self.params, 1);
        let v = tape.reshape(v, vec![1, 1]);
        let v = tape.gather_rows(v, zeros);
        let value = tape.reshape(v, vec![q]);
        Ok((StepEval { log_prob, entropy, value }, ()))
    }

    fn absorb(&mut self, _: ()) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algo::{
        compute_advantages, maybe_promote_baseline, ppo_loss, ppo_update, reinforce_update, BaselineSpec,
        PpoConfig, ReinforceConfig,
    };
    use crate::nn::Adam;

    fn bandit() -> SoftmaxBandit {
        SoftmaxBandit::new(vec![0.2, 1.0, 0.5], 0.3)
    }

    #[test]
    fn identical_policy_has_unit_ratio_and_zero_surrogate() {
        let b = bandit();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst: Vec<u64> = (0..16).collect();
        let mut buf = b.rollouts(&inst, 1, Actor::Sample(&mut rng)).unwrap();
        compute_advantages(&mut buf, 1.0, 0.95);
        let mut tape = Tape::new();
        let idx = buf.valid_transitions();
        let loss = ppo_loss(&mut tape, &b, &buf, &idx, &PpoConfig::default()).unwrap();
        assert!(loss.policy_loss.abs() < 1e-12);
        assert_eq!(loss.clip_fraction, 0.0);
    }

    #[test]
    fn zero_clip_first_epoch_matches_vanilla_gradient() {
        let b = bandit();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst: Vec<u64> = (0..32).collect();
        let mut buf = b.rollouts(&inst, 1, Actor::Sample(&mut rng)).unwrap();
        compute_advantages(&mut buf, 1.0, 1.0);
        let idx = buf.valid_transitions();
        let cfg = PpoConfig { clip_coefficient: 0.0, value_coef: 0.0, ..Default::default() };
        let mut tape = Tape::new();
        let loss = ppo_loss(&mut tape, &b, &buf, &idx, &cfg).unwrap();
        let g = tape.backward(loss.total).for_params(&tape, b.params())[0].clone().unwrap();
        // −mean(Â ∇log p(a)) with ∇_l log p(a) = e_a − p
        let adv = crate::algo::ppo::normalized(&buf.advantages);
        let p = b.probabilities();
        for (k, gk) in g.iter().enumerate() {
            let want: f64 = -(0..32)
                .map(|i| adv[i] * (if buf.actions[i] == k { 1.0 } else { 0.0 } - p[k]))
                .sum::<f64>()
                / 32.0;
            assert!((gk - want).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let mut b = bandit();
        let mut buf = RolloutBuffer::new((), 1, 2, vec![0, 1]);
        buf.record(0, 0, 0, (1.0f64 / 3.0).ln(), 1.0, true, 0.0);
        buf.record(0, 1, 2, (1.0f64 / 3.0).ln(), -1.0, true, 0.0);
        compute_advantages(&mut buf, 1.0, 1.0);
        let before = b.probabilities()[0];
        let cfg = PpoConfig { update_epochs: 1, num_minibatches: 1, steps_per_batch: 2, ..Default::default() };
        ppo_update(&mut b, &buf, &cfg, &mut Adam::new(0.1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b.probabilities()[0] > before);
    }

    #[test]
    fn equal_returns_and_baseline_give_zero_gradient() {
        let mut b = SoftmaxBandit::new(vec![1.0, 1.0], 0.0);
        let before = b.logits().to_vec();
        let spec = BaselineSpec::shared_rollouts(4);
        let cfg = ReinforceConfig { learning_rate: 0.1, ..Default::default() };
        let stats = reinforce_update(&mut b, &[1, 2], &spec, None, &cfg, &mut Adam::new(0.1), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(stats.grad_norm, 0.0);
        assert_eq!(b.logits(), &before[..]);
    }

    #[test]
    fn critic_and_greedy_baselines_need_their_components() {
        let mut b = bandit();
        let err = reinforce_update(
            &mut b,
            &[1],
            &BaselineSpec::greedy_rollout(0.05),
            None,
            &ReinforceConfig::default(),
            &mut Adam::new(0.1),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(AlgoError::Config(_))));
    }

    #[test]
    fn promotion_rules() {
        let cur = bandit();
        let mut bl = bandit();
        let eval: Vec<u64> = (100..120).collect();
        assert!(!maybe_promote_baseline(&cur, &mut bl, &eval, 0.05).unwrap().promoted);
        let mut better = bandit();
        better.params_mut().value_mut(0).data_mut()[1] = 5.0;
        let mut bl = bandit();
        bl.params_mut().value_mut(0).data_mut()[0] = 5.0;
        assert!(!maybe_promote_baseline(&better, &mut bl.clone(), &eval, 0.0).unwrap().promoted);
        let out = maybe_promote_baseline(&better, &mut bl, &eval, 0.05).unwrap();
        assert!(out.promoted && out.p_value < 1e-6);
        assert_eq!(bl.greedy_arm(), 1);
        assert!(maybe_promote_baseline(&cur, &mut bl, &eval[..1], 0.05).is_err());
    }
}
