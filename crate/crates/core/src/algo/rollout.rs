use std::sync::Arc;

use super::{Actor, AlgoError, Policy, RolloutBuffer, StepEval};
use crate::env::{observation_to_model_state, ModelState, RewardMode, VectorEnv, NOOP_ACTION};
use crate::model::{argmax, sample_categorical, AttentionModel, NormUpdate, StaticFeatures};
use crate::nn::{ParamSet, Real, Tape};
use crate::problems::{ProblemInstance, ProblemKind};

/// Static features of the collection plus the decoder state of every step.
#[derive(Clone, Debug)]
pub struct RoutingContext {
    pub features: StaticFeatures,
    /// One state per collected step, `batch` rows each.
    pub states: Vec<ModelState>,
    pub trajectories: usize,
}

/// Upper bound on the number of steps of one episode.
pub fn max_episode_steps(kind: ProblemKind, n: usize) -> usize {
    match kind {
        ProblemKind::Tsp => n,
        ProblemKind::Cvrp => 2 * n,
    }
}

/// Runs `horizon` steps from the environment's current state with a cached encoder.
///
/// Rows still running at the horizon are bootstrapped with the critic.
pub fn collect_rollouts<F: Real>(
    env: &mut VectorEnv,
    model: &AttentionModel<F>,
    horizon: usize,
    mut actor: Actor<'_>,
) -> Result<RolloutBuffer<RoutingContext>, AlgoError> {
    if env.kind() != model.kind() {
        return Err(AlgoError::BatchMismatch(format!("env is {}, model is {}", env.kind(), model.kind())));
    }
    let batch = env.batch();
    let rows_needed = match &actor {
        Actor::SampleRows(r) => r.len(),
        Actor::GreedyFrom(s) => s.len(),
        _ => batch,
    };
    if rows_needed != batch {
        return Err(AlgoError::BatchMismatch(format!("actor covers {rows_needed} rows, env has {batch}")));
    }
    let traj = env.trajectories_per_instance();
    let mut obs = env.observation();
    let features = StaticFeatures::from_observation(&obs);
    let cache = model.encode(&features)?;
    let groups = (0..batch).map(|b| b / traj).collect();
    let context = RoutingContext { features, states: Vec::new(), trajectories: traj };
    let mut buf = RolloutBuffer::new(context, horizon, batch, groups);
    for t in 0..horizon {
        if env.all_finished() {
            break;
        }
        let before = env.dones();
        let mut state = observation_to_model_state(&obs, model.kind())?;
        state.open_finished_rows(&before);
        let out = model.parallel_decode(&cache, &state, traj)?;
        let mut actions = vec![NOOP_ACTION; batch];
        for b in (0..batch).filter(|&b| !before[b]) {
            let row = out.log_probs_row(b);
            actions[b] = match &mut actor {
                Actor::Greedy => argmax(row),
                Actor::Sample(rng) => sample_categorical(row, *rng),
                Actor::SampleRows(rngs) => sample_categorical(row, &mut rngs[b]),
                Actor::GreedyFrom(starts) if t == 0 => starts[b],
                Actor::GreedyFrom(_) => argmax(row),
                Actor::Script(script) => *script.get(b).and_then(|s| s.get(t)).ok_or_else(|| {
                    AlgoError::BatchMismatch(format!("action script has no entry for row {b} step {t}"))
                })?,
            };
        }
        let step = env.vector_step(&actions)?;
        for b in (0..batch).filter(|&b| !before[b]) {
            let a = actions[b];
            buf.record(t, b, a, out.log_probs_row(b)[a].f64(), step.rewards[b], step.dones[b], out.value[b].f64());
        }
        buf.context.states.push(state);
        obs = step.observation;
    }
    if !env.all_finished() {
        let dones = env.dones();
        let mut state = observation_to_model_state(&obs, model.kind())?;
        state.open_finished_rows(&dones);
        let out = model.parallel_decode(&cache, &state, traj)?;
        for b in (0..batch).filter(|&b| !dones[b]) {
            buf.bootstrap[b] = out.value[b].f64();
        }
    }
    Ok(buf)
}

impl<F: Real> Policy<F> for AttentionModel<F> {
    type Context = RoutingContext;
    type Instance = Arc<ProblemInstance>;
    type Aux = Vec<NormUpdate<F>>;

    fn params(&self) -> &ParamSet<F> {
        AttentionModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet<F> {
        AttentionModel::params_mut(self)
    }

    fn rollouts(
        &self,
        instances: &[Arc<ProblemInstance>],
        per_instance: usize,
        actor: Actor<'_>,
    ) -> Result<RolloutBuffer<RoutingContext>, AlgoError> {
        let mut env = VectorEnv::from_instances(instances.to_vec(), per_instance, RewardMode::PerStep)?;
        let horizon = max_episode_steps(env.kind(), env.n());
        collect_rollouts(&mut env, self, horizon, actor)
    }

    fn evaluate(
        &self,
        tape: &mut Tape<F>,
        buffer: &RolloutBuffer<RoutingContext>,
        idx: &[usize],
    ) -> Result<(StepEval, Self::Aux), AlgoError> {
        debug_assert!(idx.windows(2).all(|w| w[0] < w[1]), "transitions must be ascending");
        let ctx = &buffer.context;
        let bsz = buffer.batch;
        // only the instances touched by this minibatch are encoded
        let mut local = vec![usize::MAX; buffer.num_groups];
        let mut groups = Vec::new();
        for &i in idx {
            let g = buffer.row_group[i % bsz];
            if local[g] == usize::MAX {
                local[g] = 0;
                groups.push(g);
            }
        }
        groups.sort_unstable();
        for (j, &g) in groups.iter().enumerate() {
            local[g] = j;
        }
        let feats = ctx.features.select(&groups);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < idx.len() {
            let t = idx[start] / bsz;
            let mut end = start;
            while end < idx.len() && idx[end] / bsz == t {
                end += 1;
            }
            let rows: Vec<usize> = idx[start..end].iter().map(|&i| i % bsz).collect();
            let state = ctx.states.get(t).ok_or_else(|| {
                AlgoError::BatchMismatch(format!("no stored state for step {t}"))
            })?;
            parts.push(state.select_rows(&rows));
            start = end;
        }
        let state = ModelState::concat(&parts);
        let kv: Vec<usize> = idx.iter().map(|&i| local[buffer.row_group[i % bsz]]).collect();
        let actions: Vec<usize> = idx.iter().map(|&i| buffer.actions[i]).collect();
        let (cache, aux) = self.encode_on_tape(tape, &feats, true)?;
        let out = self.decode_on_tape(tape, &cache, &state, &kv)?;
        let log_prob = tape.pick(out.log_probs, Arc::new(actions));
        let entropy = tape.entropy(out.log_probs);
        Ok((StepEval { log_prob, entropy, value: out.value }, aux))
    }

    fn absorb(&mut self, aux: Self::Aux) {
        self.apply_norm_updates(&aux);
    }
}
