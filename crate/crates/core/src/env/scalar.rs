use std::sync::Arc;

use crate::problems::{ProblemInstance, ProblemKind, Tour};

use super::observation::Observation;
use super::state::RouteState;
use super::{reward_for, EnvError, RewardMode};

/// Result of a single scalar step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    /// Final tour length, set on the step that finishes the episode.
    pub episode_length: Option<f64>,
}

/// Reference environment for one instance and one trajectory.
#[derive(Clone, Debug)]
pub struct RoutingEnv {
    instance: Arc<ProblemInstance>,
    coords: Arc<Vec<[f64; 2]>>,
    depot: Option<Arc<Vec<[f64; 2]>>>,
    demand: Option<Arc<Vec<f64>>>,
    state: RouteState,
    actions: Vec<usize>,
    reward_mode: RewardMode,
}

impl RoutingEnv {
    pub fn new(instance: Arc<ProblemInstance>, reward_mode: RewardMode) -> Self {
        let coords = Arc::new(instance.coords().to_vec());
        let depot = instance.depot().map(|d| Arc::new(vec![d]));
        let demand = instance.demand().map(|d| Arc::new(d.to_vec()));
        let state = RouteState::new(&instance);
        RoutingEnv { instance, coords, depot, demand, state, actions: Vec::new(), reward_mode }
    }

    /// Starts a fresh episode on `instance`.
    pub fn reset(&mut self, instance: Arc<ProblemInstance>) -> Observation {
        *self = RoutingEnv::new(instance, self.reward_mode);
        self.observation()
    }

    /// Restarts the current instance.
    pub fn restart(&mut self) -> Observation {
        self.state = RouteState::new(&self.instance);
        self.actions.clear();
        self.observation()
    }

    pub fn instance(&self) -> &ProblemInstance {
        &self.instance
    }

    pub fn state(&self) -> &RouteState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.is_done()
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        let travelled = self.state.apply(&self.instance, action)?;
        self.actions.push(action);
        let done = self.state.is_done();
        let length = self.state.partial_length();
        Ok(StepResult {
            observation: self.observation(),
            reward: reward_for(self.reward_mode, travelled, length, done),
            done,
            episode_length: done.then_some(length),
        })
    }

    /// Permitted actions; errors once the episode is over.
    pub fn get_mask(&self) -> Result<Vec<bool>, EnvError> {
        if self.state.is_done() {
            return Err(EnvError::Terminal);
        }
        Ok(self.state.mask(&self.instance))
    }

    /// Empty for TSP, `[remaining_load]` for CVRP.
    pub fn get_global_context(&self) -> Vec<f64> {
        match self.instance.kind() {
            ProblemKind::Tsp => Vec::new(),
            ProblemKind::Cvrp => vec![self.state.remaining_load()],
        }
    }

    /// `[n_nodes][k]`: `k = 0` for TSP, remaining demand (`k = 1`) for CVRP.
    pub fn get_dynamic_node_features(&self) -> Vec<Vec<f64>> {
        match self.instance.kind() {
            ProblemKind::Tsp => vec![Vec::new(); self.instance.num_nodes()],
            ProblemKind::Cvrp => self.state.remaining_demand(&self.instance).into_iter().map(|d| vec![d]).collect(),
        }
    }

    /// Actions taken so far.
    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    /// The realized tour (CVRP tours are prefixed with the depot).
    pub fn tour(&self) -> Tour {
        tour_from_actions(self.instance.kind(), &self.actions)
    }

    pub fn observation(&self) -> Observation {
        let inst = &self.instance;
        let nn = inst.num_nodes();
        let mask = self.state.mask(inst).into_iter().map(|m| if m { 1.0 } else { 0.0 }).collect();
        let last = self.state.last_node().unwrap_or(0);
        let cvrp = inst.kind() == ProblemKind::Cvrp;
        Observation {
            kind: inst.kind(),
            batch: 1,
            n_nodes: nn,
            trajectories_per_instance: 1,
            observations: self.coords.clone(),
            action_mask: mask,
            first_node_idx: (!cvrp).then(|| vec![self.state.first_node().unwrap_or(0)]),
            last_node_idx: vec![last],
            is_initial_action: vec![self.state.is_initial()],
            depot: self.depot.clone(),
            demand: self.demand.clone(),
            current_load: cvrp.then(|| vec![self.state.remaining_load()]),
            remaining_demand: cvrp.then(|| self.state.remaining_demand(inst)),
        }
    }
}

pub(crate) fn tour_from_actions(kind: ProblemKind, actions: &[usize]) -> Tour {
    match kind {
        ProblemKind::Tsp => Tour::new(actions.to_vec()),
        ProblemKind::Cvrp => {
            let mut nodes = Vec::with_capacity(actions.len() + 1);
            nodes.push(0);
            nodes.extend_from_slice(actions);
            Tour::new(nodes)
        }
    }
}

/// True iff every environment has finished.
pub fn all_finished(envs: &[RoutingEnv]) -> bool {
    envs.iter().all(RoutingEnv::is_done)
}

/// A plain loop over scalar environments with batch collation.
///
/// Serves as the reference for the vectorized environment and as the
/// throughput baseline. Finished rows follow the same no-op convention.
#[derive(Clone, Debug)]
pub struct ScalarLoop {
    envs: Vec<RoutingEnv>,
    last: Vec<Observation>,
}

impl ScalarLoop {
    /// `instances[i]` is repeated `trajectories` times, instance-major.
    pub fn new(instances: &[Arc<ProblemInstance>], trajectories: usize, reward_mode: RewardMode) -> Self {
        let envs: Vec<RoutingEnv> = instances
            .iter()
            .flat_map(|inst| (0..trajectories).map(move |_| RoutingEnv::new(inst.clone(), reward_mode)))
            .collect();
        let last = envs.iter().map(RoutingEnv::observation).collect();
        ScalarLoop { envs, last }
    }

    pub fn envs(&self) -> &[RoutingEnv] {
        &self.envs
    }

    pub fn observation(&self) -> Observation {
        collate(&self.last)
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<(Observation, Vec<f64>, Vec<bool>), EnvError> {
        if actions.len() != self.envs.len() {
            return Err(EnvError::BatchShape { expected: self.envs.len(), got: actions.len() });
        }
        let mut rewards = Vec::with_capacity(actions.len());
        let mut dones = Vec::with_capacity(actions.len());
        for (row, (env, &a)) in self.envs.iter_mut().zip(actions).enumerate() {
            if env.is_done() {
                if a != super::NOOP_ACTION {
                    return Err(EnvError::FinishedRow { row });
                }
                rewards.push(0.0);
                dones.push(true);
                continue;
            }
            let r = env.step(a).map_err(|e| match e {
                EnvError::IllegalAction { action, .. } => EnvError::IllegalAction { row, action },
                other => other,
            })?;
            rewards.push(r.reward);
            dones.push(r.done);
            self.last[row] = r.observation;
        }
        Ok((collate(&self.last), rewards, dones))
    }

    pub fn all_finished(&self) -> bool {
        all_finished(&self.envs)
    }
}

/// Stacks single-row observations; static features are copied per row.
pub(crate) fn collate(rows: &[Observation]) -> Observation {
    let first = &rows[0];
    let b = rows.len();
    let nn = first.n_nodes;
    let cvrp = first.kind == ProblemKind::Cvrp;
    let mut coords = Vec::with_capacity(b * first.n_coords());
    let mut mask = Vec::with_capacity(b * nn);
    let mut first_idx = Vec::with_capacity(b);
    let mut last_idx = Vec::with_capacity(b);
    let mut initial = Vec::with_capacity(b);
    let mut depot = Vec::new();
    let mut demand = Vec::new();
    let mut load = Vec::new();
    let mut remaining = Vec::new();
    for o in rows {
        coords.extend_from_slice(&o.observations);
        mask.extend_from_slice(&o.action_mask);
        if let Some(f) = &o.first_node_idx {
            first_idx.push(f[0]);
        }
        last_idx.push(o.last_node_idx[0]);
        initial.push(o.is_initial_action[0]);
        if cvrp {
            depot.extend_from_slice(o.depot.as_deref().expect("cvrp observation has a depot"));
            demand.extend_from_slice(o.demand.as_deref().expect("cvrp observation has demand"));
            load.extend_from_slice(o.current_load.as_deref().expect("cvrp observation has a load"));
            remaining.extend_from_slice(o.remaining_demand.as_deref().expect("cvrp observation has remaining demand"));
        }
    }
    Observation {
        kind: first.kind,
        batch: b,
        n_nodes: nn,
        trajectories_per_instance: 1,
        observations: Arc::new(coords),
        action_mask: mask,
        first_node_idx: (!cvrp).then_some(first_idx),
        last_node_idx: last_idx,
        is_initial_action: initial,
        depot: cvrp.then(|| Arc::new(depot)),
        demand: cvrp.then(|| Arc::new(demand)),
        current_load: cvrp.then_some(load),
        remaining_demand: cvrp.then_some(remaining),
    }
}
