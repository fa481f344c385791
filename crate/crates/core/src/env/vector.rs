use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::parallel;
use crate::problems::{euclid, generate_instance, ProblemInstance, ProblemKind, Tour, CAPACITY_TOLERANCE};
use crate::seeds::derive_seed;

use super::observation::Observation;
use super::scalar::tour_from_actions;
use super::state::NodeSet;
use super::{reward_for, EnvError, RewardMode};

/// Action to send to rows that have already finished.
pub const NOOP_ACTION: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorEnvConfig {
    pub num_instances: usize,
    pub trajectories_per_instance: usize,
    pub kind: ProblemKind,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub reward_mode: RewardMode,
}

impl VectorEnvConfig {
    pub fn batch(&self) -> usize {
        self.num_instances * self.trajectories_per_instance
    }

    /// Seed of the `i`-th generated instance.
    pub fn instance_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, i as u64)
    }
}

/// Output of [`VectorEnv::vector_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct VectorStep {
    pub observation: Observation,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Tour length for rows that finished on this step.
    pub episode_lengths: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
struct Row {
    visited: NodeSet,
    first: usize,
    last: usize,
    steps: usize,
    served: usize,
    load: f64,
    length: f64,
    done: bool,
    reward: f64,
    finished_now: bool,
    actions: Vec<usize>,
}

/// Static arrays shared by every trajectory of an instance.
#[derive(Debug)]
struct Statics {
    instances: Vec<Arc<ProblemInstance>>,
    coords: Arc<Vec<[f64; 2]>>,
    depot: Option<Arc<Vec<[f64; 2]>>>,
    demand: Option<Arc<Vec<f64>>>,
    /// Node coordinates in node order, `[M][n_nodes]`.
    xy: Vec<[f64; 2]>,
    /// Node demands in node order, `[M][n_nodes]` (zero for TSP and the depot).
    dem: Vec<f64>,
    capacity: Vec<f64>,
}

/// Batched environment over `M` instances with `N` trajectories each.
///
/// Per-row state lives in flat arrays; rows are updated data-parallel.
/// Finished rows take [`NOOP_ACTION`], emit zero reward and repeat their
/// terminal observation.
#[derive(Debug)]
pub struct VectorEnv {
    kind: ProblemKind,
    n: usize,
    n_nodes: usize,
    trajectories: usize,
    reward_mode: RewardMode,
    statics: Statics,
    rows: Vec<Row>,
    mask: Vec<f64>,
}

fn check_instances(instances: &[Arc<ProblemInstance>], trajectories: usize) -> Result<(ProblemKind, usize), EnvError> {
    let Some(first) = instances.first() else {
        return Err(EnvError::InvalidConfig("at least one instance is required".into()));
    };
    if trajectories == 0 {
        return Err(EnvError::InvalidConfig("trajectories_per_instance must be at least 1".into()));
    }
    let (kind, n) = (first.kind(), first.n());
    if instances.iter().any(|i| i.kind() != kind || i.n() != n) {
        return Err(EnvError::InvalidConfig("all instances must share problem kind and size".into()));
    }
    Ok((kind, n))
}

impl Statics {
    fn build(instances: Vec<Arc<ProblemInstance>>) -> Statics {
        let kind = instances[0].kind();
        let cvrp = kind == ProblemKind::Cvrp;
        let mut coords = Vec::new();
        let mut xy = Vec::new();
        let mut dem = Vec::new();
        let mut capacity = Vec::new();
        let mut depot = Vec::new();
        let mut demand = Vec::new();
        for inst in &instances {
            coords.extend_from_slice(inst.coords());
            xy.extend(inst.node_coords());
            dem.extend((0..inst.num_nodes()).map(|j| inst.node_demand(j)));
            capacity.push(inst.capacity().unwrap_or(0.0));
            if cvrp {
                depot.push(inst.depot().expect("cvrp instance has a depot"));
                demand.extend_from_slice(inst.demand().expect("cvrp instance has demand"));
            }
        }
        Statics {
            instances,
            coords: Arc::new(coords),
            depot: cvrp.then(|| Arc::new(depot)),
            demand: cvrp.then(|| Arc::new(demand)),
            xy,
            dem,
            capacity,
        }
    }
}

impl VectorEnv {
    /// Generates `M` seeded instances and resets.
    pub fn new(config: &VectorEnvConfig) -> Result<Self, EnvError> {
        if config.num_instances == 0 {
            return Err(EnvError::InvalidConfig("num_instances must be at least 1".into()));
        }
        let instances = (0..config.num_instances)
            .map(|i| generate_instance(config.kind, config.n, config.instance_seed(i)).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_instances(instances, config.trajectories_per_instance, config.reward_mode)
    }

    pub fn from_instances(
        instances: Vec<Arc<ProblemInstance>>,
        trajectories: usize,
        reward_mode: RewardMode,
    ) -> Result<Self, EnvError> {
        let (kind, n) = check_instances(&instances, trajectories)?;
        let n_nodes = instances[0].num_nodes();
        let mut env = VectorEnv {
            kind,
            n,
            n_nodes,
            trajectories,
            reward_mode,
            statics: Statics::build(instances),
            rows: Vec::new(),
            mask: Vec::new(),
        };
        env.reset();
        Ok(env)
    }

    /// Builds the environment for `config` and returns the first observation.
    pub fn vector_reset(config: &VectorEnvConfig) -> Result<(Self, Observation), EnvError> {
        let env = Self::new(config)?;
        let obs = env.observation();
        Ok((env, obs))
    }

    /// Replaces the instances (sizes may change) and resets every row.
    pub fn reset_with_instances(
        &mut self,
        instances: Vec<Arc<ProblemInstance>>,
        trajectories: usize,
    ) -> Result<Observation, EnvError> {
        *self = Self::from_instances(instances, trajectories, self.reward_mode)?;
        Ok(self.observation())
    }

    /// Restarts every row on the current instances.
    pub fn reset(&mut self) -> Observation {
        let b = self.batch();
        let nn = self.n_nodes;
        self.rows = (0..b)
            .map(|r| Row {
                visited: NodeSet::new(nn),
                first: 0,
                last: 0,
                steps: 0,
                served: 0,
                load: self.statics.capacity[r / self.trajectories],
                length: 0.0,
                done: false,
                reward: 0.0,
                finished_now: false,
                actions: Vec::with_capacity(2 * self.n + 1),
            })
            .collect();
        self.mask = vec![1.0; b * nn];
        if self.kind == ProblemKind::Cvrp {
            for r in 0..b {
                let s = r / self.trajectories;
                let row_mask = &mut self.mask[r * nn..(r + 1) * nn];
                let load = self.statics.capacity[s];
                row_mask[0] = 0.0;
                for j in 1..nn {
                    let fits = self.statics.dem[s * nn + j] <= load + CAPACITY_TOLERANCE;
                    row_mask[j] = if fits { 1.0 } else { 0.0 };
                }
            }
        }
        self.observation()
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn batch(&self) -> usize {
        self.statics.instances.len() * self.trajectories
    }

    pub fn num_instances(&self) -> usize {
        self.statics.instances.len()
    }

    pub fn trajectories_per_instance(&self) -> usize {
        self.trajectories
    }

    pub fn instances(&self) -> &[Arc<ProblemInstance>] {
        &self.statics.instances
    }

    pub fn instance_of_row(&self, row: usize) -> &Arc<ProblemInstance> {
        &self.statics.instances[row / self.trajectories]
    }

    pub fn dones(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.done).collect()
    }

    pub fn all_finished(&self) -> bool {
        self.rows.iter().all(|r| r.done)
    }

    /// Current path length per row (full tour length once done).
    pub fn lengths(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.length).collect()
    }

    pub fn tours(&self) -> Vec<Tour> {
        self.rows.iter().map(|r| tour_from_actions(self.kind, &r.actions)).collect()
    }

    pub fn vector_step(&mut self, actions: &[usize]) -> Result<VectorStep, EnvError> {
        let b = self.batch();
        if actions.len() != b {
            return Err(EnvError::BatchShape { expected: b, got: actions.len() });
        }
        let nn = self.n_nodes;
        for (row, (&a, r)) in actions.iter().zip(&self.rows).enumerate() {
            if r.done {
                if a != NOOP_ACTION {
                    return Err(EnvError::FinishedRow { row });
                }
            } else if a >= nn || self.mask[row * nn + a] != 1.0 {
                return Err(EnvError::IllegalAction { row, action: a });
            }
        }

        let chunk = (b / (parallel::num_threads() * 4)).max(16);
        let traj = self.trajectories;
        let n = self.n;
        let kind = self.kind;
        let mode = self.reward_mode;
        let statics = &self.statics;
        parallel::for_each_chunk_mut2(&mut self.rows, chunk, &mut self.mask, chunk * nn, |ci, rows, mask| {
            for (k, (row, row_mask)) in rows.iter_mut().zip(mask.chunks_mut(nn)).enumerate() {
                let r = ci * chunk + k;
                let s = r / traj;
                let xy = &statics.xy[s * nn..(s + 1) * nn];
                row.finished_now = false;
                if row.done {
                    row.reward = 0.0;
                    continue;
                }
                let a = actions[r];
                let travelled = match kind {
                    ProblemKind::Tsp => step_tsp(row, row_mask, xy, n, a),
                    ProblemKind::Cvrp => {
                        let dem = &statics.dem[s * nn..(s + 1) * nn];
                        step_cvrp(row, row_mask, xy, dem, statics.capacity[s], n, a)
                    }
                };
                row.length += travelled;
                row.actions.push(a);
                row.finished_now = row.done;
                row.reward = reward_for(mode, travelled, row.length, row.done);
            }
        });

        Ok(VectorStep {
            observation: self.observation(),
            rewards: self.rows.iter().map(|r| r.reward).collect(),
            dones: self.dones(),
            episode_lengths: self.rows.iter().map(|r| r.finished_now.then_some(r.length)).collect(),
        })
    }

    pub fn observation(&self) -> Observation {
        let b = self.batch();
        let nn = self.n_nodes;
        let cvrp = self.kind == ProblemKind::Cvrp;
        let remaining_demand = cvrp.then(|| {
            let mut out = vec![0.0; b * nn];
            for (r, row) in self.rows.iter().enumerate() {
                let s = r / self.trajectories;
                let dem = &self.statics.dem[s * nn..(s + 1) * nn];
                for (j, slot) in out[r * nn..(r + 1) * nn].iter_mut().enumerate() {
                    if !row.visited.contains(j) {
                        *slot = dem[j];
                    }
                }
            }
            out
        });
        Observation {
            kind: self.kind,
            batch: b,
            n_nodes: nn,
            trajectories_per_instance: self.trajectories,
            observations: self.statics.coords.clone(),
            action_mask: self.mask.clone(),
            first_node_idx: (!cvrp).then(|| self.rows.iter().map(|r| r.first).collect()),
            last_node_idx: self.rows.iter().map(|r| r.last).collect(),
            is_initial_action: self.rows.iter().map(|r| r.steps == 0).collect(),
            depot: self.statics.depot.clone(),
            demand: self.statics.demand.clone(),
            current_load: cvrp.then(|| self.rows.iter().map(|r| r.load).collect()),
            remaining_demand,
        }
    }
}

#[inline]
fn step_tsp(row: &mut Row, mask: &mut [f64], xy: &[[f64; 2]], n: usize, a: usize) -> f64 {
    let d = if row.steps == 0 {
        row.first = a;
        0.0
    } else {
        euclid(xy[row.last], xy[a])
    };
    row.visited.insert(a);
    mask[a] = 0.0;
    row.served += 1;
    row.last = a;
    row.steps += 1;
    let mut total = d;
    if row.served == n {
        row.done = true;
        total += euclid(xy[a], xy[row.first]);
    }
    total
}

#[inline]
fn step_cvrp(row: &mut Row, mask: &mut [f64], xy: &[[f64; 2]], dem: &[f64], capacity: f64, n: usize, a: usize) -> f64 {
    let d = euclid(xy[row.last], xy[a]);
    if a == 0 {
        row.load = capacity;
    } else {
        row.visited.insert(a);
        row.served += 1;
        row.load = (row.load - dem[a]).max(0.0);
        if row.steps == 0 {
            row.first = a;
        }
    }
    row.last = a;
    row.steps += 1;
    if a == 0 && row.served == n {
        row.done = true;
    }
    if row.done {
        mask.fill(0.0);
    } else {
        mask[0] = if a != 0 { 1.0 } else { 0.0 };
        for j in 1..mask.len() {
            let ok = !row.visited.contains(j) && dem[j] <= row.load + CAPACITY_TOLERANCE;
            mask[j] = if ok { 1.0 } else { 0.0 };
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::scalar::ScalarLoop;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(kind: ProblemKind, m: usize, n_traj: usize, n: usize) -> VectorEnvConfig {
        VectorEnvConfig { num_instances: m, trajectories_per_instance: n_traj, kind, n, seed: 11, reward_mode: RewardMode::PerStep }
    }

    fn random_actions(obs: &Observation, dones: &[bool], rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..obs.batch)
            .map(|b| {
                if dones[b] {
                    return NOOP_ACTION;
                }
                let allowed: Vec<usize> = (0..obs.n_nodes).filter(|&j| obs.mask_row(b)[j] == 1.0).collect();
                allowed[rng.random_range(0..allowed.len())]
            })
            .collect()
    }

    #[test]
    fn trajectories_share_coordinates() {
        let (_, obs) = VectorEnv::vector_reset(&config(ProblemKind::Tsp, 2, 3, 5)).unwrap();
        let rows = obs.dense_rows();
        for i in 0..2 {
            for t in 1..3 {
                assert_eq!(rows[i * 3].observations, rows[i * 3 + t].observations);
            }
        }
        assert_ne!(rows[0].observations, rows[3].observations);
    }

    #[test]
    fn matches_scalar_loop() {
        for kind in [ProblemKind::Tsp, ProblemKind::Cvrp] {
            let cfg = config(kind, 4, 5, 7);
            let mut venv = VectorEnv::new(&cfg).unwrap();
            let mut sl = ScalarLoop::new(venv.instances(), 5, RewardMode::PerStep);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut obs = venv.observation();
            assert_eq!(obs.dense_rows(), sl.observation().dense_rows());
            let mut dones = vec![false; 20];
            let mut sums = vec![0.0; 20];
            while !venv.all_finished() {
                let actions = random_actions(&obs, &dones, &mut rng);
                let out = venv.vector_step(&actions).unwrap();
                let (sobs, srew, sdone) = sl.step(&actions).unwrap();
                assert_eq!(out.rewards, srew);
                assert_eq!(out.dones, sdone);
                assert_eq!(out.observation.dense_rows(), sobs.dense_rows());
                for (s, r) in sums.iter_mut().zip(&out.rewards) {
                    *s += r;
                }
                obs = out.observation;
                dones = out.dones;
            }
            assert!(sl.all_finished());
            for (b, tour) in venv.tours().iter().enumerate() {
                let len = crate::problems::tour_length(venv.instance_of_row(b), tour).unwrap();
                assert!((sums[b] + len).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn finished_rows_repeat_and_reject_real_actions() {
        let mut venv = VectorEnv::new(&config(ProblemKind::Tsp, 1, 2, 2)).unwrap();
        venv.vector_step(&[0, 1]).unwrap();
        let out = venv.vector_step(&[1, 0]).unwrap();
        assert!(out.dones.iter().all(|&d| d));
        assert!(out.episode_lengths.iter().all(|l| l.is_some()));
        let again = venv.vector_step(&[NOOP_ACTION, NOOP_ACTION]).unwrap();
        assert_eq!(again.rewards, vec![0.0, 0.0]);
        assert_eq!(again.observation, out.observation);
        assert_eq!(again.episode_lengths, vec![None, None]);
        assert!(matches!(venv.vector_step(&[0, NOOP_ACTION]), Err(EnvError::FinishedRow { row: 0 })));
    }

    #[test]
    fn shape_and_mask_errors() {
        let mut venv = VectorEnv::new(&config(ProblemKind::Cvrp, 2, 2, 4)).unwrap();
        assert!(matches!(venv.vector_step(&[1, 1, 1]), Err(EnvError::BatchShape { expected: 4, got: 3 })));
        assert!(matches!(venv.vector_step(&[1, 0, 1, 1]), Err(EnvError::IllegalAction { row: 1, action: 0 })));
        // a failed step leaves the state untouched
        assert!(venv.observation().is_initial_action.iter().all(|&i| i));
    }
}
