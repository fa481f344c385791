use std::sync::Arc;

use serde::Serialize;

use crate::problems::ProblemKind;

use super::EnvError;

/// Batched observation emitted by the environments.
///
/// Row `b` of the batch belongs to static row `b / trajectories_per_instance`;
/// coordinates, depot and demand are stored once per static row and shared by
/// all of its trajectories. The action mask uses `1.0` for permitted and `0.0`
/// for forbidden actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub kind: ProblemKind,
    pub batch: usize,
    /// Number of selectable nodes per row (CVRP includes the depot).
    pub n_nodes: usize,
    pub trajectories_per_instance: usize,
    /// Node coordinates per static row: TSP cities or CVRP customers.
    pub observations: Arc<Vec<[f64; 2]>>,
    pub action_mask: Vec<f64>,
    /// TSP only: index of the first node visited.
    pub first_node_idx: Option<Vec<usize>>,
    pub last_node_idx: Vec<usize>,
    pub is_initial_action: Vec<bool>,
    pub depot: Option<Arc<Vec<[f64; 2]>>>,
    pub demand: Option<Arc<Vec<f64>>>,
    pub current_load: Option<Vec<f64>>,
    /// CVRP only: per-node demand still to serve, depot first, `[batch][n_nodes]`.
    pub remaining_demand: Option<Vec<f64>>,
}

/// One row of an observation with every field materialized.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DenseRow {
    pub observations: Vec<[f64; 2]>,
    pub action_mask: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_node_idx: Option<usize>,
    pub last_node_idx: usize,
    pub is_initial_action: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depot: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demand: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub current_load: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remaining_demand: Option<Vec<f64>>,
}

impl Observation {
    /// Number of node coordinates per static row.
    pub fn n_coords(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => self.n_nodes,
            ProblemKind::Cvrp => self.n_nodes - 1,
        }
    }

    pub fn num_static_rows(&self) -> usize {
        self.batch / self.trajectories_per_instance.max(1)
    }

    #[inline]
    pub fn static_row(&self, b: usize) -> usize {
        b / self.trajectories_per_instance.max(1)
    }

    pub fn coords_of_row(&self, b: usize) -> &[[f64; 2]] {
        let k = self.n_coords();
        let s = self.static_row(b);
        &self.observations[s * k..(s + 1) * k]
    }

    pub fn mask_row(&self, b: usize) -> &[f64] {
        &self.action_mask[b * self.n_nodes..(b + 1) * self.n_nodes]
    }

    pub fn dense_row(&self, b: usize) -> DenseRow {
        let s = self.static_row(b);
        let k = self.n_coords();
        let nn = self.n_nodes;
        DenseRow {
            observations: self.coords_of_row(b).to_vec(),
            action_mask: self.mask_row(b).to_vec(),
            first_node_idx: self.first_node_idx.as_ref().map(|v| v[b]),
            last_node_idx: self.last_node_idx[b],
            is_initial_action: self.is_initial_action[b],
            depot: self.depot.as_ref().map(|d| d[s]),
            demand: self.demand.as_ref().map(|d| d[s * k..(s + 1) * k].to_vec()),
            current_load: self.current_load.as_ref().map(|l| l[b]),
            remaining_demand: self.remaining_demand.as_ref().map(|r| r[b * nn..(b + 1) * nn].to_vec()),
        }
    }

    /// All rows with static features materialized per row.
    pub fn dense_rows(&self) -> Vec<DenseRow> {
        (0..self.batch).map(|b| self.dense_row(b)).collect()
    }

    /// JSON-lines debug dump, one row per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in self.dense_rows() {
            out.push_str(&serde_json::to_string(&row).expect("observation rows serialize"));
            out.push('\n');
        }
        out
    }
}

/// The model-facing view of an observation.
///
/// The mask convention is inverted relative to the environment: `true` means
/// forbidden. For CVRP the load is exposed as `used_capacity = -current_load`
/// against a vehicle capacity of 0, so `vehicle_capacity - used_capacity`
/// equals the remaining load.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub kind: ProblemKind,
    pub batch: usize,
    pub n_nodes: usize,
    mask: Vec<bool>,
    pub first_a: Vec<usize>,
    current_node: Vec<usize>,
    pub is_initial_action: Vec<bool>,
    pub used_capacity: Vec<f64>,
    pub vehicle_capacity: f64,
    /// Dynamic node features `[batch][n_nodes]` (CVRP remaining demand).
    pub dynamic: Option<Vec<f64>>,
}

fn require<'a, T>(v: &'a Option<T>, key: &'static str) -> Result<&'a T, EnvError> {
    v.as_ref().ok_or(EnvError::Schema(key))
}

/// Wraps an environment observation into the state object the model reads.
pub fn observation_to_model_state(obs: &Observation, kind: ProblemKind) -> Result<ModelState, EnvError> {
    let b = obs.batch;
    let mask = obs.action_mask.iter().map(|&m| (1.0 - m) != 0.0).collect();
    let (first_a, used_capacity, dynamic) = match kind {
        ProblemKind::Tsp => {
            let first = require(&obs.first_node_idx, "first_node_idx")?.clone();
            (first, vec![0.0; b], None)
        }
        ProblemKind::Cvrp => {
            require(&obs.depot, "depot")?;
            require(&obs.demand, "demand")?;
            let load = require(&obs.current_load, "current_load")?;
            let dynamic = require(&obs.remaining_demand, "remaining_demand")?.clone();
            (vec![0; b], load.iter().map(|l| -l).collect(), Some(dynamic))
        }
    };
    Ok(ModelState {
        kind,
        batch: b,
        n_nodes: obs.n_nodes,
        mask,
        first_a,
        current_node: obs.last_node_idx.clone(),
        is_initial_action: obs.is_initial_action.clone(),
        used_capacity,
        vehicle_capacity: 0.0,
        dynamic,
    })
}

impl ModelState {
    /// Builds a state directly from per-row parts (used by search and replay).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kind: ProblemKind,
        n_nodes: usize,
        forbidden: Vec<bool>,
        first_a: Vec<usize>,
        current_node: Vec<usize>,
        is_initial_action: Vec<bool>,
        remaining_load: Vec<f64>,
        dynamic: Option<Vec<f64>>,
    ) -> Self {
        let batch = current_node.len();
        debug_assert_eq!(forbidden.len(), batch * n_nodes);
        ModelState {
            kind,
            batch,
            n_nodes,
            mask: forbidden,
            first_a,
            current_node,
            is_initial_action,
            used_capacity: remaining_load.iter().map(|l| -l).collect(),
            vehicle_capacity: 0.0,
            dynamic,
        }
    }

    /// `true` = forbidden, `[batch][n_nodes]`.
    pub fn get_mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_row(&self, b: usize) -> &[bool] {
        &self.mask[b * self.n_nodes..(b + 1) * self.n_nodes]
    }

    pub fn get_current_node(&self) -> &[usize] {
        &self.current_node
    }

    /// Remaining vehicle load per row (CVRP), zero for TSP.
    pub fn remaining_load(&self, b: usize) -> f64 {
        self.vehicle_capacity - self.used_capacity[b]
    }

    /// Opens node 0 on finished rows so they can pass through the decoder; their outputs are ignored.
    pub fn open_finished_rows(&mut self, dones: &[bool]) {
        let nn = self.n_nodes;
        for (b, &d) in dones.iter().enumerate() {
            if d {
                let row = &mut self.mask[b * nn..(b + 1) * nn];
                row.fill(true);
                row[0] = false;
            }
        }
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> ModelState {
        let nn = self.n_nodes;
        let mut mask = Vec::with_capacity(rows.len() * nn);
        for &r in rows {
            mask.extend_from_slice(self.mask_row(r));
        }
        let pick = |v: &[usize]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        ModelState {
            kind: self.kind,
            batch: rows.len(),
            n_nodes: nn,
            mask,
            first_a: pick(&self.first_a),
            current_node: pick(&self.current_node),
            is_initial_action: rows.iter().map(|&r| self.is_initial_action[r]).collect(),
            used_capacity: rows.iter().map(|&r| self.used_capacity[r]).collect(),
            vehicle_capacity: self.vehicle_capacity,
            dynamic: self.dynamic.as_ref().map(|d| {
                let mut out = Vec::with_capacity(rows.len() * nn);
                for &r in rows {
                    out.extend_from_slice(&d[r * nn..(r + 1) * nn]);
                }
                out
            }),
        }
    }

    /// Concatenates states with the same problem shape.
    pub fn concat(parts: &[ModelState]) -> ModelState {
        let first = &parts[0];
        let mut out = ModelState {
            kind: first.kind,
            batch: 0,
            n_nodes: first.n_nodes,
            mask: Vec::new(),
            first_a: Vec::new(),
            current_node: Vec::new(),
            is_initial_action: Vec::new(),
            used_capacity: Vec::new(),
            vehicle_capacity: first.vehicle_capacity,
            dynamic: first.dynamic.as_ref().map(|_| Vec::new()),
        };
        for p in parts {
            debug_assert_eq!(p.n_nodes, out.n_nodes);
            out.batch += p.batch;
            out.mask.extend_from_slice(&p.mask);
            out.first_a.extend_from_slice(&p.first_a);
            out.current_node.extend_from_slice(&p.current_node);
            out.is_initial_action.extend_from_slice(&p.is_initial_action);
            out.used_capacity.extend_from_slice(&p.used_capacity);
            if let (Some(dst), Some(src)) = (out.dynamic.as_mut(), p.dynamic.as_ref()) {
                dst.extend_from_slice(src);
            }
        }
        out
    }
}
