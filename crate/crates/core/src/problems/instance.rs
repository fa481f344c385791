use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ProblemError;

/// Which routing problem an instance describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Tsp,
    Cvrp,
}

impl ProblemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Tsp => "tsp",
            ProblemKind::Cvrp => "cvrp",
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = ProblemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tsp" => Ok(ProblemKind::Tsp),
            "cvrp" => Ok(ProblemKind::Cvrp),
            other => Err(ProblemError::InvalidInstance(format!("unknown problem kind `{other}`"))),
        }
    }
}

/// Slack used whenever accumulated demand is compared with a capacity.
pub const CAPACITY_TOLERANCE: f64 = 1e-9;

/// Raw vehicle capacity used when generating CVRP instances of size `n`.
///
/// Raw demands are integers in `1..=9`; they are divided by this value and the
/// capacity is then normalized to 1.
pub fn raw_capacity(n: usize) -> f64 {
    match n {
        0..=10 => 20.0,
        11..=20 => 30.0,
        21..=50 => 40.0,
        _ => 50.0,
    }
}

/// An immutable routing problem.
///
/// Node numbering: for TSP the nodes are `0..n`. For CVRP node `0` is the
/// depot and customers are `1..=n`, so customer `i` lives at `coords[i - 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance", into = "RawInstance")]
pub struct ProblemInstance {
    kind: ProblemKind,
    coords: Vec<[f64; 2]>,
    depot: Option<[f64; 2]>,
    demand: Option<Vec<f64>>,
    capacity: Option<f64>,
    seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawInstance {
    kind: ProblemKind,
    coords: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depot: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    demand: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    capacity: Option<f64>,
    #[serde(default)]
    seed: u64,
}

impl TryFrom<RawInstance> for ProblemInstance {
    type Error = ProblemError;

    fn try_from(raw: RawInstance) -> Result<Self, Self::Error> {
        let inst = ProblemInstance {
            kind: raw.kind,
            coords: raw.coords,
            depot: raw.depot,
            demand: raw.demand,
            capacity: raw.capacity,
            seed: raw.seed,
        };
        inst.check()?;
        Ok(inst)
    }
}

impl From<ProblemInstance> for RawInstance {
    fn from(p: ProblemInstance) -> Self {
        RawInstance {
            kind: p.kind,
            coords: p.coords,
            depot: p.depot,
            demand: p.demand,
            capacity: p.capacity,
            seed: p.seed,
        }
    }
}

fn in_unit_square(p: &[f64; 2]) -> bool {
    p.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c))
}

impl ProblemInstance {
    pub fn tsp(coords: Vec<[f64; 2]>) -> Result<Self, ProblemError> {
        let inst = ProblemInstance {
            kind: ProblemKind::Tsp,
            coords,
            depot: None,
            demand: None,
            capacity: None,
            seed: 0,
        };
        inst.check()?;
        Ok(inst)
    }

    pub fn cvrp(
        depot: [f64; 2],
        coords: Vec<[f64; 2]>,
        demand: Vec<f64>,
        capacity: f64,
    ) -> Result<Self, ProblemError> {
        let inst = ProblemInstance {
            kind: ProblemKind::Cvrp,
            coords,
            depot: Some(depot),
            demand: Some(demand),
            capacity: Some(capacity),
            seed: 0,
        };
        inst.check()?;
        Ok(inst)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn check(&self) -> Result<(), ProblemError> {
        let bad = |m: String| Err(ProblemError::InvalidInstance(m));
        if self.coords.is_empty() {
            return bad("instance has no nodes".into());
        }
        if let Some(i) = self.coords.iter().position(|p| !in_unit_square(p)) {
            return bad(format!("coordinate {i} lies outside the unit square"));
        }
        match self.kind {
            ProblemKind::Tsp => {
                if self.depot.is_some() || self.demand.is_some() || self.capacity.is_some() {
                    return bad("TSP instances carry no depot, demand or capacity".into());
                }
            }
            ProblemKind::Cvrp => {
                let (Some(depot), Some(demand), Some(capacity)) =
                    (self.depot.as_ref(), self.demand.as_ref(), self.capacity)
                else {
                    return bad("CVRP instances need depot, demand and capacity".into());
                };
                if !in_unit_square(depot) {
                    return bad("depot lies outside the unit square".into());
                }
                if demand.len() != self.coords.len() {
                    return bad(format!(
                        "{} demands for {} customers",
                        demand.len(),
                        self.coords.len()
                    ));
                }
                if !(capacity.is_finite() && capacity > 0.0) {
                    return bad(format!("capacity {capacity} must be positive"));
                }
                if let Some(i) = demand
                    .iter()
                    .position(|&d| !(d.is_finite() && d > 0.0 && d <= capacity + CAPACITY_TOLERANCE))
                {
                    return bad(format!("demand of customer {} is not in (0, capacity]", i + 1));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    /// Number of customers (TSP: number of cities).
    pub fn n(&self) -> usize {
        self.coords.len()
    }

    /// Number of addressable nodes, including the CVRP depot.
    pub fn num_nodes(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => self.coords.len(),
            ProblemKind::Cvrp => self.coords.len() + 1,
        }
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn depot(&self) -> Option<[f64; 2]> {
        self.depot
    }

    pub fn demand(&self) -> Option<&[f64]> {
        self.demand.as_deref()
    }

    pub fn capacity(&self) -> Option<f64> {
        self.capacity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Coordinate of a node under the instance's node numbering.
    #[inline]
    pub fn node_coord(&self, node: usize) -> [f64; 2] {
        match self.kind {
            ProblemKind::Tsp => self.coords[node],
            ProblemKind::Cvrp => {
                if node == 0 {
                    self.depot.expect("validated CVRP instance has a depot")
                } else {
                    self.coords[node - 1]
                }
            }
        }
    }

    /// Demand of a node (0 for the depot and for every TSP node).
    #[inline]
    pub fn node_demand(&self, node: usize) -> f64 {
        match (&self.demand, node) {
            (Some(d), i) if i > 0 => d[i - 1],
            _ => 0.0,
        }
    }

    #[inline]
    pub fn dist(&self, a: usize, b: usize) -> f64 {
        euclid(self.node_coord(a), self.node_coord(b))
    }

    /// Node coordinates in node-index order (depot first for CVRP).
    pub fn node_coords(&self) -> Vec<[f64; 2]> {
        (0..self.num_nodes()).map(|i| self.node_coord(i)).collect()
    }

    /// Dense `num_nodes × num_nodes` distance matrix.
    pub fn distance_matrix(&self) -> Vec<f64> {
        let nn = self.num_nodes();
        let pts = self.node_coords();
        let mut m = vec![0.0; nn * nn];
        for i in 0..nn {
            for j in 0..nn {
                m[i * nn + j] = euclid(pts[i], pts[j]);
            }
        }
        m
    }
}

#[inline]
pub fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Draws a random instance: coordinates uniform on the unit square and, for
/// CVRP, integer demands in `1..=9` scaled by [`raw_capacity`].
pub fn generate_instance(kind: ProblemKind, n: usize, seed: u64) -> Result<ProblemInstance, ProblemError> {
    if n < 2 {
        return Err(ProblemError::InvalidSize { n, min: 2 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>()];
    let inst = match kind {
        ProblemKind::Tsp => {
            let coords = (0..n).map(|_| point(&mut rng)).collect();
            ProblemInstance::tsp(coords)?
        }
        ProblemKind::Cvrp => {
            let depot = point(&mut rng);
            let coords = (0..n).map(|_| point(&mut rng)).collect();
            let cap = raw_capacity(n);
            let demand = (0..n)
                .map(|_| rng.random_range(1..=9u32) as f64 / cap)
                .collect();
            ProblemInstance::cvrp(depot, coords, demand, 1.0)?
        }
    };
    Ok(inst.with_seed(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_instance(ProblemKind::Tsp, 4, 17).unwrap();
        let b = generate_instance(ProblemKind::Tsp, 4, 17).unwrap();
        assert_eq!(a, b);
        let c = generate_instance(ProblemKind::Tsp, 4, 18).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cvrp50_demands_are_normalized() {
        for seed in 0..5 {
            let inst = generate_instance(ProblemKind::Cvrp, 50, seed).unwrap();
            assert_eq!(inst.capacity(), Some(1.0));
            for &d in inst.demand().unwrap() {
                assert!(d > 0.0 && d <= 1.0);
                // raw demand recovered exactly: an integer in 1..=9 over 40
                let raw = d * 40.0;
                assert!((raw - raw.round()).abs() < 1e-12);
                assert!((1.0..=9.0).contains(&raw.round()));
            }
        }
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(matches!(
            generate_instance(ProblemKind::Tsp, 1, 0),
            Err(ProblemError::InvalidSize { n: 1, .. })
        ));
    }

    #[test]
    fn tsp_rejects_cvrp_fields_and_bad_coords() {
        assert!(ProblemInstance::tsp(vec![[0.5, 1.5]]).is_err());
        let json = r#"{"kind":"tsp","coords":[[0.1,0.2]],"capacity":1.0}"#;
        assert!(serde_json::from_str::<ProblemInstance>(json).is_err());
    }

    #[test]
    fn cvrp_demand_must_fit_capacity() {
        let r = ProblemInstance::cvrp([0.5, 0.5], vec![[0.1, 0.1]], vec![1.5], 1.0);
        assert!(r.is_err());
    }

    #[test]
    fn node_numbering_puts_depot_first() {
        let inst = ProblemInstance::cvrp([0.5, 0.5], vec![[0.0, 0.0], [1.0, 1.0]], vec![0.2, 0.3], 1.0).unwrap();
        assert_eq!(inst.num_nodes(), 3);
        assert_eq!(inst.node_coord(0), [0.5, 0.5]);
        assert_eq!(inst.node_coord(2), [1.0, 1.0]);
        assert_eq!(inst.node_demand(0), 0.0);
        assert_eq!(inst.node_demand(2), 0.3);
    }
}
