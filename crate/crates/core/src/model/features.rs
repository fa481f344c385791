use crate::env::Observation;
use crate::problems::{ProblemInstance, ProblemKind};

/// Static node features for `rows` instances of one size.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticFeatures {
    pub kind: ProblemKind,
    pub rows: usize,
    /// Cities (TSP) or customers (CVRP) per instance.
    pub n: usize,
    /// `[rows][n][2]`
    pub coords: Vec<f64>,
    /// CVRP: `[rows][2]`
    pub depot: Option<Vec<f64>>,
    /// CVRP: `[rows][n]`
    pub demand: Option<Vec<f64>>,
}

impl StaticFeatures {
    pub fn from_instances<'a, I>(instances: I) -> Self
    where
        I: IntoIterator<Item = &'a ProblemInstance>,
    {
        let mut iter = instances.into_iter().peekable();
        let first = iter.peek().expect("at least one instance");
        let (kind, n) = (first.kind(), first.n());
        let mut f = StaticFeatures {
            kind,
            rows: 0,
            n,
            coords: Vec::new(),
            depot: (kind == ProblemKind::Cvrp).then(Vec::new),
            demand: (kind == ProblemKind::Cvrp).then(Vec::new),
        };
        for inst in iter {
            assert_eq!((inst.kind(), inst.n()), (kind, n), "instances must share kind and size");
            f.rows += 1;
            f.coords.extend(inst.coords().iter().flat_map(|c| c.iter().copied()));
            if let (Some(dep), Some(dem)) = (f.depot.as_mut(), f.demand.as_mut()) {
                dep.extend_from_slice(&inst.depot().expect("cvrp depot"));
                dem.extend_from_slice(inst.demand().expect("cvrp demand"));
            }
        }
        f
    }

    /// One row per static row of the observation (shared by its trajectories).
    pub fn from_observation(obs: &Observation) -> Self {
        StaticFeatures {
            kind: obs.kind,
            rows: obs.num_static_rows(),
            n: obs.n_coords(),
            coords: obs.observations.iter().flat_map(|c| c.iter().copied()).collect(),
            depot: obs.depot.as_ref().map(|d| d.iter().flat_map(|c| c.iter().copied()).collect()),
            demand: obs.demand.as_ref().map(|d| d.to_vec()),
        }
    }

    pub fn n_nodes(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => self.n,
            ProblemKind::Cvrp => self.n + 1,
        }
    }

    /// Keeps the listed rows in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let n = self.n;
        let pick = |v: &Vec<f64>, w: usize| rows.iter().flat_map(|&r| v[r * w..(r + 1) * w].iter().copied()).collect();
        StaticFeatures {
            kind: self.kind,
            rows: rows.len(),
            n,
            coords: pick(&self.coords, 2 * n),
            depot: self.depot.as_ref().map(|d| pick(d, 2)),
            demand: self.demand.as_ref().map(|d| pick(d, n)),
        }
    }
}
