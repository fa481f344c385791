//! Routing problem instances, tours, objective evaluation and reference solvers.

mod exact;
mod heuristic;
mod instance;
pub mod io;
mod tour;

pub use exact::{exact_optimal, within_exact_cap, CVRP_EXACT_CAP, TSP_EXACT_CAP};
pub use heuristic::heuristic_baseline;
pub use instance::{euclid, generate_instance, raw_capacity, ProblemInstance, ProblemKind, CAPACITY_TOLERANCE};
pub use tour::{path_length, tour_length, validate_tour, Tour, ValidityReport, Violation};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("instance size {n} is below the minimum of {min}")]
    InvalidSize { n: usize, min: usize },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("infeasible tour: {0}")]
    Infeasible(ValidityReport),
    #[error("instance with {n} customers exceeds the exact-solver cap of {cap}")]
    SizeCap { n: usize, cap: usize },
    #[error("i/o error: {0}")]
    Io(String),
}
