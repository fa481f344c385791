pub mod algo;
pub mod env;
pub mod harness;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod problems;
pub mod search;
pub mod seeds;
