//! Amortized causal discovery through a skeleton–order factorization of DAGs.
//!
//! A DAG is represented as an undirected skeleton oriented by a node order.
//! The encoder maps a tabular dataset to independent Bernoulli edge
//! probabilities for the skeleton and Plackett–Luce scores for the order,
//! which together define a distribution supported only on acyclic graphs.

pub mod autodiff;
pub mod checks;
pub mod dist;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
