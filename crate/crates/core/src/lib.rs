//! Simulator for real-time federated evolutionary neural architecture search.
//!
//! A weight-sharing supernet holds every candidate architecture. Each NSGA-II
//! individual is a choice key selecting one path through it; every generation
//! each individual's sub-model is trained on its own disjoint group of
//! clients, the uploads are merged back into the master by fill-in
//! aggregation, and all parents and offspring are re-evaluated on the
//! clients' local test data. One generation is one communication round.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod fed;
pub mod metrics;
pub mod nn;
pub mod nsga2;
pub mod rng;
pub mod runner;
pub mod supernet;

pub use error::{Error, Result};
