//! Federated recommendation with clustered gradient sharing.
//!
//! Clients train a matrix-factorization recommender on their own
//! interactions. Instead of full item-embedding gradients, both sides exchange
//! a small set of shared centroid updates ("actions") plus a group index per
//! item row, with the number of groups adapted each round by a
//! cluster-and-split procedure.

pub mod actions;
pub mod baselines;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod federation;
pub mod model;
pub mod seeding;
