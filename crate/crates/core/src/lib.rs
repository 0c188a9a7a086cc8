//! Tabular performative reinforcement learning.
//!
//! The environment reacts to the deployed policy through a [`response::ResponseModel`].
//! Repeated retraining (exact regularized optimization, projected gradient
//! ascent, or a finite-sample saddle-point learner) searches for a
//! performatively stable occupancy measure.

// `!(x > 0.0)` style guards deliberately reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub(crate) mod linalg;

pub mod mdp;
pub mod finite_sample;
pub mod experiment;
pub mod gridworld;
pub mod response;
pub mod retraining;
pub mod solver;
pub mod synthetic;

pub use mdp::{
    bellman_flow_residual, occupancy_from_policy, optimal_unregularized, policy_from_occupancy,
    validate_mdp, value_function, DualVector, MdpError, OccupancyMeasure, Policy, TabularMdp,
};
pub use response::{ResponseError, ResponseModel, Sensitivity};
