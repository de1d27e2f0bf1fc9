//! Multi-model NMPC motion planning for a simulated mobile manipulator, with a
//! DQN policy that selects the robot model, constraints and target per action.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod action;
pub mod config;
pub mod drl;
pub mod env;
pub mod error;
pub mod eval;
pub mod export;
pub mod geometry;
pub mod pipeline;
pub mod robot;
pub mod slq;
pub mod train;

pub use error::{Error, Result};
