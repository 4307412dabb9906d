//! Distributed economic model predictive control for agents coupled through
//! their stage costs, coordinated by a mutating priority hierarchy.
//!
//! Agents solve local problems level by level; after each level they compare
//! the cost they planned for against the cost they actually get once their
//! neighbors have moved, and a conflicted agent rolls back and redraws its
//! level at random.

// `!(x > 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod coordinator;
pub mod error;
pub mod experiments;
pub mod hierarchy;
pub mod model;
pub mod netsim;
pub mod objective;
pub mod solver;
pub mod topology;

pub use error::{Error, Result};

/// Zero-based agent index.
pub type AgentId = usize;
