//! Federated model-agnostic meta-learning with gradient-based membership
//! inference attacks on task learners' support and query sets, Gaussian
//! noise defenses, and an executable check that the shared gradient does
//! not pin down a task's data.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod harness;
pub mod maml;
pub mod numcore;
pub mod theory;

pub use error::{Error, Result};
