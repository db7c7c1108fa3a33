//! Multi-slice radio resource allocation by ADMM decomposition.
//!
//! A coordinator splits the sum-utility problem into a per-slot capacity
//! projection (the master) and one allocation problem per slice (the
//! slaves). Slaves are solved either by a model-aware optimizer or by a
//! DDPG agent trained on the slice's own MDP.

pub mod check;
pub mod coordinator;
pub mod ddpg;
pub mod error;
pub mod harness;
pub mod io;
pub mod master;
pub mod model;
pub mod nn;
pub mod oracle;

pub use error::{Error, Result};
