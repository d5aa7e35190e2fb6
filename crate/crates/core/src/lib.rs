//! Deterministic closed-loop simulator for runtime perception attacks on a
//! camera-based adaptive cruise control stack, with the full safety
//! intervention chain (emergency braking, driver model, command checker and
//! dispatcher) and an experiment harness.

pub mod attack;
pub mod config;
pub mod control;
pub mod defense;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod perception;
pub mod safety;
pub mod sensor;
pub mod world;

pub use error::{Result, SimError};
