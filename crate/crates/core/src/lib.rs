//! Scheduling and simulation of cloud-hosted centralized NMPC controllers for
//! a fleet of UAVs.
//!
//! The crate is organised around the closed loop it simulates:
//! [`dynamics`] and [`controller`] hold the vehicle model and the optimizer,
//! [`schedmech`] turns mission state into deployment actions, [`cluster`]
//! places and accounts controller pods, [`transport`] moves frames between
//! agents and the cloud, [`fleet`] flies the agents and [`harness`] runs
//! scenarios end to end.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod cluster;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod fleet;
pub mod harness;
pub mod schedmech;
pub mod transport;

pub use error::{Error, Result};

/// Fleet-wide agent identifier, carried on the wire as a 16-bit integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u16);

impl AgentId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u16> for AgentId {
    fn from(v: u16) -> Self {
        AgentId(v)
    }
}
