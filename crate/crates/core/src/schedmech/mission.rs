use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::CnmpcArgs;
use crate::dynamics::AgentState;
use crate::error::{Error, Result};
use crate::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissionCommand {
    #[default]
    TakeOff,
    Track,
    SafetyLand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub at: f64,
    pub position: [f64; 3],
}

/// Formation slots: controller group `g`, slot `s` sits at
/// `origin + (g·group_pitch + (s mod columns)·spacing, (s div columns)·spacing, altitude)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Formation {
    pub origin: [f64; 2],
    pub spacing: f64,
    pub group_pitch: f64,
    pub columns: usize,
    pub altitude: f64,
}

impl Default for Formation {
    fn default() -> Self {
        Formation {
            origin: [0.0, 0.0],
            spacing: 1.0,
            group_pitch: 10.0,
            columns: 4,
            altitude: 2.0,
        }
    }
}

impl Formation {
    pub fn slot_position(&self, group: usize, slot: usize) -> Vector3<f64> {
        let columns = self.columns.max(1);
        Vector3::new(
            self.origin[0] + group as f64 * self.group_pitch + (slot % columns) as f64 * self.spacing,
            self.origin[1] + (slot / columns) as f64 * self.spacing,
            self.altitude,
        )
    }
}

/// Per-agent reference trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    Hold {
        position: [f64; 3],
    },
    /// Piecewise-linear in time between timed waypoints, held outside their span.
    Waypoints {
        points: Vec<Waypoint>,
    },
    Circle {
        center: [f64; 3],
        radius: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Slot in the formation of the controller the agent is assigned to.
    Formation(Formation),
}

impl Default for Reference {
    fn default() -> Self {
        Reference::Formation(Formation::default())
    }
}

impl Reference {
    pub fn validate(&self) -> Result<()> {
        match self {
            Reference::Waypoints { points } => {
                if points.is_empty() {
                    return Err(Error::contract("waypoint reference needs at least one point"));
                }
                if points.windows(2).any(|w| !(w[0].at < w[1].at)) {
                    return Err(Error::contract("waypoint times must be strictly increasing"));
                }
            }
            Reference::Circle { radius, period, .. } => {
                if !(*radius >= 0.0 && *period > 0.0) {
                    return Err(Error::contract("circle needs radius >= 0 and period > 0"));
                }
            }
            Reference::Formation(f) => {
                if !(f.spacing > 0.0) || f.columns == 0 {
                    return Err(Error::contract("formation needs positive spacing and columns"));
                }
            }
            Reference::Hold { .. } => {}
        }
        Ok(())
    }

    /// Position and velocity at time `t`. `slot` is the agent's (group, slot)
    /// assignment, needed only by formations.
    pub fn sample(&self, t: f64, slot: Option<(usize, usize)>) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            Reference::Hold { position } => (Vector3::from(*position), Vector3::zeros()),
            Reference::Waypoints { points } => sample_waypoints(points, t),
            Reference::Circle {
                center,
                radius,
                period,
                phase,
            } => {
                let w = TAU / period;
                let (s, c) = (w * t + phase).sin_cos();
                (
                    Vector3::from(*center) + Vector3::new(radius * c, radius * s, 0.0),
                    Vector3::new(-radius * w * s, radius * w * c, 0.0),
                )
            }
            Reference::Formation(f) => {
                let (g, s) = slot.unwrap_or((0, 0));
                (f.slot_position(g, s), Vector3::zeros())
            }
        }
    }
}

fn sample_waypoints(points: &[Waypoint], t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let first = &points[0];
    if t <= first.at || points.len() == 1 {
        return (Vector3::from(first.position), Vector3::zeros());
    }
    for w in points.windows(2) {
        if t < w[1].at {
            let (p0, p1) = (Vector3::from(w[0].position), Vector3::from(w[1].position));
            let span = w[1].at - w[0].at;
            let velocity = (p1 - p0) / span;
            return (p0 + velocity * (t - w[0].at), velocity);
        }
    }
    (Vector3::from(points[points.len() - 1].position), Vector3::zeros())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TakeoffProfile {
    /// m.
    pub altitude: f64,
    /// m/s.
    pub climb_rate: f64,
    /// m/s.
    pub land_rate: f64,
}

impl Default for TakeoffProfile {
    fn default() -> Self {
        TakeoffProfile {
            altitude: 2.0,
            climb_rate: 0.5,
            land_rate: 0.5,
        }
    }
}

/// What the planner wants: which agents fly, where, and under which command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionState {
    pub agents: BTreeSet<AgentId>,
    pub command: MissionCommand,
    /// Time the current command was issued.
    pub command_since: f64,
    pub default_reference: Reference,
    pub references: BTreeMap<AgentId, Reference>,
    /// (group, slot) of each agent in the current partition.
    pub assignments: BTreeMap<AgentId, (usize, usize)>,
    pub cnmpc_args: CnmpcArgs,
    pub takeoff: TakeoffProfile,
}

impl Default for MissionState {
    fn default() -> Self {
        MissionState {
            agents: BTreeSet::new(),
            command: MissionCommand::TakeOff,
            command_since: 0.0,
            default_reference: Reference::default(),
            references: BTreeMap::new(),
            assignments: BTreeMap::new(),
            cnmpc_args: CnmpcArgs::default(),
            takeoff: TakeoffProfile::default(),
        }
    }
}

impl MissionState {
    pub fn desired_agents(&self) -> usize {
        self.agents.len()
    }

    /// Sets the fleet to agents `0..n`.
    pub fn set_desired_agents(&mut self, n: usize) {
        self.agents = (0..n as u16).map(AgentId).collect();
    }

    pub fn join(&mut self, ids: &[AgentId]) -> Result<()> {
        if let Some(dup) = ids.iter().find(|id| self.agents.contains(id)) {
            return Err(Error::Fleet(format!("agent {dup} already joined")));
        }
        self.agents.extend(ids.iter().copied());
        Ok(())
    }

    pub fn leave(&mut self, ids: &[AgentId]) -> Result<()> {
        if let Some(missing) = ids.iter().find(|id| !self.agents.contains(id)) {
            return Err(Error::Fleet(format!("agent {missing} is not in the fleet")));
        }
        for id in ids {
            self.agents.remove(id);
            self.assignments.remove(id);
        }
        Ok(())
    }

    pub fn set_command(&mut self, command: MissionCommand, now: f64) {
        if command != self.command {
            self.command = command;
            self.command_since = now;
        }
    }

    pub fn reference_for(&self, agent: AgentId) -> &Reference {
        self.references.get(&agent).unwrap_or(&self.default_reference)
    }

    /// Reference state of `agent` at time `t`, including command overrides.
    pub fn reference_state(&self, agent: AgentId, t: f64) -> Result<AgentState> {
        if !self.agents.contains(&agent) {
            return Err(Error::contract(format!("agent {agent} has no reference")));
        }
        let reference = self.reference_for(agent);
        let slot = self.assignments.get(&agent).copied();
        let (mut position, mut velocity) = reference.sample(t, slot);
        let elapsed = (t - self.command_since).max(0.0);
        match self.command {
            MissionCommand::TakeOff => {
                let profile = &self.takeoff;
                let z = profile.altitude.min(profile.climb_rate * elapsed);
                velocity.z = if z < profile.altitude { profile.climb_rate } else { 0.0 };
                position.z = z;
            }
            MissionCommand::SafetyLand => {
                let (start, _) = reference.sample(self.command_since, slot);
                let z = (start.z - self.takeoff.land_rate * elapsed).max(0.0);
                velocity = Vector3::zeros();
                if z > 0.0 {
                    velocity.z = -self.takeoff.land_rate;
                }
                position = Vector3::new(start.x, start.y, z);
            }
            MissionCommand::Track => {}
        }
        let mut state = AgentState::at_rest(position);
        state.velocity = velocity;
        state.timestamp = t;
        Ok(state)
    }
}

/// Reference samples for one agent at `now + j·T`, `j = 0..=horizon_steps`.
pub fn reference_window(
    mission: &MissionState,
    agent: AgentId,
    now: f64,
    horizon_steps: usize,
    sampling_time: f64,
) -> Result<Vec<AgentState>> {
    (0..=horizon_steps)
        .map(|j| mission.reference_state(agent, now + j as f64 * sampling_time))
        .collect()
}
