//! Simulated agents: dynamics integration under zero-order hold, odometry
//! publication, command ingestion and the onboard take-off and fallback logic.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, AgentState, ControlInput, ModelParams, GRAVITY};
use crate::error::{Error, Result};
use crate::transport::{HighLevelCode, WireMessage};
use crate::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    Grounded,
    TakeOff,
    Tracking,
    Fallback,
    Landed,
    /// The integrator diverged; the agent is frozen.
    Failed,
}

impl AgentMode {
    pub fn is_airborne(self) -> bool {
        matches!(self, AgentMode::TakeOff | AgentMode::Tracking | AgentMode::Fallback)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual,
    Realtime,
}

/// Simulation time in integer microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimClock {
    now_us: u64,
    physics_dt_us: u64,
    pub mode: ClockMode,
}

impl SimClock {
    pub fn new(physics_dt: f64, mode: ClockMode) -> Result<Self> {
        let physics_dt_us = (physics_dt * 1e6).round() as u64;
        if physics_dt_us == 0 {
            return Err(Error::contract("physics_dt must be at least one microsecond"));
        }
        Ok(SimClock {
            now_us: 0,
            physics_dt_us,
            mode,
        })
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    pub fn now(&self) -> f64 {
        self.now_us as f64 * 1e-6
    }

    pub fn physics_dt_us(&self) -> u64 {
        self.physics_dt_us
    }

    pub fn physics_dt(&self) -> f64 {
        self.physics_dt_us as f64 * 1e-6
    }

    pub fn advance(&mut self) -> u64 {
        self.now_us += self.physics_dt_us;
        self.now_us
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetConfig {
    /// Seconds.
    pub physics_dt: f64,
    /// Hz.
    pub odom_rate: f64,
    /// Seconds without a fresh command before fallback.
    pub command_timeout: f64,
    /// Seconds of position hold before the fallback descent.
    pub fallback_hover: f64,
    /// m/s.
    pub land_rate: f64,
    /// m.
    pub takeoff_altitude: f64,
    /// m/s.
    pub climb_rate: f64,
    /// Spawn grid pitch, m.
    pub spawn_pitch: f64,
    pub spawn_columns: u16,
    /// y of the first spawn row, m.
    pub spawn_row_y: f64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig {
            physics_dt: 0.01,
            odom_rate: 50.0,
            command_timeout: 0.5,
            fallback_hover: 1.0,
            land_rate: 0.5,
            takeoff_altitude: 2.0,
            climb_rate: 0.5,
            spawn_pitch: 2.0,
            spawn_columns: 8,
            spawn_row_y: 6.0,
        }
    }
}

impl FleetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.physics_dt,
            self.odom_rate,
            self.command_timeout,
            self.land_rate,
            self.takeoff_altitude,
            self.climb_rate,
            self.spawn_pitch,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.spawn_columns == 0 {
            return Err(Error::contract("fleet timing, rates, altitude and spawn pitch must be positive"));
        }
        if !(self.fallback_hover >= 0.0) {
            return Err(Error::contract("fallback_hover must be non-negative"));
        }
        Ok(())
    }

    /// Ground position for an agent, on a grid away from the formation area.
    pub fn spawn_position(&self, agent: AgentId) -> Vector3<f64> {
        let (col, row) = (agent.0 % self.spawn_columns, agent.0 / self.spawn_columns);
        Vector3::new(
            self.spawn_pitch * col as f64,
            self.spawn_row_y + self.spawn_pitch * row as f64,
            0.0,
        )
    }

    fn odom_period_us(&self) -> u64 {
        ((1e6 / self.odom_rate).round() as u64).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeChange {
    pub time: f64,
    pub agent: AgentId,
    pub from: AgentMode,
    pub to: AgentMode,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSim {
    pub id: AgentId,
    pub state: AgentState,
    pub applied_command: ControlInput,
    /// Seq of the newest command seen, applied or not.
    pub last_seq: Option<u32>,
    /// Seconds; when the applied command last changed (or tracking began).
    pub last_command_stamp: f64,
    pub mode: AgentMode,
    pub params: ModelParams,
    mode_since: f64,
    /// Position held by the onboard controller.
    hold_point: Vector3<f64>,
    odom_seq: u32,
    next_odom_us: u64,
    stale_commands: u64,
}

impl AgentSim {
    pub fn new(id: AgentId, position: Vector3<f64>, params: ModelParams, now_us: u64) -> Self {
        let mut state = AgentState::at_rest(position);
        state.timestamp = now_us as f64 * 1e-6;
        AgentSim {
            id,
            state,
            applied_command: dynamics::hover_input(&params),
            last_seq: None,
            last_command_stamp: state.timestamp,
            mode: AgentMode::Grounded,
            params,
            mode_since: state.timestamp,
            hold_point: position,
            odom_seq: 0,
            next_odom_us: now_us,
            stale_commands: 0,
        }
    }

    pub fn stale_commands(&self) -> u64 {
        self.stale_commands
    }

    fn set_mode(&mut self, to: AgentMode, now: f64, reason: &str) -> ModeChange {
        let change = ModeChange {
            time: now,
            agent: self.id,
            from: self.mode,
            to,
            reason: reason.to_string(),
        };
        self.mode = to;
        self.mode_since = now;
        match to {
            AgentMode::TakeOff | AgentMode::Fallback => self.hold_point = self.state.position,
            AgentMode::Tracking => self.last_command_stamp = now,
            AgentMode::Grounded | AgentMode::Landed => self.settle_on_ground(),
            AgentMode::Failed => {}
        }
        change
    }

    fn settle_on_ground(&mut self) {
        self.state.position.z = 0.0;
        self.state.velocity = Vector3::zeros();
        self.state.orientation = Vector3::zeros();
        self.applied_command = ControlInput::new(0.0, 0.0, 0.0);
    }

    /// Applies a command frame when its seq is newer than any seen. Returns
    /// whether the frame was fresh.
    pub fn ingest_command(&mut self, message: &WireMessage, now: f64) -> bool {
        let (Some(seq), Some(input)) = (message.seq(), message.to_input()) else {
            return false;
        };
        if self.last_seq.is_some_and(|last| seq <= last) {
            self.stale_commands += 1;
            return false;
        }
        self.last_seq = Some(seq);
        if self.mode == AgentMode::Tracking {
            self.applied_command = input;
            self.last_command_stamp = now;
        }
        true
    }

    /// Handles a high-level directive.
    pub fn ingest_high_level(&mut self, code: HighLevelCode, now: f64) -> Option<ModeChange> {
        match (code, self.mode) {
            (HighLevelCode::TakeOff, AgentMode::Grounded | AgentMode::Landed) => {
                Some(self.set_mode(AgentMode::TakeOff, now, "take-off command"))
            }
            (HighLevelCode::SafetyLand, AgentMode::TakeOff | AgentMode::Tracking) => {
                Some(self.set_mode(AgentMode::Fallback, now, "safety-land directive"))
            }
            _ => None,
        }
    }

    /// Odometry frame if one is due at `now_us`.
    pub fn emit_odometry(&mut self, now_us: u64, period_us: u64) -> Option<WireMessage> {
        if now_us < self.next_odom_us || self.mode == AgentMode::Failed {
            return None;
        }
        let message = WireMessage::odometry(self.id, self.odom_seq, now_us, &self.state);
        self.odom_seq = self.odom_seq.wrapping_add(1);
        self.next_odom_us = now_us + period_us;
        Some(message)
    }

    /// Fallback on command loss.
    pub fn check_timeout(&mut self, now: f64, timeout: f64) -> Option<ModeChange> {
        (self.mode == AgentMode::Tracking && now - self.last_command_stamp > timeout)
            .then(|| self.set_mode(AgentMode::Fallback, now, "command timeout"))
    }

    /// Input from the onboard position-hold loop toward `target`/`target_velocity`.
    fn hold_input(&self, target: Vector3<f64>, target_velocity: Vector3<f64>) -> ControlInput {
        const KP_XY: f64 = 1.0;
        const KD_XY: f64 = 1.8;
        const KP_Z: f64 = 4.0;
        const KD_Z: f64 = 4.0;
        const MAX_TILT: f64 = 0.3;
        let e = target - self.state.position;
        let de = target_velocity - self.state.velocity;
        let ax = KP_XY * e.x + KD_XY * de.x;
        let ay = KP_XY * e.y + KD_XY * de.y;
        let az = KP_Z * e.z + KD_Z * de.z;
        let pitch = (ax / GRAVITY).atan().clamp(-MAX_TILT, MAX_TILT) / self.params.pitch_gain;
        let roll = (-ay / GRAVITY).atan().clamp(-MAX_TILT, MAX_TILT) / self.params.roll_gain;
        let tilt = self.state.roll().cos() * self.state.pitch().cos();
        let thrust = (self.params.mass * (GRAVITY + az) / tilt.max(0.5)).clamp(0.0, 2.0 * self.params.mass * GRAVITY);
        ControlInput::new(roll, pitch, thrust)
    }

    /// Advances one physics step. Returns a mode change if one happened.
    pub fn sim_step(&mut self, now: f64, dt: f64, config: &FleetConfig) -> Option<ModeChange> {
        let elapsed = now - self.mode_since;
        let mut change = None;
        let input = match self.mode {
            AgentMode::Grounded | AgentMode::Landed | AgentMode::Failed => return None,
            AgentMode::Tracking => self.applied_command,
            AgentMode::TakeOff => {
                let climb = config.climb_rate * elapsed;
                let (z, vz) = if climb < config.takeoff_altitude {
                    (climb, config.climb_rate)
                } else {
                    (config.takeoff_altitude, 0.0)
                };
                let target = Vector3::new(self.hold_point.x, self.hold_point.y, z);
                self.hold_input(target, Vector3::new(0.0, 0.0, vz))
            }
            AgentMode::Fallback => {
                let descent = (elapsed - config.fallback_hover).max(0.0) * config.land_rate;
                let z = self.hold_point.z - descent;
                let (z, vz) = if z > 0.0 { (z, if descent > 0.0 { -config.land_rate } else { 0.0 }) } else { (0.0, 0.0) };
                let target = Vector3::new(self.hold_point.x, self.hold_point.y, z);
                self.hold_input(target, Vector3::new(0.0, 0.0, vz))
            }
        };
        self.applied_command = input;
        match dynamics::step(&self.state, &input, &self.params, dt) {
            Ok(next) => self.state = next,
            Err(_) => return Some(self.set_mode(AgentMode::Failed, now, "model divergence")),
        }
        if self.state.position.z < 0.0 {
            self.state.position.z = 0.0;
            self.state.velocity.z = self.state.velocity.z.max(0.0);
        }
        let t = now + dt;
        match self.mode {
            AgentMode::TakeOff => {
                let at_altitude = (self.state.position.z - config.takeoff_altitude).abs() < 0.05
                    && self.state.velocity.norm() < 0.1;
                if at_altitude {
                    change = Some(self.set_mode(AgentMode::Tracking, t, "reached take-off altitude"));
                }
            }
            AgentMode::Fallback => {
                let ramp_done = self.hold_point.z - (t - self.mode_since - config.fallback_hover).max(0.0) * config.land_rate <= 0.0;
                if ramp_done && self.state.position.z < 0.02 {
                    change = Some(self.set_mode(AgentMode::Landed, t, "touched down"));
                }
            }
            _ => {}
        }
        change
    }
}

/// All simulated agents, keyed by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fleet {
    pub config: FleetConfig,
    pub params: ModelParams,
    agents: BTreeMap<AgentId, AgentSim>,
    spawn_overrides: BTreeMap<AgentId, Vector3<f64>>,
}

impl Fleet {
    pub fn new(config: FleetConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        Ok(Fleet {
            config,
            params,
            agents: BTreeMap::new(),
            spawn_overrides: BTreeMap::new(),
        })
    }

    /// Spawns `agent` at `position` instead of its grid point.
    pub fn set_spawn(&mut self, agent: AgentId, position: Vector3<f64>) {
        self.spawn_overrides.insert(agent, position);
    }

    pub fn spawn_position(&self, agent: AgentId) -> Vector3<f64> {
        self.spawn_overrides.get(&agent).copied().unwrap_or_else(|| self.config.spawn_position(agent))
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentSim> {
        self.agents.values()
    }

    pub fn agent(&self, id: AgentId) -> Option<&AgentSim> {
        self.agents.get(&id)
    }

    pub fn agent_mut(&mut self, id: AgentId) -> Option<&mut AgentSim> {
        self.agents.get_mut(&id)
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    /// Adds grounded agents at their spawn positions. Rejects the whole batch
    /// if any id is already present or repeated.
    pub fn join(&mut self, ids: &[AgentId], now_us: u64) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = ids.iter().find(|id| self.agents.contains_key(id) || !seen.insert(**id)) {
            return Err(Error::Fleet(format!("agent {dup} already in the fleet")));
        }
        for &id in ids {
            let agent = AgentSim::new(id, self.spawn_position(id), self.params, now_us);
            self.agents.insert(id, agent);
        }
        Ok(())
    }

    pub fn leave(&mut self, ids: &[AgentId]) -> Result<()> {
        if let Some(missing) = ids.iter().find(|id| !self.agents.contains_key(id)) {
            return Err(Error::Fleet(format!("agent {missing} is not in the fleet")));
        }
        for id in ids {
            self.agents.remove(id);
        }
        Ok(())
    }

    /// Odometry frames due at `now_us`, in agent order.
    pub fn emit_odometry(&mut self, now_us: u64) -> Vec<WireMessage> {
        let period = self.config.odom_period_us();
        self.agents.values_mut().filter_map(|a| a.emit_odometry(now_us, period)).collect()
    }

    pub fn check_timeouts(&mut self, now: f64) -> Vec<ModeChange> {
        let timeout = self.config.command_timeout;
        self.agents.values_mut().filter_map(|a| a.check_timeout(now, timeout)).collect()
    }

    pub fn sim_step(&mut self, now: f64) -> Vec<ModeChange> {
        let (dt, config) = (self.config.physics_dt, self.config);
        self.agents.values_mut().filter_map(|a| a.sim_step(now, dt, &config)).collect()
    }

    /// Routes an inbound downlink frame to its agent.
    pub fn deliver(&mut self, message: &WireMessage, now: f64) -> Option<ModeChange> {
        let agent = self.agents.get_mut(&message.agent_id())?;
        match message {
            WireMessage::Command { .. } => {
                agent.ingest_command(message, now);
                None
            }
            WireMessage::HighLevel { code, .. } => agent.ingest_high_level(*code, now),
            WireMessage::Odometry { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fleet() -> Fleet {
        Fleet::new(FleetConfig::default(), ModelParams::default()).unwrap()
    }

    fn airborne(mode: AgentMode, z: f64) -> AgentSim {
        let mut a = AgentSim::new(AgentId(0), Vector3::new(0.0, 0.0, z), ModelParams::default(), 0);
        a.mode = mode;
        a.hold_point = a.state.position;
        a.applied_command = dynamics::hover_input(&a.params);
        a
    }

    #[test]
    fn grounded_agent_stays_put() {
        let mut f = fleet();
        f.join(&[AgentId(3)], 0).unwrap();
        let before = f.agent(AgentId(3)).unwrap().state;
        for k in 0..100 {
            f.sim_step(k as f64 * 0.01);
        }
        assert_eq!(f.agent(AgentId(3)).unwrap().state, before);
    }

    #[test]
    fn tracking_hover_is_equilibrium() {
        let mut a = airborne(AgentMode::Tracking, 2.0);
        let before = a.state.position;
        for k in 0..100 {
            a.sim_step(k as f64 * 0.01, 0.01, &FleetConfig::default());
        }
        assert!((a.state.position - before).norm() < 1e-9);
    }

    #[test]
    fn fallback_lands_after_hover_and_descent() {
        let config = FleetConfig::default();
        let mut a = airborne(AgentMode::Tracking, 2.0);
        a.set_mode(AgentMode::Fallback, 0.0, "test");
        let mut landed_at = None;
        for k in 0..1000 {
            let t = k as f64 * 0.01;
            if let Some(c) = a.sim_step(t, 0.01, &config) {
                assert_eq!(c.to, AgentMode::Landed);
                landed_at = Some(c.time);
                break;
            }
        }
        let t = landed_at.expect("agent lands");
        assert!((t - 5.0).abs() < 0.3, "landed at {t}");
        assert_eq!(a.state.velocity, Vector3::zeros());
    }

    #[test]
    fn takeoff_climbs_then_tracks() {
        let config = FleetConfig::default();
        let mut f = fleet();
        f.join(&[AgentId(1)], 0).unwrap();
        let spawn = config.spawn_position(AgentId(1));
        f.deliver(&WireMessage::HighLevel { agent_id: AgentId(1), code: HighLevelCode::TakeOff }, 0.0);
        let mut tracking_at = None;
        for k in 0..1500 {
            let changes = f.sim_step(k as f64 * 0.01);
            if let Some(c) = changes.first() {
                tracking_at = Some(c.time);
                break;
            }
        }
        let t = tracking_at.expect("take-off completes");
        assert!(t > 4.0 && t < 8.0, "tracking at {t}");
        let a = f.agent(AgentId(1)).unwrap();
        assert!((a.state.position.xy() - spawn.xy()).norm() < 1e-6);
        assert_eq!(a.mode, AgentMode::Tracking);
    }

    #[test]
    fn odometry_at_configured_rate() {
        let mut f = fleet();
        f.join(&[AgentId(0)], 0).unwrap();
        let mut frames = Vec::new();
        for k in 0..100u64 {
            frames.extend(f.emit_odometry(k * 10_000));
        }
        assert_eq!(frames.len(), 50);
        let seqs: Vec<u32> = frames.iter().map(|m| m.seq().unwrap()).collect();
        assert_eq!(seqs, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn stale_commands_ignored() {
        let mut a = airborne(AgentMode::Tracking, 2.0);
        let newer = WireMessage::command(AgentId(0), 3, 0, &ControlInput::new(0.1, 0.0, 9.0));
        let older = WireMessage::command(AgentId(0), 2, 0, &ControlInput::new(-0.1, 0.0, 9.0));
        assert!(a.ingest_command(&newer, 0.1));
        assert!(!a.ingest_command(&older, 0.2));
        assert_eq!(a.applied_command.roll_ref, 0.1);
        assert_eq!(a.stale_commands(), 1);
    }

    #[test]
    fn command_loss_triggers_fallback() {
        let config = FleetConfig::default();
        let mut a = airborne(AgentMode::Tracking, 2.0);
        a.last_command_stamp = 0.0;
        let mut entered = None;
        for k in 1..200 {
            let t = k as f64 * 0.01;
            if a.check_timeout(t, config.command_timeout).is_some() {
                entered = Some(t);
                break;
            }
        }
        let t = entered.unwrap();
        assert!(t > 0.5 && t <= 0.5 + 0.01 + 1e-9);
    }

    #[test]
    fn join_leave_rules() {
        let mut f = fleet();
        f.join(&[AgentId(0), AgentId(1)], 0).unwrap();
        assert!(f.join(&[AgentId(1)], 0).is_err());
        assert!(f.join(&[AgentId(5), AgentId(5)], 0).is_err());
        assert!(f.leave(&[AgentId(9)]).is_err());
        f.join(&[AgentId(2)], 0).unwrap();
        f.leave(&[AgentId(2)]).unwrap();
        assert_eq!(f.len(), 2);
    }

    #[test]
    fn spawn_grid() {
        let c = FleetConfig::default();
        assert_eq!(c.spawn_position(AgentId(0)), Vector3::new(0.0, 6.0, 0.0));
        assert_eq!(c.spawn_position(AgentId(9)), Vector3::new(2.0, 8.0, 0.0));
    }
}
