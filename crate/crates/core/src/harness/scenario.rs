use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{reference_cluster, DemandModel, LoadModel, NodeSpec};
use crate::controller::SolverConfig;
use crate::dynamics::ModelParams;
use crate::error::{Error, Result};
use crate::fleet::FleetConfig;
use crate::schedmech::{CnmpcArgs, MissionCommand, Reference, SchedulerConfig, SchedulingMode};
use crate::transport::DelayModel;
use crate::AgentId;

pub const SCENARIO_SCHEMA: &str = "cloudmpc-scenario/1";

/// Bundled scenarios, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("fig5_migration", include_str!("../../scenarios/fig5_migration.toml")),
    ("fig4_utilization", include_str!("../../scenarios/fig4_utilization.toml")),
    ("collision_crossing", include_str!("../../scenarios/collision_crossing.toml")),
    ("delay_circle", include_str!("../../scenarios/delay_circle.toml")),
    ("healing", include_str!("../../scenarios/healing.toml")),
    ("deadline_overload", include_str!("../../scenarios/deadline_overload.toml")),
    ("fallback_drop", include_str!("../../scenarios/fallback_drop.toml")),
    ("empty", include_str!("../../scenarios/empty.toml")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

/// Properties checked while a scenario runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Σ requests of running pods within every node's capacity.
    RequestConservation,
    /// Bounded controller pods never use more than their limit.
    UsageCap,
    /// No deployment without a running pod for more than one tick.
    HealingLiveness,
    /// Agents sharing a controller keep the safe separation (10% slack).
    Collision,
    /// An agent fell back without a safety-land command.
    Fallback,
    /// The windowed round-trip mean exceeded its bound.
    Deadline,
    /// An agent's integration diverged.
    Divergence,
}

impl Monitor {
    pub const ALL: [Monitor; 7] = [
        Monitor::RequestConservation,
        Monitor::UsageCap,
        Monitor::HealingLiveness,
        Monitor::Collision,
        Monitor::Fallback,
        Monitor::Deadline,
        Monitor::Divergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Monitor::RequestConservation => "request_conservation",
            Monitor::UsageCap => "usage_cap",
            Monitor::HealingLiveness => "healing_liveness",
            Monitor::Collision => "collision",
            Monitor::Fallback => "fallback",
            Monitor::Deadline => "deadline",
            Monitor::Divergence => "divergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    SetDesiredAgents { count: usize },
    HighLevel { command: MissionCommand },
    KillPod { deployment: String },
    SetDelay { delay: DelayModel },
    MarkNodeUnschedulable { node: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    /// Seconds.
    pub at: f64,
    #[serde(flatten)]
    pub event: Event,
}

/// Per-agent spawn point and reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentOverride {
    pub id: AgentId,
    /// Ground position (x, y), m.
    #[serde(default)]
    pub spawn: Option<[f64; 2]>,
    #[serde(default)]
    pub reference: Option<Reference>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemPods {
    pub enabled: bool,
    /// Cores per pod.
    pub cpu: f64,
    /// MiB per pod.
    pub mem: f64,
}

impl Default for SystemPods {
    fn default() -> Self {
        SystemPods {
            enabled: true,
            cpu: 0.25,
            mem: 128.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSettings {
    /// Predict the present state from delayed odometry before solving.
    pub estimator: bool,
    /// Round-trip window length, samples.
    pub window: usize,
    /// Round-trip bound, seconds.
    pub tau_max: f64,
    pub strict_deadline: bool,
    /// m.
    pub safe_radius: f64,
    pub solver: SolverConfig,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        ControllerSettings {
            estimator: true,
            window: 50,
            tau_max: 0.1,
            strict_deadline: false,
            safe_radius: 0.5,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Seconds of virtual time.
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: SchedulingMode,
    #[serde(default = "reference_cluster")]
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub system_pods: SystemPods,
    /// Scheduler settings; its `mode` is taken from the top-level `mode`.
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub cnmpc: CnmpcArgs,
    /// Its seed is taken from the top-level `seed`.
    #[serde(default)]
    pub delay: DelayModel,
    #[serde(default)]
    pub load: LoadModel,
    #[serde(default)]
    pub demand: DemandModel,
    #[serde(default)]
    pub fleet: FleetConfig,
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub controller: ControllerSettings,
    /// Reference for agents without an override.
    #[serde(default)]
    pub reference: Reference,
    #[serde(default)]
    pub agents: Vec<AgentOverride>,
    /// Pins every controller node at this utilization for the processing-time model.
    #[serde(default)]
    pub forced_utilization: Option<f64>,
    /// Monitors this scenario is designed to trip.
    #[serde(default)]
    pub expect: Vec<Monitor>,
    #[serde(default)]
    pub timeline: Vec<TimelineEntry>,
}

impl Scenario {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let mut scenario: Scenario = toml::from_str(text).map_err(|e| Error::Scenario(format!("{origin}: {e}")))?;
        scenario.normalize();
        scenario.validate().map_err(|e| match e {
            Error::Scenario(msg) => Error::Scenario(format!("{origin}: {msg}")),
            other => Error::Scenario(format!("{origin}: {other}")),
        })?;
        Ok(scenario)
    }

    /// Loads a scenario file, or a bundled scenario by name.
    pub fn load(path_or_name: &str) -> Result<Self> {
        let path = Path::new(path_or_name);
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            return Scenario::from_toml(&text, path_or_name);
        }
        match bundled(path_or_name) {
            Some(text) => Scenario::from_toml(text, path_or_name),
            None => Err(Error::Scenario(format!("{path_or_name}: no such file or bundled scenario"))),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    fn normalize(&mut self) {
        self.scheduler.mode = self.mode;
        self.delay.seed = self.seed;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.normalize();
    }

    pub fn set_mode(&mut self, mode: SchedulingMode) {
        self.mode = mode;
        self.normalize();
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Scenario(msg));
        if self.schema != SCENARIO_SCHEMA {
            return bad(format!("schema must be \"{SCENARIO_SCHEMA}\", got \"{}\"", self.schema));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive".into());
        }
        if self.nodes.is_empty() {
            return bad("nodes must not be empty".into());
        }
        for n in &self.nodes {
            if !(n.cpu_capacity > 0.0 && n.mem_capacity > 0.0) {
                return bad(format!("nodes: {} needs positive capacities", n.name));
            }
        }
        let sub = |field: &str, r: Result<()>| r.map_err(|e| Error::Scenario(format!("{field}: {e}")));
        sub("scheduler", self.scheduler.validate())?;
        sub("cnmpc", self.cnmpc.validate())?;
        sub("delay", self.delay.validate())?;
        sub("load", self.load.validate())?;
        sub("demand", self.demand.validate())?;
        sub("fleet", self.fleet.validate())?;
        sub("model", self.model.validate())?;
        sub("reference", self.reference.validate())?;
        for a in &self.agents {
            if let Some(r) = &a.reference {
                sub(&format!("agents[{}].reference", a.id), r.validate())?;
            }
        }
        sub("controller.solver", self.controller.solver.validate())?;
        if self.controller.window == 0 || !(self.controller.tau_max > 0.0) || !(self.controller.safe_radius > 0.0) {
            return bad("controller: window, tau_max and safe_radius must be positive".into());
        }
        if let Some(u) = self.forced_utilization {
            if !(0.0..=1.0).contains(&u) {
                return bad(format!("forced_utilization must lie in [0, 1], got {u}"));
            }
        }
        let step = (self.fleet.physics_dt * 1e6).round() as u64;
        let periods = [
            ("scheduler.tick_period", self.scheduler.tick_period),
            ("cnmpc.control_rate", 1.0 / self.cnmpc.control_rate),
            ("fleet.odom_rate", 1.0 / self.fleet.odom_rate),
        ];
        for (field, period) in periods {
            let us = (period * 1e6).round() as u64;
            if us == 0 || us % step != 0 {
                return bad(format!("{field}: period must be a multiple of fleet.physics_dt"));
            }
        }
        let mut last = 0.0;
        for (i, entry) in self.timeline.iter().enumerate() {
            if !(entry.at >= 0.0) {
                return bad(format!("timeline[{i}]: time must be non-negative"));
            }
            if entry.at < last {
                return bad(format!("timeline[{i}]: events must be time-sorted"));
            }
            last = entry.at;
            if let Event::SetDelay { delay } = &entry.event {
                sub(&format!("timeline[{i}].delay"), delay.validate())?;
            }
            if let Event::SetDesiredAgents { count } = entry.event {
                if count > u16::MAX as usize {
                    return bad(format!("timeline[{i}]: agent count out of range"));
                }
            }
        }
        if !self.timeline.is_empty() && self.duration <= last {
            return bad("duration must exceed the last event time".into());
        }
        Ok(())
    }

    /// Largest agent count the timeline asks for.
    pub fn max_agents(&self) -> usize {
        self.timeline
            .iter()
            .filter_map(|e| match e.event {
                Event::SetDesiredAgents { count } => Some(count),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Number of deployment slots the metrics must carry.
    pub fn max_deployments(&self) -> usize {
        let n = self.max_agents();
        match self.mode {
            SchedulingMode::Baseline => usize::from(n > 0),
            SchedulingMode::Scheduled => n.div_ceil(self.scheduler.agent_max),
        }
    }

    pub fn expects(&self, monitor: Monitor) -> bool {
        self.expect.contains(&monitor)
    }
}
