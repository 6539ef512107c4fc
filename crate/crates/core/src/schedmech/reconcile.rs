use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    compute_resources, partition_agents, partition_agents_literal, required_cnmpcs, CnmpcArgs, MissionState,
    ResourceModel,
};
use crate::error::{Error, Result};
use crate::transport::routes::{RouteTable, DEFAULT_BASE_PORT};
use crate::transport::Direction;
use crate::AgentId;

pub const SHARED_SERVICE: &str = "svc-shared";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulingMode {
    #[default]
    Scheduled,
    /// One controller for every agent with no resource bounds.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub agent_max: usize,
    /// Seconds between reconcile ticks.
    pub tick_period: f64,
    pub replicas: usize,
    /// Replace changed deployments by delete + create instead of updating in place.
    pub recreate: bool,
    /// Use the alternative distribution loop instead of the balanced partition.
    pub literal_partition: bool,
    pub mode: SchedulingMode,
    pub base_port: u16,
    pub resources: ResourceModel,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            agent_max: 8,
            tick_period: 1.0,
            replicas: 1,
            recreate: false,
            literal_partition: false,
            mode: SchedulingMode::Scheduled,
            base_port: DEFAULT_BASE_PORT,
            resources: ResourceModel::default(),
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agent_max == 0 {
            return Err(Error::contract("agent_max must be at least 1"));
        }
        if !(self.tick_period > 0.0) {
            return Err(Error::contract("tick_period must be positive"));
        }
        if self.replicas == 0 {
            return Err(Error::contract("replicas must be at least 1"));
        }
        if self.base_port < 2 {
            return Err(Error::contract("base_port must leave room for the shared port"));
        }
        self.resources.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentSpec {
    pub name: String,
    pub index: usize,
    pub assigned_agents: Vec<AgentId>,
    pub cnmpc_args: CnmpcArgs,
    /// Cores.
    pub cpu_request: f64,
    pub cpu_limit: f64,
    /// MiB.
    pub mem_request: f64,
    pub mem_limit: f64,
    pub replicas: usize,
    /// No limits are enforced (baseline mode).
    #[serde(default)]
    pub unbounded: bool,
}

impl DeploymentSpec {
    pub fn name_for(index: usize) -> String {
        format!("cnmpc-{index}")
    }

    /// Parses `cnmpc-<index>`.
    pub fn index_of(name: &str) -> Option<usize> {
        name.strip_prefix("cnmpc-")?.parse().ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub agent: Option<AgentId>,
    pub direction: Option<Direction>,
    pub port: u16,
}

impl ServiceSpec {
    pub fn shared(base_port: u16) -> Self {
        ServiceSpec {
            name: SHARED_SERVICE.to_string(),
            agent: None,
            direction: None,
            port: base_port - 1,
        }
    }

    pub fn for_agent(agent: AgentId, direction: Direction, base_port: u16) -> Self {
        let (suffix, port) = match direction {
            Direction::Uplink => ("up", RouteTable::uplink_port(base_port, agent)),
            Direction::Downlink => ("down", RouteTable::downlink_port(base_port, agent)),
        };
        ServiceSpec {
            name: format!("svc-agent-{agent}-{suffix}"),
            agent: Some(agent),
            direction: Some(direction),
            port,
        }
    }
}

/// Uplink and downlink per agent plus one shared service.
pub fn required_services(agents: usize) -> usize {
    2 * agents + 1
}

pub fn service_specs(agents: &BTreeSet<AgentId>, base_port: u16) -> Vec<ServiceSpec> {
    let mut out = vec![ServiceSpec::shared(base_port)];
    for &a in agents {
        out.push(ServiceSpec::for_agent(a, Direction::Uplink, base_port));
        out.push(ServiceSpec::for_agent(a, Direction::Downlink, base_port));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    CreateDeployment { spec: DeploymentSpec },
    UpdateDeployment { spec: DeploymentSpec },
    DeleteDeployment { name: String },
    CreateService { spec: ServiceSpec },
    DeleteService { name: String },
}

impl Action {
    pub fn target_name(&self) -> &str {
        match self {
            Action::CreateDeployment { spec } | Action::UpdateDeployment { spec } => &spec.name,
            Action::CreateService { spec } => &spec.name,
            Action::DeleteDeployment { name } | Action::DeleteService { name } => name,
        }
    }
}

/// What the scheduler can see of the cluster.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterView {
    pub deployments: BTreeMap<String, DeploymentSpec>,
    pub services: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub config: SchedulerConfig,
    pub previous_agents: BTreeSet<AgentId>,
    pub previous_cnmpcs: usize,
    pub previous_args: Option<CnmpcArgs>,
}

impl SchedulerState {
    pub fn new(config: SchedulerConfig) -> Result<Self> {
        config.validate()?;
        Ok(SchedulerState {
            config,
            previous_agents: BTreeSet::new(),
            previous_cnmpcs: 0,
            previous_args: None,
        })
    }

    pub fn previous_agent_count(&self) -> usize {
        self.previous_agents.len()
    }
}

/// Deployments that should exist for `agents`, in index order.
pub fn target_deployments(
    agents: &BTreeSet<AgentId>,
    args: &CnmpcArgs,
    config: &SchedulerConfig,
) -> Result<Vec<DeploymentSpec>> {
    args.validate()?;
    let ids: Vec<AgentId> = agents.iter().copied().collect();
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    if config.mode == SchedulingMode::Baseline {
        let envelope = compute_resources(ids.len(), args, &config.resources)?;
        return Ok(vec![DeploymentSpec {
            name: DeploymentSpec::name_for(0),
            index: 0,
            assigned_agents: ids,
            cnmpc_args: args.clone(),
            cpu_request: 0.0,
            cpu_limit: envelope.cpu_max,
            mem_request: 0.0,
            mem_limit: envelope.mem_max,
            replicas: config.replicas,
            unbounded: true,
        }]);
    }
    let sizes = if config.literal_partition {
        partition_agents_literal(ids.len(), config.agent_max)
    } else {
        partition_agents(ids.len(), required_cnmpcs(ids.len(), config.agent_max))?
    };
    let mut start = 0;
    let mut out = Vec::with_capacity(sizes.len());
    for (index, size) in sizes.into_iter().enumerate() {
        let end = (start + size).min(ids.len());
        let group = ids[start..end].to_vec();
        start = end;
        if group.is_empty() {
            continue;
        }
        let envelope = compute_resources(group.len(), args, &config.resources)?;
        out.push(DeploymentSpec {
            name: DeploymentSpec::name_for(index),
            index,
            assigned_agents: group,
            cnmpc_args: args.clone(),
            cpu_request: envelope.cpu_min,
            cpu_limit: envelope.cpu_max,
            mem_request: envelope.mem_min,
            mem_limit: envelope.mem_max,
            replicas: config.replicas,
            unbounded: false,
        });
    }
    Ok(out)
}

/// One scheduler tick: compares the mission with the last reconciled state and
/// the live view, and returns the actions that close the gap.
///
/// Order: surplus deployments deleted, surplus services deleted, deployments
/// created or updated by index, missing services created.
pub fn reconcile(mission: &MissionState, state: &mut SchedulerState, live: &ClusterView) -> Result<Vec<Action>> {
    if state.previous_args.as_ref() == Some(&mission.cnmpc_args) && state.previous_agents == mission.agents {
        return Ok(Vec::new());
    }
    let config = &state.config;
    let targets = target_deployments(&mission.agents, &mission.cnmpc_args, config)?;
    let services = service_specs(&mission.agents, config.base_port);
    let mut actions = Vec::new();

    let mut surplus: Vec<(usize, &String)> = live
        .deployments
        .keys()
        .filter_map(|name| DeploymentSpec::index_of(name).map(|i| (i, name)))
        .filter(|(i, _)| *i >= targets.len())
        .collect();
    surplus.sort();
    for (_, name) in surplus {
        actions.push(Action::DeleteDeployment { name: name.clone() });
    }

    let wanted: BTreeSet<&str> = services.iter().map(|s| s.name.as_str()).collect();
    for name in live.services.iter().filter(|n| !wanted.contains(n.as_str())) {
        actions.push(Action::DeleteService { name: name.clone() });
    }

    for spec in &targets {
        match live.deployments.get(&spec.name) {
            None => actions.push(Action::CreateDeployment { spec: spec.clone() }),
            Some(current) if current != spec => {
                if config.recreate {
                    actions.push(Action::DeleteDeployment {
                        name: spec.name.clone(),
                    });
                    actions.push(Action::CreateDeployment { spec: spec.clone() });
                } else {
                    actions.push(Action::UpdateDeployment { spec: spec.clone() });
                }
            }
            Some(_) => {}
        }
    }

    for spec in services {
        if !live.services.contains(&spec.name) {
            actions.push(Action::CreateService { spec });
        }
    }

    state.previous_agents = mission.agents.clone();
    state.previous_cnmpcs = targets.len();
    state.previous_args = Some(mission.cnmpc_args.clone());
    Ok(actions)
}
