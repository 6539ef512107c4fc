//! Simulated orchestration substrate: nodes, controller pods, services,
//! best-fit placement, replica healing and CPU accounting.

mod load;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedmech::{compute_resources_exact, Action, ClusterView, DeploymentSpec, ResourceModel, ServiceSpec};
use crate::transport::RouteTable;

pub use load::{processing_time, DemandModel, LoadModel};

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    /// Cores.
    pub cpu_capacity: f64,
    /// MiB.
    pub mem_capacity: f64,
    #[serde(default = "yes")]
    pub schedulable: bool,
}

fn yes() -> bool {
    true
}

impl NodeSpec {
    pub fn new(name: &str, cpu_capacity: f64, mem_capacity: f64, schedulable: bool) -> Self {
        NodeSpec {
            name: name.to_string(),
            cpu_capacity,
            mem_capacity,
            schedulable,
        }
    }
}

/// One master and three workers; memory in MiB.
pub fn reference_cluster() -> Vec<NodeSpec> {
    vec![
        NodeSpec::new("master", 3.0, 2.0 * 1024.0, false),
        NodeSpec::new("worker1", 32.0, 460.0 * 1024.0, true),
        NodeSpec::new("worker2", 16.0, 32.0 * 1024.0, true),
        NodeSpec::new("worker3", 4.0, 8.0 * 1024.0, true),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PodPhase {
    Pending,
    Running,
    Failed,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PodRole {
    Controller,
    Planner,
    Scheduler,
    Tunnel,
    Master,
}

impl PodRole {
    pub fn is_system(self) -> bool {
        self != PodRole::Controller
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pod {
    pub id: u64,
    pub deployment: String,
    pub node: Option<String>,
    pub phase: PodPhase,
    pub role: PodRole,
    pub cpu_request: f64,
    pub cpu_limit: f64,
    pub mem_request: f64,
    pub mem_limit: f64,
    /// No limit is enforced on usage.
    pub unbounded: bool,
    /// Cores, from the last accounting pass.
    pub cpu_usage: f64,
    /// MiB, from the last accounting pass.
    pub mem_usage: f64,
    #[serde(skip)]
    unschedulable_reported: bool,
}

impl Pod {
    pub fn is_live(&self) -> bool {
        matches!(self.phase, PodPhase::Pending | PodPhase::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub spec: DeploymentSpec,
    pub pods: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEvent {
    pub time: f64,
    pub kind: String,
    pub subject: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Where a pending pod would go.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placement {
    Node(String),
    Unschedulable,
}

/// Per-pod solver activity over the last scheduler period.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PodActivity {
    /// Fraction of control ticks in which the pod solved.
    pub duty: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeUsage {
    pub cpu_usage: f64,
    pub mem_usage: f64,
    pub cpu_requested: f64,
    pub mem_requested: f64,
    /// Σ cpu_limit of running controller pods.
    pub controller_cpu_limit: f64,
    pub cpu_utilization: f64,
    pub mem_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    nodes: BTreeMap<String, NodeSpec>,
    deployments: BTreeMap<String, Deployment>,
    pods: BTreeMap<u64, Pod>,
    services: BTreeMap<String, ServiceSpec>,
    events: Vec<ClusterEvent>,
    next_pod: u64,
    now: f64,
    system_node: Option<String>,
}

impl ClusterState {
    pub fn new(nodes: Vec<NodeSpec>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for n in nodes {
            if !(n.cpu_capacity > 0.0 && n.mem_capacity > 0.0) {
                return Err(Error::contract(format!("node {} needs positive capacities", n.name)));
            }
            if map.insert(n.name.clone(), n).is_some() {
                return Err(Error::contract("duplicate node name"));
            }
        }
        if map.is_empty() {
            return Err(Error::contract("cluster needs at least one node"));
        }
        Ok(ClusterState {
            nodes: map,
            deployments: BTreeMap::new(),
            pods: BTreeMap::new(),
            services: BTreeMap::new(),
            events: Vec::new(),
            next_pod: 0,
            now: 0.0,
            system_node: None,
        })
    }

    /// Places the planner, scheduler, tunnel and middleware-master pods.
    pub fn with_system_pods(mut self, cpu_each: f64, mem_each: f64) -> Result<Self> {
        for (role, name) in [
            (PodRole::Master, "sys-master"),
            (PodRole::Planner, "sys-planner"),
            (PodRole::Scheduler, "sys-scheduler"),
            (PodRole::Tunnel, "sys-tunnel"),
        ] {
            let id = self.spawn_pod(name, role, cpu_each, cpu_each, mem_each, mem_each, false);
            match self.place_and_start(id) {
                Some(node) => {
                    if role == PodRole::Scheduler {
                        self.system_node = Some(node);
                    }
                }
                None => return Err(Error::contract(format!("no node can host system pod {name}"))),
            }
        }
        Ok(self)
    }

    pub fn set_time(&mut self, now: f64) {
        self.now = now;
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values()
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.get(name)
    }

    pub fn system_node(&self) -> Option<&str> {
        self.system_node.as_deref()
    }

    pub fn deployments(&self) -> &BTreeMap<String, Deployment> {
        &self.deployments
    }

    pub fn pods(&self) -> &BTreeMap<u64, Pod> {
        &self.pods
    }

    pub fn pod(&self, id: u64) -> Option<&Pod> {
        self.pods.get(&id)
    }

    pub fn services(&self) -> &BTreeMap<String, ServiceSpec> {
        &self.services
    }

    pub fn events(&self) -> &[ClusterEvent] {
        &self.events
    }

    /// Returns and clears events recorded since the last call.
    pub fn drain_events(&mut self) -> Vec<ClusterEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn view(&self) -> ClusterView {
        ClusterView {
            deployments: self.deployments.iter().map(|(k, d)| (k.clone(), d.spec.clone())).collect(),
            services: self.services.keys().cloned().collect(),
        }
    }

    pub fn route_table(&self, base_port: u16) -> RouteTable {
        let agents: BTreeSet<_> = self.services.values().filter_map(|s| s.agent).collect();
        RouteTable::for_agents(agents, base_port)
    }

    /// Running pods of a deployment.
    pub fn running_pods(&self, deployment: &str) -> Vec<&Pod> {
        self.deployments
            .get(deployment)
            .map(|d| {
                d.pods
                    .iter()
                    .filter_map(|id| self.pods.get(id))
                    .filter(|p| p.phase == PodPhase::Running)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// The pod that actuates for a deployment: its lowest-id running pod.
    pub fn active_pod(&self, deployment: &str) -> Option<&Pod> {
        self.running_pods(deployment).into_iter().next()
    }

    fn log(&mut self, kind: &str, subject: impl Into<String>, detail: impl Into<String>) {
        self.events.push(ClusterEvent {
            time: self.now,
            kind: kind.to_string(),
            subject: subject.into(),
            detail: detail.into(),
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn spawn_pod(
        &mut self,
        deployment: &str,
        role: PodRole,
        cpu_request: f64,
        cpu_limit: f64,
        mem_request: f64,
        mem_limit: f64,
        unbounded: bool,
    ) -> u64 {
        let id = self.next_pod;
        self.next_pod += 1;
        self.pods.insert(
            id,
            Pod {
                id,
                deployment: deployment.to_string(),
                node: None,
                phase: PodPhase::Pending,
                role,
                cpu_request,
                cpu_limit,
                mem_request,
                mem_limit,
                unbounded,
                cpu_usage: 0.0,
                mem_usage: 0.0,
                unschedulable_reported: false,
            },
        );
        self.log("pod_created", format!("pod-{id}"), deployment);
        id
    }

    fn spawn_for(&mut self, spec: &DeploymentSpec) -> u64 {
        self.spawn_pod(
            &spec.name,
            PodRole::Controller,
            spec.cpu_request,
            spec.cpu_limit,
            spec.mem_request,
            spec.mem_limit,
            spec.unbounded,
        )
    }

    /// Requests of running pods on `node`, optionally ignoring one pod.
    fn committed(&self, node: &str, except: Option<u64>) -> (f64, f64) {
        self.pods
            .values()
            .filter(|p| p.phase == PodPhase::Running && p.node.as_deref() == Some(node) && Some(p.id) != except)
            .fold((0.0, 0.0), |(c, m), p| (c + p.cpu_request, m + p.mem_request))
    }

    fn remaining(&self, node: &NodeSpec, except: Option<u64>) -> (f64, f64) {
        let (c, m) = self.committed(&node.name, except);
        (node.cpu_capacity - c, node.mem_capacity - m)
    }

    fn place_and_start(&mut self, id: u64) -> Option<String> {
        let pod = self.pods.get(&id)?;
        match place_pod(pod, self) {
            Placement::Node(node) => {
                let pod = self.pods.get_mut(&id).expect("pod exists");
                pod.node = Some(node.clone());
                pod.phase = PodPhase::Running;
                self.log("pod_running", format!("pod-{id}"), node.clone());
                Some(node)
            }
            Placement::Unschedulable => {
                let pod = self.pods.get_mut(&id).expect("pod exists");
                if !pod.unschedulable_reported {
                    pod.unschedulable_reported = true;
                    let detail = format!("cpu {:.1} mem {:.0}", pod.cpu_request, pod.mem_request);
                    self.log("pod_unschedulable", format!("pod-{id}"), detail);
                }
                None
            }
        }
    }

    /// Tries to place every pending pod, in id order.
    pub fn schedule_pending(&mut self) {
        let pending: Vec<u64> = self.pods.values().filter(|p| p.phase == PodPhase::Pending).map(|p| p.id).collect();
        for id in pending {
            self.place_and_start(id);
        }
    }

    fn stop_pod(&mut self, id: u64, phase: PodPhase, reason: &str) {
        if let Some(p) = self.pods.get_mut(&id) {
            if p.is_live() {
                p.phase = phase;
                p.cpu_usage = 0.0;
                p.mem_usage = 0.0;
                let kind = if phase == PodPhase::Failed { "pod_failed" } else { "pod_terminated" };
                self.log(kind, format!("pod-{id}"), reason);
            }
        }
    }

    /// Applies scheduler actions in order, then places pending pods.
    /// Actions naming unknown deployments or services are rejected and logged.
    pub fn apply(&mut self, actions: &[Action]) -> usize {
        let mut rejected = 0;
        for action in actions {
            if let Err(reason) = self.apply_one(action) {
                rejected += 1;
                self.log("rejected", action.target_name().to_string(), reason);
            }
        }
        self.schedule_pending();
        rejected
    }

    fn apply_one(&mut self, action: &Action) -> std::result::Result<(), String> {
        match action {
            Action::CreateDeployment { spec } => {
                if self.deployments.contains_key(&spec.name) {
                    return Err("deployment already exists".into());
                }
                if spec.replicas == 0 || spec.assigned_agents.is_empty() {
                    return Err("deployment needs replicas and agents".into());
                }
                let pods = (0..spec.replicas).map(|_| self.spawn_for(spec)).collect();
                self.deployments.insert(
                    spec.name.clone(),
                    Deployment {
                        spec: spec.clone(),
                        pods,
                    },
                );
                self.log("deployment_created", spec.name.clone(), format!("{} agents", spec.assigned_agents.len()));
            }
            Action::UpdateDeployment { spec } => {
                let Some(existing) = self.deployments.get(&spec.name) else {
                    return Err("unknown deployment".into());
                };
                let live: Vec<u64> =
                    existing.pods.iter().copied().filter(|id| self.pods[id].is_live()).collect();
                let mut kept = Vec::new();
                for id in live {
                    let pod = &self.pods[&id];
                    let fits = match (&pod.node, pod.phase) {
                        (Some(node), PodPhase::Running) => {
                            let (c, m) = self.remaining(&self.nodes[node], Some(id));
                            spec.cpu_request <= c + EPS && spec.mem_request <= m + EPS
                        }
                        _ => true,
                    };
                    if fits {
                        let pod = self.pods.get_mut(&id).expect("pod exists");
                        pod.cpu_request = spec.cpu_request;
                        pod.cpu_limit = spec.cpu_limit;
                        pod.mem_request = spec.mem_request;
                        pod.mem_limit = spec.mem_limit;
                        pod.unbounded = spec.unbounded;
                        pod.unschedulable_reported = false;
                        kept.push(id);
                    } else {
                        self.stop_pod(id, PodPhase::Terminated, "restart: new requests do not fit");
                        let new_id = self.spawn_for(spec);
                        self.log("pod_restarted", format!("pod-{id}"), format!("pod-{new_id}"));
                        kept.push(new_id);
                    }
                }
                while kept.len() < spec.replicas {
                    kept.push(self.spawn_for(spec));
                }
                let deployment = self.deployments.get_mut(&spec.name).expect("checked above");
                deployment.spec = spec.clone();
                deployment.pods.retain(|id| !kept.contains(id));
                deployment.pods.extend(kept);
                deployment.pods.sort_unstable();
                self.log("deployment_updated", spec.name.clone(), format!("{} agents", spec.assigned_agents.len()));
            }
            Action::DeleteDeployment { name } => {
                let Some(d) = self.deployments.remove(name) else {
                    return Err("unknown deployment".into());
                };
                for id in d.pods {
                    self.stop_pod(id, PodPhase::Terminated, "deployment deleted");
                }
                self.log("deployment_deleted", name.clone(), "");
            }
            Action::CreateService { spec } => {
                if self.services.contains_key(&spec.name) {
                    return Err("service already exists".into());
                }
                if self.services.values().any(|s| s.port == spec.port) {
                    return Err(format!("port {} already in use", spec.port));
                }
                self.services.insert(spec.name.clone(), spec.clone());
                self.log("service_created", spec.name.clone(), spec.port.to_string());
            }
            Action::DeleteService { name } => {
                if self.services.remove(name).is_none() {
                    return Err("unknown service".into());
                }
                self.log("service_deleted", name.clone(), "");
            }
        }
        Ok(())
    }

    /// Tops every deployment back up to its replica count and places the new pods.
    pub fn heal(&mut self) -> usize {
        let mut created = 0;
        let names: Vec<String> = self.deployments.keys().cloned().collect();
        for name in names {
            let d = &self.deployments[&name];
            let live = d.pods.iter().filter(|id| self.pods[*id].is_live()).count();
            let missing = d.spec.replicas.saturating_sub(live);
            let spec = d.spec.clone();
            for _ in 0..missing {
                let id = self.spawn_for(&spec);
                self.deployments.get_mut(&name).expect("exists").pods.push(id);
                self.log("pod_replaced", name.clone(), format!("pod-{id}"));
                created += 1;
            }
        }
        self.schedule_pending();
        created
    }

    /// Marks one running pod of `deployment` (the active one) as failed.
    pub fn kill_pod(&mut self, deployment: &str) -> Result<u64> {
        let id = self
            .active_pod(deployment)
            .map(|p| p.id)
            .ok_or_else(|| Error::contract(format!("no running pod in {deployment}")))?;
        self.stop_pod(id, PodPhase::Failed, "killed");
        Ok(id)
    }

    /// Cordons a node; its running pods fail and are rescheduled by `heal`.
    pub fn mark_node_unschedulable(&mut self, node: &str) -> Result<()> {
        let spec = self
            .nodes
            .get_mut(node)
            .ok_or_else(|| Error::contract(format!("unknown node {node}")))?;
        spec.schedulable = false;
        self.log("node_unschedulable", node.to_string(), "");
        let victims: Vec<u64> = self
            .pods
            .values()
            .filter(|p| p.phase == PodPhase::Running && p.node.as_deref() == Some(node))
            .map(|p| p.id)
            .collect();
        for id in victims {
            self.stop_pod(id, PodPhase::Failed, "node unschedulable");
        }
        if self.system_node.as_deref() == Some(node) {
            self.system_node = None;
        }
        Ok(())
    }

    /// Sets pod usage from solver activity. Pods without an entry are idle.
    pub fn account(&mut self, activity: &BTreeMap<u64, PodActivity>, resources: &ResourceModel, demand: &DemandModel) {
        let agent_counts: BTreeMap<String, (usize, f64, f64)> = self
            .deployments
            .iter()
            .map(|(name, d)| {
                let x = d.spec.assigned_agents.len();
                let envelope = compute_resources_exact(x.max(1), &d.spec.cnmpc_args, resources).ok();
                let (cpu_min, mem_min) = envelope.map(|e| (e.cpu_min, e.mem_min)).unwrap_or((0.0, 0.0));
                (name.clone(), (x, cpu_min, mem_min))
            })
            .collect();
        for pod in self.pods.values_mut() {
            if pod.phase != PodPhase::Running {
                pod.cpu_usage = 0.0;
                pod.mem_usage = 0.0;
                continue;
            }
            if pod.role.is_system() {
                pod.cpu_usage = demand.system_usage;
                pod.mem_usage = pod.mem_request;
                continue;
            }
            let (x, cpu_min, mem_min) = agent_counts.get(&pod.deployment).copied().unwrap_or((0, 0.0, 0.0));
            let duty = activity.get(&pod.id).map(|a| a.duty).unwrap_or(0.0);
            let mut cpu = demand.controller_demand(cpu_min, x, duty).max(demand.idle_floor);
            let mut mem = mem_min;
            if !pod.unbounded {
                cpu = cpu.min(pod.cpu_limit);
                mem = mem.min(pod.mem_limit);
            }
            pod.cpu_usage = cpu;
            pod.mem_usage = mem;
        }
    }

    pub fn node_usage(&self) -> BTreeMap<String, NodeUsage> {
        let mut out: BTreeMap<String, NodeUsage> =
            self.nodes.keys().map(|n| (n.clone(), NodeUsage::default())).collect();
        for p in self.pods.values().filter(|p| p.phase == PodPhase::Running) {
            let Some(u) = p.node.as_ref().and_then(|n| out.get_mut(n)) else {
                continue;
            };
            u.cpu_usage += p.cpu_usage;
            u.mem_usage += p.mem_usage;
            u.cpu_requested += p.cpu_request;
            u.mem_requested += p.mem_request;
            if p.role == PodRole::Controller {
                u.controller_cpu_limit += p.cpu_limit;
            }
        }
        for (name, u) in out.iter_mut() {
            let node = &self.nodes[name];
            u.cpu_utilization = u.cpu_usage / node.cpu_capacity;
            u.mem_utilization = u.mem_usage / node.mem_capacity;
        }
        out
    }

    /// Node CPU utilization of the node hosting `pod`, if running.
    pub fn pod_node_utilization(&self, pod: u64) -> Option<f64> {
        let node = self.pods.get(&pod)?.node.as_ref()?;
        self.node_usage().get(node).map(|u| u.cpu_utilization)
    }

    /// Nodes whose running pods request more than their capacity.
    pub fn request_violations(&self) -> Vec<String> {
        self.nodes
            .values()
            .filter(|n| {
                let (c, m) = self.committed(&n.name, None);
                c > n.cpu_capacity + EPS || m > n.mem_capacity + EPS
            })
            .map(|n| n.name.clone())
            .collect()
    }
}

/// Best-fit placement: the feasible node with the least CPU left after
/// placement (ties: most memory left, then name). Controller pods stay off
/// the node hosting the system pods when any other node fits.
pub fn place_pod(pod: &Pod, state: &ClusterState) -> Placement {
    let mut candidates: Vec<(f64, f64, &str)> = state
        .nodes
        .values()
        .filter(|n| n.schedulable)
        .filter_map(|n| {
            let (c, m) = state.remaining(n, Some(pod.id));
            let (c, m) = (c - pod.cpu_request, m - pod.mem_request);
            (c >= -EPS && m >= -EPS).then_some((c, m, n.name.as_str()))
        })
        .collect();
    if pod.role == PodRole::Controller {
        if let Some(sys) = state.system_node.as_deref() {
            if candidates.iter().any(|c| c.2 != sys) {
                candidates.retain(|c| c.2 != sys);
            }
        }
    }
    candidates
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(b.2)))
        .map(|c| Placement::Node(c.2.to_string()))
        .unwrap_or(Placement::Unschedulable)
}
