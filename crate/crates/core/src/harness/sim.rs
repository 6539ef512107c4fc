use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{DeploymentMetrics, MetricsColumns, MetricsRow, NodeMetrics};
use super::scenario::{Event, Monitor, Scenario};
use crate::cluster::{processing_time, ClusterState, PodActivity, PodRole};
use crate::controller::{solve, CnmpcProblem, ReferenceWindow};
use crate::dynamics::{estimate_present, hover_input, AgentState, ControlInput};
use crate::error::{Error, Result};
use crate::fleet::{AgentMode, Fleet, ModeChange};
use crate::schedmech::{reconcile, reference_window, Action, MissionCommand, MissionState, SchedulerState, TakeoffProfile};
use crate::transport::{
    decode, to_micros, to_seconds, Direction, HighLevelCode, LatestSlots, RouteTable, RttSample, RttTracker,
    TunnelStats, VirtualTunnel, WireMessage,
};
use crate::AgentId;

const HISTORY_LEN: usize = 256;
const CYCLE_RETENTION_US: u64 = 10_000_000;

/// One scheduler action as written to the action log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub tick: u64,
    pub time: f64,
    pub kind: String,
    pub name: String,
    pub payload: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub time: f64,
    pub source: String,
    pub kind: String,
    pub subject: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Migration {
    pub time: f64,
    pub agent: AgentId,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorReport {
    pub monitor: Monitor,
    pub fired: bool,
    /// The scenario is annotated as expected to trip this monitor.
    pub expected: bool,
    pub count: u64,
    pub first_time: Option<f64>,
    pub detail: String,
}

impl MonitorReport {
    pub fn failed(&self) -> bool {
        self.fired && !self.expected
    }
}

/// Per-agent tracking error at one control tick, indexed by agent id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub time: f64,
    pub errors: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario: Scenario,
    pub columns: MetricsColumns,
    pub rows: Vec<MetricsRow>,
    pub actions: Vec<ActionRecord>,
    pub events: Vec<LogEvent>,
    pub monitors: Vec<MonitorReport>,
    pub migrations: Vec<Migration>,
    pub mode_changes: Vec<ModeChange>,
    /// (time, deployment) of each deadline violation onset.
    pub violations: Vec<(f64, String)>,
    pub error_trace: Vec<ErrorSample>,
    /// Every completed control cycle, in delivery order.
    pub rtt_samples: Vec<RttSample>,
    /// Smallest planar distance between tracking agents sharing a controller.
    pub min_separation_same_controller: Option<f64>,
    pub min_separation: Option<f64>,
    /// Node hosting the system pods, if any.
    pub system_node: Option<String>,
    pub solves: u64,
    pub decode_errors: u64,
    pub tunnel: TunnelStats,
    /// Wall-clock solver timing; not reproducible run to run.
    pub solver_timing_csv: String,
}

impl RunOutput {
    pub fn metrics_csv(&self) -> String {
        self.columns.render(&self.rows)
    }

    pub fn actions_jsonl(&self) -> String {
        jsonl(&self.actions)
    }

    pub fn events_jsonl(&self) -> String {
        jsonl(&self.events)
    }

    pub fn monitor(&self, monitor: Monitor) -> &MonitorReport {
        self.monitors.iter().find(|m| m.monitor == monitor).expect("every monitor is reported")
    }

    /// True when no monitor fired unexpectedly.
    pub fn passed(&self) -> bool {
        self.monitors.iter().all(|m| !m.failed())
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        std::fs::write(dir.join("actions.jsonl"), self.actions_jsonl())?;
        std::fs::write(dir.join("events.jsonl"), self.events_jsonl())?;
        std::fs::write(dir.join("solver_timing.csv"), &self.solver_timing_csv)?;
        let report = serde_json::to_string_pretty(&self.monitors).expect("monitors serialize");
        std::fs::write(dir.join("monitors.json"), report + "\n")?;
        Ok(())
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Observation {
    state: AgentState,
    stamp_us: u64,
    uplink_delay: f64,
}

#[derive(Debug, Clone)]
struct Cycle {
    deployment: String,
    uplink: f64,
    processing: f64,
    sent_us: u64,
}

#[derive(Debug)]
struct ControllerCtx {
    pod: Option<u64>,
    tracker: RttTracker,
    violated: bool,
    tau_p: f64,
    warm: BTreeMap<AgentId, Vec<ControlInput>>,
    previous: BTreeMap<AgentId, ControlInput>,
    solves: u32,
    ticks: u32,
}

struct Sim {
    scenario: Scenario,
    columns: MetricsColumns,
    mission: MissionState,
    scheduler: SchedulerState,
    cluster: ClusterState,
    tunnel: VirtualTunnel,
    fleet: Fleet,
    cloud_odometry: LatestSlots<Observation>,
    controllers: BTreeMap<String, ControllerCtx>,
    pending: BTreeMap<(u64, u64), WireMessage>,
    serial: u64,
    outbox: Vec<WireMessage>,
    cycles: BTreeMap<(AgentId, u32), Cycle>,
    command_seq: BTreeMap<AgentId, u32>,
    history: BTreeMap<AgentId, VecDeque<(u64, ControlInput)>>,
    global_rtt: RttTracker,
    homes: BTreeMap<AgentId, String>,
    zero_pod_streak: BTreeMap<String, u32>,
    mission_landing: bool,
    next_event: usize,
    tick: u64,
    period_migrations: usize,
    period_fallbacks: usize,
    period_min_separation: Option<f64>,
    monitors: BTreeMap<Monitor, MonitorReport>,
    out: RunOutput,
}

/// Runs a scenario to completion in virtual time.
pub fn run(scenario: &Scenario) -> Result<RunOutput> {
    scenario.validate()?;
    let mut sim = Sim::new(scenario.clone())?;
    sim.run()?;
    Ok(sim.finish())
}

fn fmin(a: Option<f64>, b: f64) -> Option<f64> {
    Some(a.map_or(b, |a| a.min(b)))
}

impl Sim {
    fn new(scenario: Scenario) -> Result<Self> {
        let mut cluster = ClusterState::new(scenario.nodes.clone())?;
        if scenario.system_pods.enabled {
            cluster = cluster.with_system_pods(scenario.system_pods.cpu, scenario.system_pods.mem)?;
        }
        let mission = MissionState {
            default_reference: scenario.reference.clone(),
            references: scenario
                .agents
                .iter()
                .filter_map(|a| a.reference.clone().map(|r| (a.id, r)))
                .collect(),
            cnmpc_args: scenario.cnmpc.clone(),
            takeoff: TakeoffProfile {
                altitude: scenario.fleet.takeoff_altitude,
                climb_rate: scenario.fleet.climb_rate,
                land_rate: scenario.fleet.land_rate,
            },
            ..MissionState::default()
        };
        let mut fleet = Fleet::new(scenario.fleet, scenario.model)?;
        for a in &scenario.agents {
            if let Some([x, y]) = a.spawn {
                fleet.set_spawn(a.id, nalgebra::Vector3::new(x, y, 0.0));
            }
        }
        let tunnel = VirtualTunnel::new(scenario.delay.clone(), RouteTable::new(scenario.scheduler.base_port))?;
        let columns = MetricsColumns {
            nodes: scenario.nodes.iter().map(|n| n.name.clone()).collect(),
            deployment_slots: scenario.max_deployments(),
            agents: scenario.max_agents(),
        };
        let monitors = Monitor::ALL
            .iter()
            .map(|&m| {
                (
                    m,
                    MonitorReport {
                        monitor: m,
                        fired: false,
                        expected: scenario.expects(m),
                        count: 0,
                        first_time: None,
                        detail: String::new(),
                    },
                )
            })
            .collect();
        let global_rtt = RttTracker::new(scenario.controller.window, scenario.controller.tau_max)
            .strict(scenario.controller.strict_deadline);
        let out = RunOutput {
            scenario: scenario.clone(),
            columns: columns.clone(),
            rows: Vec::new(),
            actions: Vec::new(),
            events: Vec::new(),
            monitors: Vec::new(),
            migrations: Vec::new(),
            mode_changes: Vec::new(),
            violations: Vec::new(),
            error_trace: Vec::new(),
            rtt_samples: Vec::new(),
            min_separation_same_controller: None,
            min_separation: None,
            system_node: None,
            solves: 0,
            decode_errors: 0,
            tunnel: TunnelStats::default(),
            solver_timing_csv: "time,deployment,agents,wall_ms,inner_iterations,penalty_rounds,converged\n".into(),
        };
        Ok(Sim {
            scheduler: SchedulerState::new(scenario.scheduler.clone())?,
            columns,
            mission,
            cluster,
            tunnel,
            fleet,
            cloud_odometry: LatestSlots::default(),
            controllers: BTreeMap::new(),
            pending: BTreeMap::new(),
            serial: 0,
            outbox: Vec::new(),
            cycles: BTreeMap::new(),
            command_seq: BTreeMap::new(),
            history: BTreeMap::new(),
            global_rtt,
            homes: BTreeMap::new(),
            zero_pod_streak: BTreeMap::new(),
            mission_landing: false,
            next_event: 0,
            tick: 0,
            period_migrations: 0,
            period_fallbacks: 0,
            period_min_separation: None,
            monitors,
            out,
            scenario,
        })
    }

    fn log(&mut self, time: f64, source: &str, kind: &str, subject: impl Into<String>, detail: impl Into<String>) {
        self.out.events.push(LogEvent {
            time,
            source: source.to_string(),
            kind: kind.to_string(),
            subject: subject.into(),
            detail: detail.into(),
        });
    }

    fn fire(&mut self, monitor: Monitor, time: f64, detail: String) {
        let m = self.monitors.get_mut(&monitor).expect("monitor registered");
        m.count += 1;
        if !m.fired {
            m.fired = true;
            m.first_time = Some(time);
            m.detail = detail;
        }
    }

    fn run(&mut self) -> Result<()> {
        let physics_us = to_micros(self.scenario.fleet.physics_dt);
        let tick_us = to_micros(self.scenario.scheduler.tick_period);
        let control_us = to_micros(1.0 / self.scenario.cnmpc.control_rate);
        let end_us = to_micros(self.scenario.duration);
        let mut now_us = 0;
        while now_us <= end_us {
            let now = to_seconds(now_us);
            self.cluster.set_time(now);
            self.process_events(now_us)?;
            if now_us % tick_us == 0 {
                self.scheduler_tick(now_us)?;
            }
            self.drain_cluster_events();
            self.flush_outbox(now_us);
            for m in self.fleet.emit_odometry(now_us) {
                self.tunnel.send(&m, Direction::Uplink, now_us);
            }
            self.flush_pending(now_us);
            self.deliver(now_us);
            if now_us % control_us == 0 {
                self.control_tick(now_us)?;
                self.flush_pending(now_us);
                self.deliver(now_us);
                self.sample_geometry(now);
            }
            self.flush_outbox(now_us);
            let changes = self.fleet.check_timeouts(now);
            self.mode_changes(changes);
            let changes = self.fleet.sim_step(now);
            self.mode_changes(changes);
            for w in self.tunnel.take_warnings() {
                self.log(now, "tunnel", "warning", "", w);
            }
            now_us += physics_us;
        }
        Ok(())
    }

    fn finish(mut self) -> RunOutput {
        self.out.monitors = self.monitors.into_values().collect();
        self.out.tunnel = self.tunnel.stats();
        self.out.system_node = self.cluster.system_node().map(str::to_string);
        self.out
    }

    fn process_events(&mut self, now_us: u64) -> Result<()> {
        let now = to_seconds(now_us);
        while let Some(entry) = self.scenario.timeline.get(self.next_event) {
            if to_micros(entry.at) > now_us {
                break;
            }
            let event = entry.event.clone();
            self.next_event += 1;
            let detail = serde_json::to_string(&event).expect("events serialize");
            self.log(now, "timeline", "event", "", detail);
            match event {
                Event::SetDesiredAgents { count } => {
                    let target: BTreeSet<AgentId> = (0..count as u16).map(AgentId).collect();
                    let joins: Vec<AgentId> = target.difference(&self.mission.agents).copied().collect();
                    let leaves: Vec<AgentId> = self.mission.agents.difference(&target).copied().collect();
                    self.mission.set_desired_agents(count);
                    self.fleet.leave(&leaves)?;
                    for a in &leaves {
                        self.cloud_odometry.remove(*a);
                    }
                    self.fleet.join(&joins, now_us)?;
                    if self.mission.command != MissionCommand::SafetyLand {
                        for a in joins {
                            self.outbox.push(WireMessage::HighLevel {
                                agent_id: a,
                                code: HighLevelCode::TakeOff,
                            });
                        }
                    }
                }
                Event::HighLevel { command } => {
                    self.mission.set_command(command, now);
                    let (code, wanted): (HighLevelCode, fn(AgentMode) -> bool) = match command {
                        MissionCommand::TakeOff | MissionCommand::Track => {
                            self.mission_landing = false;
                            (HighLevelCode::TakeOff, |m| matches!(m, AgentMode::Grounded | AgentMode::Landed))
                        }
                        MissionCommand::SafetyLand => {
                            self.mission_landing = true;
                            (HighLevelCode::SafetyLand, |m| matches!(m, AgentMode::TakeOff | AgentMode::Tracking))
                        }
                    };
                    let targets: Vec<AgentId> = self.fleet.agents().filter(|a| wanted(a.mode)).map(|a| a.id).collect();
                    for a in targets {
                        self.outbox.push(WireMessage::HighLevel { agent_id: a, code });
                    }
                }
                Event::KillPod { deployment } => match self.cluster.kill_pod(&deployment) {
                    Ok(id) => self.log(now, "harness", "kill_pod", deployment, format!("pod-{id}")),
                    Err(e) => self.log(now, "harness", "rejected", deployment, e.to_string()),
                },
                Event::SetDelay { mut delay } => {
                    delay.seed = self.scenario.seed;
                    self.tunnel.set_model(delay)?;
                }
                Event::MarkNodeUnschedulable { node } => {
                    if let Err(e) = self.cluster.mark_node_unschedulable(&node) {
                        self.log(now, "harness", "rejected", node, e.to_string());
                    }
                }
            }
        }
        Ok(())
    }

    fn drain_cluster_events(&mut self) {
        for e in self.cluster.drain_events() {
            self.out.events.push(LogEvent {
                time: e.time,
                source: "cluster".into(),
                kind: e.kind,
                subject: e.subject,
                detail: e.detail,
            });
        }
    }

    fn send_now(&mut self, message: &WireMessage, now_us: u64) {
        self.tunnel.send(message, Direction::Downlink, now_us);
    }

    fn flush_outbox(&mut self, now_us: u64) {
        for m in std::mem::take(&mut self.outbox) {
            self.send_now(&m, now_us);
        }
    }

    fn flush_pending(&mut self, now_us: u64) {
        while let Some(entry) = self.pending.first_entry() {
            if entry.key().0 > now_us {
                break;
            }
            let ((at, _), message) = entry.remove_entry();
            self.tunnel.send(&message, Direction::Downlink, at);
        }
    }

    fn deliver(&mut self, now_us: u64) {
        let now = to_seconds(now_us);
        for d in self.tunnel.deliver_due(now_us) {
            let message = match decode(&d.frame) {
                Ok(m) => m,
                Err(e) => {
                    self.out.decode_errors += 1;
                    self.log(now, "tunnel", "decode_error", d.agent.to_string(), e.to_string());
                    continue;
                }
            };
            match d.direction {
                Direction::Uplink => {
                    let agent = message.agent_id();
                    if let (Some(seq), Some(state), true) =
                        (message.seq(), message.to_state(), self.mission.agents.contains(&agent))
                    {
                        let obs = Observation {
                            state,
                            stamp_us: d.sent_us,
                            uplink_delay: d.delay(),
                        };
                        self.cloud_odometry.offer(agent, seq, obs);
                    }
                }
                Direction::Downlink => {
                    if let (WireMessage::Command { agent_id, seq, .. }, true) = (&message, true) {
                        if let Some(cycle) = self.cycles.remove(&(*agent_id, *seq)) {
                            self.complete_cycle(cycle, d.delay(), now);
                        }
                    }
                    if let Some(change) = self.fleet.deliver(&message, now) {
                        self.mode_changes(vec![change]);
                    }
                }
            }
        }
    }

    fn complete_cycle(&mut self, cycle: Cycle, downlink: f64, now: f64) {
        let sample = RttSample {
            uplink: cycle.uplink,
            downlink,
            processing: cycle.processing,
        };
        self.out.rtt_samples.push(sample);
        let _ = self.global_rtt.record_cycle(sample.uplink, sample.downlink, sample.processing);
        let Some(ctx) = self.controllers.get_mut(&cycle.deployment) else {
            return;
        };
        let _ = ctx.tracker.record_cycle(sample.uplink, sample.downlink, sample.processing);
        let deadline = ctx.tracker.check_deadline();
        if !deadline.is_violation() {
            ctx.violated = false;
            return;
        }
        if ctx.violated {
            return;
        }
        ctx.violated = true;
        let name = cycle.deployment;
        self.out.violations.push((now, name.clone()));
        self.fire(Monitor::Deadline, now, format!("{name}: {deadline:?}"));
        self.log(now, "transport", "deadline_violation", name.clone(), format!("{deadline:?}"));
        let agents: Vec<AgentId> = self
            .cluster
            .deployments()
            .get(&name)
            .map(|d| d.spec.assigned_agents.clone())
            .unwrap_or_default();
        for a in agents {
            self.outbox.push(WireMessage::HighLevel {
                agent_id: a,
                code: HighLevelCode::SafetyLand,
            });
        }
    }

    fn mode_changes(&mut self, changes: Vec<ModeChange>) {
        for c in changes {
            if c.to == AgentMode::Fallback {
                self.period_fallbacks += 1;
                if !self.mission_landing {
                    self.fire(Monitor::Fallback, c.time, format!("agent {}: {}", c.agent, c.reason));
                }
            }
            if c.to == AgentMode::Failed {
                self.fire(Monitor::Divergence, c.time, format!("agent {}", c.agent));
            }
            let detail = format!("{:?} -> {:?}: {}", c.from, c.to, c.reason);
            self.log(c.time, "fleet", "mode", c.agent.to_string(), detail);
            self.out.mode_changes.push(c);
        }
    }

    fn problem(&self, agents: usize) -> CnmpcProblem {
        let mut p = CnmpcProblem::with_model(agents, self.scenario.model);
        p.horizon_steps = self.scenario.cnmpc.horizon_steps;
        p.sampling_time = self.scenario.cnmpc.sampling_time;
        p.safe_radius = self.scenario.controller.safe_radius;
        p
    }

    fn scheduler_tick(&mut self, now_us: u64) -> Result<()> {
        let now = to_seconds(now_us);
        let tick = self.tick;
        self.tick += 1;
        self.cluster.set_time(now);

        let activity: BTreeMap<u64, PodActivity> = self
            .controllers
            .values_mut()
            .filter_map(|ctx| {
                let duty = if ctx.ticks == 0 { 0.0 } else { ctx.solves as f64 / ctx.ticks as f64 };
                ctx.solves = 0;
                ctx.ticks = 0;
                ctx.pod.map(|p| (p, PodActivity { duty }))
            })
            .collect();

        let actions = reconcile(&self.mission, &mut self.scheduler, &self.cluster.view())?;
        for a in &actions {
            let kind = serde_json::to_value(a).expect("actions serialize")["kind"]
                .as_str()
                .unwrap_or_default()
                .to_string();
            self.out.actions.push(ActionRecord {
                tick,
                time: now,
                kind,
                name: a.target_name().to_string(),
                payload: a.clone(),
            });
        }
        self.cluster.apply(&actions);
        self.cluster.heal();
        self.tunnel.set_routes(self.cluster.route_table(self.scenario.scheduler.base_port));

        let mut homes = BTreeMap::new();
        let mut assignments = BTreeMap::new();
        for (name, d) in self.cluster.deployments() {
            for (slot, agent) in d.spec.assigned_agents.iter().enumerate() {
                homes.insert(*agent, name.clone());
                assignments.insert(*agent, (d.spec.index, slot));
            }
        }
        self.mission.assignments = assignments;
        let mut migrated = Vec::new();
        for (agent, home) in &homes {
            if let Some(previous) = self.homes.get(agent) {
                if previous != home {
                    migrated.push(Migration {
                        time: now,
                        agent: *agent,
                        from: previous.clone(),
                        to: home.clone(),
                    });
                }
            }
        }
        self.homes = homes;
        for m in migrated {
            self.log(now, "scheduler", "migration", m.agent.to_string(), format!("{} -> {}", m.from, m.to));
            self.period_migrations += 1;
            self.out.migrations.push(m);
        }

        let names: BTreeSet<String> = self.cluster.deployments().keys().cloned().collect();
        self.controllers.retain(|n, _| names.contains(n));
        for name in &names {
            let active = self.cluster.active_pod(name).map(|p| p.id);
            let settings = &self.scenario.controller;
            let ctx = self.controllers.entry(name.clone()).or_insert_with(|| ControllerCtx {
                pod: None,
                tracker: RttTracker::new(settings.window, settings.tau_max).strict(settings.strict_deadline),
                violated: false,
                tau_p: self.scenario.load.tau_p_base,
                warm: BTreeMap::new(),
                previous: BTreeMap::new(),
                solves: 0,
                ticks: 0,
            });
            if ctx.pod != active {
                ctx.pod = active;
                ctx.warm.clear();
                ctx.previous.clear();
            }
        }

        self.cluster
            .account(&activity, &self.scenario.scheduler.resources, &self.scenario.demand);
        for (name, ctx) in self.controllers.iter_mut() {
            let u = match (self.scenario.forced_utilization, ctx.pod) {
                (Some(u), _) => Some(u),
                (None, Some(pod)) => self.cluster.pod_node_utilization(pod),
                (None, None) => None,
            };
            if let Some(u) = u {
                ctx.tau_p = processing_time(u.clamp(0.0, 1.0), &self.scenario.load)
                    .map_err(|e| Error::Scenario(format!("{name}: {e}")))?;
            }
        }
        self.check_cluster(now);
        self.push_row(now);
        Ok(())
    }

    fn check_cluster(&mut self, now: f64) {
        let over = self.cluster.request_violations();
        if !over.is_empty() {
            self.fire(Monitor::RequestConservation, now, over.join(","));
        }
        let capped: Vec<String> = self
            .cluster
            .pods()
            .values()
            .filter(|p| p.role == PodRole::Controller && !p.unbounded && p.cpu_usage > p.cpu_limit + 1e-12)
            .map(|p| format!("pod-{} uses {} > {}", p.id, p.cpu_usage, p.cpu_limit))
            .collect();
        if let Some(first) = capped.first() {
            self.fire(Monitor::UsageCap, now, first.clone());
        }
        let names: Vec<String> = self.cluster.deployments().keys().cloned().collect();
        self.zero_pod_streak.retain(|n, _| names.contains(n));
        for name in names {
            let running = self.cluster.running_pods(&name).len();
            let streak = self.zero_pod_streak.entry(name.clone()).or_insert(0);
            *streak = if running == 0 { *streak + 1 } else { 0 };
            let streak = *streak;
            if streak > 1 {
                self.fire(Monitor::HealingLiveness, now, format!("{name} without a running pod for {streak} ticks"));
            }
        }
    }

    fn tracking_error(&self, agent: AgentId, now: f64) -> Option<f64> {
        let sim = self.fleet.agent(agent)?;
        if sim.mode != AgentMode::Tracking || !self.mission.agents.contains(&agent) {
            return None;
        }
        let reference = self.mission.reference_state(agent, now).ok()?;
        Some((sim.state.position - reference.position).norm())
    }

    fn push_row(&mut self, now: f64) {
        let usage = self.cluster.node_usage();
        let nodes = self
            .columns
            .nodes
            .iter()
            .map(|n| {
                let u = usage.get(n).cloned().unwrap_or_default();
                let capacity = self.cluster.node(n).map(|s| s.cpu_capacity).unwrap_or(1.0);
                NodeMetrics {
                    cpu_util: u.cpu_utilization,
                    mem_util: u.mem_utilization,
                    limit_util: u.controller_cpu_limit / capacity,
                }
            })
            .collect();
        let mut deployments = vec![None; self.columns.deployment_slots];
        let mut active = 0;
        for (name, d) in self.cluster.deployments() {
            let pod = self.cluster.active_pod(name);
            active += usize::from(pod.is_some());
            if let Some(slot) = deployments.get_mut(d.spec.index) {
                *slot = Some(DeploymentMetrics {
                    agents: d.spec.assigned_agents.len(),
                    cpu_usage: pod.map(|p| p.cpu_usage).unwrap_or(0.0),
                    cpu_limit: d.spec.cpu_limit,
                });
            }
        }
        let pods_running = self
            .cluster
            .pods()
            .values()
            .filter(|p| p.role == PodRole::Controller && p.phase == crate::cluster::PodPhase::Running)
            .count();
        let means = (!self.global_rtt.is_empty()).then(|| self.global_rtt.means());
        let errors = (0..self.columns.agents)
            .map(|a| self.tracking_error(AgentId(a as u16), now))
            .collect();
        let row = MetricsRow {
            time: now,
            desired_agents: self.mission.desired_agents(),
            deployments_active: active,
            pods_running,
            migrations: std::mem::take(&mut self.period_migrations),
            fallbacks: std::mem::take(&mut self.period_fallbacks),
            tau_u: means.map(|m| m.uplink),
            tau_d: means.map(|m| m.downlink),
            tau_p: means.map(|m| m.processing),
            tau_rrt: means.map(|m| m.rtt),
            deadline_violation: self.controllers.values().any(|c| c.violated),
            min_separation: self.period_min_separation.take(),
            nodes,
            deployments,
            errors,
        };
        self.out.rows.push(row);
        let cutoff = to_micros(now).saturating_sub(CYCLE_RETENTION_US);
        self.cycles.retain(|_, c| c.sent_us >= cutoff);
    }

    fn delayed_input(&self, agent: AgentId, at_us: u64) -> ControlInput {
        self.history
            .get(&agent)
            .and_then(|h| h.iter().rev().find(|(t, _)| *t <= at_us).map(|(_, u)| *u))
            .unwrap_or_else(|| hover_input(&self.scenario.model))
    }

    fn control_tick(&mut self, now_us: u64) -> Result<()> {
        let now = to_seconds(now_us);
        let work: Vec<(String, Option<u64>, Vec<AgentId>)> = self
            .cluster
            .deployments()
            .iter()
            .map(|(name, d)| (name.clone(), self.cluster.active_pod(name).map(|p| p.id), d.spec.assigned_agents.clone()))
            .collect();
        for (name, pod, assigned) in work {
            let Some(ctx) = self.controllers.get_mut(&name) else {
                continue;
            };
            ctx.ticks += 1;
            let Some(pod) = pod else {
                continue;
            };
            if ctx.pod != Some(pod) {
                ctx.pod = Some(pod);
                ctx.warm.clear();
                ctx.previous.clear();
            }
            let agents: Vec<(AgentId, Observation)> = assigned
                .iter()
                .filter_map(|a| self.cloud_odometry.get(*a).map(|(_, o)| (*a, *o)))
                .collect();
            if agents.is_empty() {
                continue;
            }
            ctx.solves += 1;
            let means = (!ctx.tracker.is_empty()).then(|| ctx.tracker.means());
            let tau_p = ctx.tau_p;
            let tau_d = means.map(|m| m.downlink).unwrap_or(0.0);
            let tau_p_hat = means.map(|m| m.processing).unwrap_or(tau_p);

            let n = self.scenario.cnmpc.horizon_steps;
            let ts = self.scenario.cnmpc.sampling_time;
            let mut current = Vec::with_capacity(agents.len());
            let mut refs = Vec::with_capacity(agents.len());
            let mut previous = Vec::with_capacity(agents.len());
            let mut warm = Vec::with_capacity(agents.len());
            for (agent, obs) in &agents {
                let (x0, t0) = if self.scenario.controller.estimator {
                    let age = to_seconds(now_us.saturating_sub(obs.stamp_us));
                    let tau = age + tau_d + tau_p_hat;
                    let u = self.delayed_input(*agent, obs.stamp_us);
                    (estimate_present(&obs.state, &u, &self.scenario.model, tau)?, to_seconds(obs.stamp_us) + tau)
                } else {
                    (obs.state, now)
                };
                current.push(x0);
                refs.push(reference_window(&self.mission, *agent, t0, n, ts)?);
                let ctx = &self.controllers[&name];
                previous.push(ctx.previous.get(agent).copied().unwrap_or_else(|| hover_input(&self.scenario.model)));
                warm.push(ctx.warm.get(agent).cloned().unwrap_or_default());
            }
            let problem = self.problem(agents.len());
            let solution = solve(
                &problem,
                &current,
                &ReferenceWindow::new(refs),
                &previous,
                Some(&warm),
                &self.scenario.controller.solver,
            );
            let solution = match solution {
                Ok(s) => s,
                Err(e) => {
                    self.log(now, "controller", "solve_error", name.clone(), e.to_string());
                    continue;
                }
            };
            self.out.solves += 1;
            writeln!(
                self.out.solver_timing_csv,
                "{now:.3},{name},{},{:.4},{},{},{}",
                agents.len(),
                solution.solve_wall_time * 1e3,
                solution.inner_iterations,
                solution.penalty_rounds,
                u8::from(solution.converged)
            )
            .unwrap();
            let send_us = now_us + to_micros(tau_p);
            for (i, (agent, obs)) in agents.iter().enumerate() {
                let input = solution.inputs[i][0];
                let seq = {
                    let s = self.command_seq.entry(*agent).or_insert(0);
                    let current = *s;
                    *s = s.wrapping_add(1);
                    current
                };
                let message = WireMessage::command(*agent, seq, now_us, &input);
                self.pending.insert((send_us, self.serial), message);
                self.serial += 1;
                self.cycles.insert(
                    (*agent, seq),
                    Cycle {
                        deployment: name.clone(),
                        uplink: obs.uplink_delay,
                        processing: tau_p,
                        sent_us: send_us,
                    },
                );
                let history = self.history.entry(*agent).or_default();
                history.push_back((send_us + to_micros(tau_d), input));
                if history.len() > HISTORY_LEN {
                    history.pop_front();
                }
                let ctx = self.controllers.get_mut(&name).expect("controller exists");
                ctx.warm.insert(*agent, solution.inputs[i].clone());
                ctx.previous.insert(*agent, input);
            }
        }
        Ok(())
    }

    fn sample_geometry(&mut self, now: f64) {
        let tracking: Vec<(AgentId, nalgebra::Vector3<f64>)> = self
            .fleet
            .agents()
            .filter(|a| a.mode == AgentMode::Tracking)
            .map(|a| (a.id, a.state.position))
            .collect();
        let floor = 0.9 * self.scenario.controller.safe_radius;
        for (i, (a, pa)) in tracking.iter().enumerate() {
            for (b, pb) in &tracking[i + 1..] {
                let d = (pa.xy() - pb.xy()).norm();
                self.period_min_separation = fmin(self.period_min_separation, d);
                self.out.min_separation = fmin(self.out.min_separation, d);
                let same = self.homes.contains_key(a) && self.homes.get(a) == self.homes.get(b);
                if same {
                    self.out.min_separation_same_controller = fmin(self.out.min_separation_same_controller, d);
                    if d < floor {
                        self.fire(Monitor::Collision, now, format!("agents {a} and {b} at {d:.3} m"));
                    }
                }
            }
        }
        let errors = (0..self.columns.agents)
            .map(|a| self.tracking_error(AgentId(a as u16), now))
            .collect();
        self.out.error_trace.push(ErrorSample { time: now, errors });
    }
}
