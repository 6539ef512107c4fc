use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::parse_metrics;
use super::scenario::{Monitor, Scenario};
use super::sim::{run, RunOutput};
use crate::cluster::processing_time;
use crate::controller::{cost_gradient, CnmpcProblem, ReferenceWindow, ShootingData};
use crate::dynamics::{hover_input, AgentState, ControlInput};
use crate::error::Result;
use crate::schedmech::{partition_agents, required_cnmpcs};
use crate::transport::{decode, encode, HighLevelCode, WireMessage};
use crate::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropertyStatus {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub status: PropertyStatus,
    pub detail: String,
}

impl PropertyResult {
    fn new(name: &str, ok: bool, detail: impl Into<String>) -> Self {
        PropertyResult {
            name: name.to_string(),
            status: if ok { PropertyStatus::Pass } else { PropertyStatus::Fail },
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub scenario: String,
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.status == PropertyStatus::Pass)
    }
}

/// One `PASS|FAIL name: detail` line per property.
impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.properties {
            let tag = match p.status {
                PropertyStatus::Pass => "PASS",
                PropertyStatus::Fail => "FAIL",
            };
            writeln!(f, "{tag} {}: {}", p.name, p.detail)?;
        }
        Ok(())
    }
}

/// Runs `scenario` and checks its invariants. With `metrics`, the given file
/// is checked against the schema instead of the freshly rendered one.
pub fn verify(scenario: &Scenario, metrics: Option<&str>) -> Result<VerifyReport> {
    let output = run(scenario)?;
    let mut properties = vec![
        partition_oracle(scenario.scheduler.agent_max),
        codec_fuzz(scenario.seed, 2000),
        gradient_spot_check(scenario),
    ];
    properties.extend(monitor_properties(&output));
    let rendered = output.metrics_csv();
    let text = metrics.unwrap_or(&rendered);
    properties.push(match parse_metrics(text) {
        Ok(t) => PropertyResult::new("metrics_schema", true, format!("{} rows, {} columns", t.rows.len(), t.header.len())),
        Err(e) => PropertyResult::new("metrics_schema", false, e),
    });
    Ok(VerifyReport {
        scenario: scenario.name.clone(),
        properties,
    })
}

fn monitor_properties(output: &RunOutput) -> Vec<PropertyResult> {
    output
        .monitors
        .iter()
        .map(|m| {
            let detail = match (m.fired, m.expected) {
                (false, _) => "held".to_string(),
                (true, true) => format!("fired as expected at {:.2} s: {}", m.first_time.unwrap_or(0.0), m.detail),
                (true, false) => format!("{} times, first at {:.2} s: {}", m.count, m.first_time.unwrap_or(0.0), m.detail),
            };
            let detail = match (m.monitor, output.min_separation_same_controller) {
                (Monitor::Collision, Some(d)) => format!("{detail}; closest pair {d:.3} m"),
                _ => detail,
            };
            PropertyResult::new(m.monitor.name(), !m.failed(), detail)
        })
        .collect()
}

/// Partition sizes sum to the agent count, differ by at most one and never
/// exceed `agent_max`.
fn partition_oracle(agent_max: usize) -> PropertyResult {
    for n in 0..=64 {
        let k = required_cnmpcs(n, agent_max);
        let sizes = match partition_agents(n, k) {
            Ok(s) => s,
            Err(e) => return PropertyResult::new("partition", false, format!("n={n}: {e}")),
        };
        let max = sizes.iter().copied().max().unwrap_or(0);
        let min = sizes.iter().copied().min().unwrap_or(0);
        if sizes.iter().sum::<usize>() != n || max - min > 1 || max > agent_max || sizes.len() != k {
            return PropertyResult::new("partition", false, format!("n={n}: {sizes:?}"));
        }
    }
    PropertyResult::new("partition", true, format!("0..=64 agents, agent_max {agent_max}"))
}

/// Seeded fuzz: valid frames round-trip, corrupted or random bytes either
/// decode to a frame that re-encodes identically or are rejected.
pub(crate) fn codec_fuzz(seed: u64, cases: usize) -> PropertyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected = 0;
    for case in 0..cases {
        let agent = AgentId(rng.random());
        let seq = rng.random();
        let stamp = rng.random::<u64>() >> 1;
        let message = match case % 3 {
            0 => {
                let mut s = AgentState::at_rest(nalgebra::Vector3::new(rng.random(), rng.random(), rng.random()));
                s.velocity = nalgebra::Vector3::new(rng.random(), rng.random(), rng.random());
                WireMessage::odometry(agent, seq, stamp, &s)
            }
            1 => WireMessage::command(
                agent,
                seq,
                stamp,
                &ControlInput::new(rng.random(), rng.random(), rng.random::<f64>() * 20.0),
            ),
            _ => WireMessage::HighLevel {
                agent_id: agent,
                code: if rng.random() { HighLevelCode::TakeOff } else { HighLevelCode::SafetyLand },
            },
        };
        let frame = encode(&message);
        match decode(&frame) {
            Ok(back) if encode(&back) == frame => {}
            other => return PropertyResult::new("codec", false, format!("case {case}: round trip gave {other:?}")),
        }
        let mut corrupted = frame.clone();
        match rng.random_range(0..3) {
            0 => {
                let i = rng.random_range(0..corrupted.len());
                corrupted[i] ^= 1 << rng.random_range(0..8);
            }
            1 => corrupted.truncate(rng.random_range(0..frame.len())),
            _ => corrupted = (0..rng.random_range(0..100)).map(|_| rng.random()).collect(),
        }
        match decode(&corrupted) {
            Ok(m) if encode(&m) != corrupted => {
                return PropertyResult::new("codec", false, format!("case {case}: accepted a frame that re-encodes differently"))
            }
            Ok(_) => {}
            Err(_) => rejected += 1,
        }
    }
    PropertyResult::new("codec", true, format!("{cases} frames round-tripped, {rejected} corruptions rejected"))
}

/// Adjoint gradient against central differences on a small two-agent
/// problem built from the scenario's model.
pub(crate) fn gradient_spot_check(scenario: &Scenario) -> PropertyResult {
    let mut problem = CnmpcProblem::with_model(2, scenario.model);
    problem.horizon_steps = 6;
    problem.sampling_time = scenario.cnmpc.sampling_time;
    problem.safe_radius = scenario.controller.safe_radius;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x9e37);
    let current = vec![
        AgentState::at_rest(nalgebra::Vector3::new(0.0, 0.0, 2.0)),
        AgentState::at_rest(nalgebra::Vector3::new(0.3, 0.1, 2.0)),
    ];
    let targets = vec![
        AgentState::at_rest(nalgebra::Vector3::new(1.0, 0.0, 2.0)),
        AgentState::at_rest(nalgebra::Vector3::new(-1.0, 0.0, 2.0)),
    ];
    let refs = ReferenceWindow::hold(&targets, problem.horizon_steps);
    let hover = hover_input(&scenario.model);
    let data = match ShootingData::new(&problem, &current, &refs, &[hover, hover], 50.0) {
        Ok(d) => d,
        Err(e) => return PropertyResult::new("gradient", false, e.to_string()),
    };
    let z: Vec<f64> = (0..problem.decision_len())
        .map(|i| hover.to_array()[i % 3] + rng.random_range(-0.05..0.05))
        .collect();
    let g = cost_gradient(&z, &data);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..12 {
        let i = rng.random_range(0..z.len());
        let (mut zp, mut zm) = (z.clone(), z.clone());
        zp[i] += h;
        zm[i] -= h;
        let fd = (data.merit(&zp) - data.merit(&zm)) / (2.0 * h);
        let rel = (g[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(rel);
    }
    PropertyResult::new("gradient", worst < 1e-4, format!("worst relative error {worst:.2e} over 12 coordinates"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub utilization: f64,
    pub tau_p: f64,
    /// Mean round trip observed in the closed-loop run.
    pub tau_rrt: Option<f64>,
    pub in_band: bool,
    pub deadline_ok: bool,
}

/// Maps each utilization through the processing-time model and checks the
/// deadline with a short closed-loop run pinned at that utilization.
pub fn sweep_cpu(base: &Scenario, points: &[f64], run_seconds: f64) -> Result<Vec<SweepPoint>> {
    points
        .iter()
        .map(|&u| {
            let mut scenario = base.clone();
            scenario.forced_utilization = Some(u);
            scenario.duration = run_seconds;
            scenario.timeline.retain(|e| e.at < run_seconds);
            scenario.expect = Monitor::ALL.to_vec();
            let tau_p = processing_time(u, &scenario.load)?;
            let out = run(&scenario)?;
            let [lo, hi] = scenario.load.target_band;
            Ok(SweepPoint {
                utilization: u,
                tau_p,
                tau_rrt: out.rows.last().and_then(|r| r.tau_rrt),
                in_band: (lo..=hi).contains(&u),
                deadline_ok: out.violations.is_empty(),
            })
        })
        .collect()
}
