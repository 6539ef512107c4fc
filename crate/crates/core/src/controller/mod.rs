//! Centralized NMPC for a group of agents.
//!
//! The problem is posed in single-shooting form: the decision variables are
//! the input sequences of every agent, and predicted states are obtained by
//! rolling the model forward. Input bounds are handled by projection and the
//! pairwise separation constraints by a quadratic penalty (see [`solver`]).

mod gradient;
pub mod solver;

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, AgentState, ControlInput, ModelParams, StateVec, INPUT_DIM, STATE_DIM};
use crate::error::{Error, Result};

pub use gradient::{cost_gradient, ShootingData};
pub use solver::{shift_warm_start, solve, ControlSolution, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnmpcProblem {
    pub horizon_steps: usize,
    /// Seconds between horizon samples.
    pub sampling_time: f64,
    pub agent_count: usize,
    /// Diagonal of the state tracking weight, ordered `[p, v, (roll, pitch, yaw)]`.
    pub state_weights: [f64; STATE_DIM],
    /// Diagonal of the input-rate weight.
    pub input_smoothness_weights: [f64; INPUT_DIM],
    /// Diagonal of the hover-proximity weight.
    pub input_hover_weights: [f64; INPUT_DIM],
    pub input_lower: ControlInput,
    pub input_upper: ControlInput,
    /// Minimum planar separation, meters.
    pub safe_radius: f64,
    pub model: ModelParams,
}

impl Default for CnmpcProblem {
    fn default() -> Self {
        CnmpcProblem::with_model(1, ModelParams::default())
    }
}

impl CnmpcProblem {
    pub fn with_model(agent_count: usize, model: ModelParams) -> Self {
        let max_tilt = 0.35;
        CnmpcProblem {
            horizon_steps: 20,
            sampling_time: 0.05,
            agent_count,
            state_weights: [5.0, 5.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0],
            input_smoothness_weights: [2.0; INPUT_DIM],
            input_hover_weights: [1.0; INPUT_DIM],
            input_lower: ControlInput::new(-max_tilt, -max_tilt, 0.0),
            input_upper: ControlInput::new(max_tilt, max_tilt, 2.0 * model.mass * dynamics::GRAVITY),
            safe_radius: 0.5,
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.agent_count == 0 {
            return Err(Error::contract("agent_count must be positive"));
        }
        if !(self.sampling_time > 0.0) {
            return Err(Error::contract("sampling_time must be positive"));
        }
        let weights = self
            .state_weights
            .iter()
            .chain(&self.input_smoothness_weights)
            .chain(&self.input_hover_weights);
        if weights.clone().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::contract("weights must be finite and non-negative"));
        }
        if !self.input_lower.to_array().iter().zip(self.input_upper.to_array()).all(|(l, u)| *l <= u) {
            return Err(Error::contract("input_lower must not exceed input_upper"));
        }
        if !(self.safe_radius > 0.0) {
            return Err(Error::contract("safe_radius must be positive"));
        }
        Ok(())
    }

    /// Number of scalar decision variables.
    pub fn decision_len(&self) -> usize {
        self.agent_count * self.horizon_steps * INPUT_DIM
    }

    pub fn hover(&self) -> ControlInput {
        dynamics::hover_input(&self.model)
    }
}

/// Reference states per agent over the horizon, `agent_count × (horizon_steps + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceWindow {
    pub samples: Vec<Vec<AgentState>>,
}

impl ReferenceWindow {
    pub fn new(samples: Vec<Vec<AgentState>>) -> Self {
        ReferenceWindow { samples }
    }

    /// Every agent holds `targets[i]` over the whole horizon.
    pub fn hold(targets: &[AgentState], horizon_steps: usize) -> Self {
        ReferenceWindow {
            samples: targets.iter().map(|t| vec![*t; horizon_steps + 1]).collect(),
        }
    }

    pub(crate) fn check(&self, problem: &CnmpcProblem) -> Result<()> {
        if self.samples.len() != problem.agent_count
            || self.samples.iter().any(|s| s.len() != problem.horizon_steps + 1)
        {
            return Err(Error::contract(format!(
                "reference window must be {} x {}",
                problem.agent_count,
                problem.horizon_steps + 1
            )));
        }
        Ok(())
    }
}

fn check_inputs(inputs: &[Vec<ControlInput>], problem: &CnmpcProblem) -> Result<()> {
    if inputs.len() != problem.agent_count
        || inputs.iter().any(|s| s.len() != problem.horizon_steps)
    {
        return Err(Error::contract(format!(
            "input sequences must be {} x {}",
            problem.agent_count, problem.horizon_steps
        )));
    }
    Ok(())
}

/// Predicted trajectories under `inputs`; entry 0 of each is the initial state.
pub fn rollout(
    initial: &[AgentState],
    inputs: &[Vec<ControlInput>],
    problem: &CnmpcProblem,
) -> Result<Vec<Vec<AgentState>>> {
    if initial.len() != problem.agent_count {
        return Err(Error::contract("initial state count must equal agent_count"));
    }
    check_inputs(inputs, problem)?;
    let dt = problem.sampling_time;
    initial
        .iter()
        .zip(inputs)
        .map(|(x0, seq)| {
            let mut traj = Vec::with_capacity(seq.len() + 1);
            traj.push(*x0);
            let mut x = *x0;
            for u in seq {
                x = dynamics::step(&x, u, &problem.model, dt)?;
                traj.push(x);
            }
            Ok(traj)
        })
        .collect()
}

fn weighted_sq(diff: &[f64], weights: &[f64]) -> f64 {
    diff.iter().zip(weights).map(|(d, w)| w * d * d).sum()
}

pub(crate) fn state_stage_cost(x: &StateVec, r: &StateVec, weights: &[f64; STATE_DIM]) -> f64 {
    let diff: [f64; STATE_DIM] = std::array::from_fn(|k| r[k] - x[k]);
    weighted_sq(&diff, weights)
}

/// Tracking, input-rate and hover-proximity cost summed over agents and horizon.
///
/// States contribute at every sample `0..=N`, inputs at `0..N`; the rate term
/// at the first step is taken against `previous_input`.
pub fn cost(
    trajectories: &[Vec<AgentState>],
    inputs: &[Vec<ControlInput>],
    previous_input: &[ControlInput],
    refs: &ReferenceWindow,
    problem: &CnmpcProblem,
) -> Result<f64> {
    check_inputs(inputs, problem)?;
    refs.check(problem)?;
    if trajectories.len() != problem.agent_count
        || trajectories.iter().any(|t| t.len() != problem.horizon_steps + 1)
        || previous_input.len() != problem.agent_count
    {
        return Err(Error::contract("trajectory/previous_input dimensions do not match problem"));
    }
    let hover = problem.hover().to_array();
    let mut total = 0.0;
    for i in 0..problem.agent_count {
        for (x, r) in trajectories[i].iter().zip(&refs.samples[i]) {
            total += state_stage_cost(&x.to_vector(), &r.to_vector(), &problem.state_weights);
        }
        let mut prev = previous_input[i].to_array();
        for u in &inputs[i] {
            let u = u.to_array();
            let du: [f64; INPUT_DIM] = std::array::from_fn(|k| u[k] - prev[k]);
            let dh: [f64; INPUT_DIM] = std::array::from_fn(|k| u[k] - hover[k]);
            total += weighted_sq(&du, &problem.input_smoothness_weights);
            total += weighted_sq(&dh, &problem.input_hover_weights);
            prev = u;
        }
    }
    Ok(total)
}

/// Planar separation violation `[r² − Δx² − Δy²]₊`, in m².
pub fn collision_residual(state_l: &AgentState, state_i: &AgentState, safe_radius: f64) -> f64 {
    let dx = state_l.position.x - state_i.position.x;
    let dy = state_l.position.y - state_i.position.y;
    (safe_radius * safe_radius - dx * dx - dy * dy).max(0.0)
}

/// Largest separation violation over all pairs and horizon samples `1..=N`.
pub fn max_collision_residual(trajectories: &[Vec<AgentState>], safe_radius: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for l in 0..trajectories.len() {
        for i in (l + 1)..trajectories.len() {
            for (a, b) in trajectories[l].iter().zip(&trajectories[i]).skip(1) {
                worst = worst.max(collision_residual(a, b, safe_radius));
            }
        }
    }
    worst
}
