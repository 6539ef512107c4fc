use crate::dynamics::{self, AgentState, ControlInput, StateVec, INPUT_DIM, STATE_DIM};
use crate::error::{Error, Result};

use super::{state_stage_cost, CnmpcProblem, ReferenceWindow};

/// Separation used when two agents coincide exactly, so the penalty still
/// has a direction. The lower index is pushed towards −x.
const COINCIDENT_BIAS: f64 = 1e-9;

/// Everything in the shooting objective except the decision vector.
///
/// Decision vectors are agent-major: input `c` of agent `i` at step `j`
/// lives at `(i * N + j) * 3 + c`.
#[derive(Debug, Clone)]
pub struct ShootingData {
    pub problem: CnmpcProblem,
    pub initial: Vec<StateVec>,
    pub refs: Vec<Vec<StateVec>>,
    pub previous: Vec<[f64; INPUT_DIM]>,
    /// Weight on the squared separation residuals; zero disables them.
    pub penalty: f64,
}

impl ShootingData {
    pub fn new(
        problem: &CnmpcProblem,
        current: &[AgentState],
        refs: &ReferenceWindow,
        previous_input: &[ControlInput],
        penalty: f64,
    ) -> Result<Self> {
        problem.validate()?;
        refs.check(problem)?;
        if current.len() != problem.agent_count || previous_input.len() != problem.agent_count {
            return Err(Error::contract("current/previous_input must have agent_count entries"));
        }
        Ok(ShootingData {
            problem: problem.clone(),
            initial: current.iter().map(AgentState::to_vector).collect(),
            refs: refs
                .samples
                .iter()
                .map(|s| s.iter().map(AgentState::to_vector).collect())
                .collect(),
            previous: previous_input.iter().map(|u| u.to_array()).collect(),
            penalty,
        })
    }

    fn input(&self, z: &[f64], agent: usize, step: usize) -> ControlInput {
        let k = (agent * self.problem.horizon_steps + step) * INPUT_DIM;
        ControlInput::from_slice(&z[k..k + INPUT_DIM])
    }

    /// State trajectories `0..=N` per agent.
    pub fn forward(&self, z: &[f64]) -> Vec<Vec<StateVec>> {
        let p = &self.problem;
        (0..p.agent_count)
            .map(|i| {
                let mut traj = Vec::with_capacity(p.horizon_steps + 1);
                let mut x = self.initial[i];
                traj.push(x);
                for j in 0..p.horizon_steps {
                    x = dynamics::rk4(&x, &self.input(z, i, j), &p.model, p.sampling_time);
                    traj.push(x);
                }
                traj
            })
            .collect()
    }

    fn input_terms(&self, z: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let p = &self.problem;
        let n = p.horizon_steps;
        let hover = p.hover().to_array();
        let (qd, qh) = (&p.input_smoothness_weights, &p.input_hover_weights);
        let mut value = 0.0;
        let mut grad = grad;
        for i in 0..p.agent_count {
            for j in 0..n {
                let base = (i * n + j) * INPUT_DIM;
                for c in 0..INPUT_DIM {
                    let u = z[base + c];
                    let prev = if j == 0 { self.previous[i][c] } else { z[base + c - INPUT_DIM] };
                    let du = u - prev;
                    let dh = u - hover[c];
                    value += qd[c] * du * du + qh[c] * dh * dh;
                    if let Some(g) = grad.as_deref_mut() {
                        g[base + c] += 2.0 * qd[c] * du + 2.0 * qh[c] * dh;
                        if j > 0 {
                            g[base + c - INPUT_DIM] -= 2.0 * qd[c] * du;
                        }
                    }
                }
            }
        }
        value
    }

    /// Squared-residual penalty at one horizon sample; accumulates position
    /// gradients into `adj` when given.
    fn penalty_at(&self, states: &[&StateVec], adj: Option<&mut [StateVec]>) -> f64 {
        let r2 = self.problem.safe_radius * self.problem.safe_radius;
        let mut value = 0.0;
        let mut adj = adj;
        for l in 0..states.len() {
            for i in (l + 1)..states.len() {
                let mut dx = states[l][0] - states[i][0];
                let dy = states[l][1] - states[i][1];
                let res = r2 - dx * dx - dy * dy;
                if res <= 0.0 {
                    continue;
                }
                value += self.penalty * res * res;
                if let Some(a) = adj.as_deref_mut() {
                    if dx == 0.0 && dy == 0.0 {
                        dx = -COINCIDENT_BIAS;
                    }
                    let gx = -4.0 * self.penalty * res * dx;
                    let gy = -4.0 * self.penalty * res * dy;
                    a[l][0] += gx;
                    a[l][1] += gy;
                    a[i][0] -= gx;
                    a[i][1] -= gy;
                }
            }
        }
        value
    }

    fn active_penalty(&self) -> bool {
        self.penalty > 0.0 && self.problem.agent_count > 1
    }

    /// Cost plus separation penalty.
    ///
    /// Sums in the same order as [`merit_and_gradient`](Self::merit_and_gradient)
    /// so both return bit-identical values.
    pub fn merit(&self, z: &[f64]) -> f64 {
        let p = &self.problem;
        let xs = self.forward(z);
        let mut value = self.input_terms(z, None);
        for j in (0..=p.horizon_steps).rev() {
            for i in 0..p.agent_count {
                value += state_stage_cost(&xs[i][j], &self.refs[i][j], &p.state_weights);
            }
            if j > 0 && self.active_penalty() {
                let states: Vec<&StateVec> = xs.iter().map(|t| &t[j]).collect();
                value += self.penalty_at(&states, None);
            }
        }
        if value.is_finite() {
            value
        } else {
            f64::INFINITY
        }
    }

    /// Merit and its exact gradient by a backward (adjoint) sweep.
    pub fn merit_and_gradient(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let p = &self.problem;
        let n = p.horizon_steps;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let xs = self.forward(z);
        let mut value = self.input_terms(z, Some(grad));
        let mut adj = vec![StateVec::zeros(); p.agent_count];

        for j in (0..=n).rev() {
            for i in 0..p.agent_count {
                let (x, r) = (&xs[i][j], &self.refs[i][j]);
                value += state_stage_cost(x, r, &p.state_weights);
                for k in 0..STATE_DIM {
                    adj[i][k] += 2.0 * p.state_weights[k] * (x[k] - r[k]);
                }
            }
            if j > 0 && self.active_penalty() {
                let states: Vec<&StateVec> = xs.iter().map(|t| &t[j]).collect();
                value += self.penalty_at(&states, Some(&mut adj));
            }
            if j == 0 {
                break;
            }
            for i in 0..p.agent_count {
                let u = self.input(z, i, j - 1);
                let (gx, gu) = dynamics::rk4_vjp(&xs[i][j - 1], &u, &p.model, p.sampling_time, &adj[i]);
                let base = (i * n + j - 1) * INPUT_DIM;
                for c in 0..INPUT_DIM {
                    grad[base + c] += gu[c];
                }
                adj[i] = gx;
            }
        }
        if value.is_finite() {
            value
        } else {
            f64::INFINITY
        }
    }

    /// Largest separation residual over pairs and samples `1..=N`.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        if self.problem.agent_count < 2 {
            return 0.0;
        }
        let xs = self.forward(z);
        let r2 = self.problem.safe_radius * self.problem.safe_radius;
        let mut worst: f64 = 0.0;
        for j in 1..=self.problem.horizon_steps {
            for l in 0..xs.len() {
                for i in (l + 1)..xs.len() {
                    let dx = xs[l][j][0] - xs[i][j][0];
                    let dy = xs[l][j][1] - xs[i][j][1];
                    worst = worst.max(r2 - dx * dx - dy * dy);
                }
            }
        }
        worst
    }

    /// Number of agent pairs times constrained horizon samples.
    pub fn residual_count(&self) -> usize {
        let na = self.problem.agent_count;
        na * na.saturating_sub(1) / 2 * self.problem.horizon_steps
    }
}

/// Gradient of cost plus separation penalty with respect to the stacked inputs.
///
/// Panics if `decision` does not have `problem.decision_len()` entries.
pub fn cost_gradient(decision: &[f64], data: &ShootingData) -> Vec<f64> {
    assert_eq!(decision.len(), data.problem.decision_len(), "decision vector length");
    let mut g = vec![0.0; decision.len()];
    data.merit_and_gradient(decision, &mut g);
    g
}
