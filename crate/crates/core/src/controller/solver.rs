//! Box-constrained quasi-Newton solver for the shooting problem.
//!
//! Each inner iteration takes a forward-backward (projected gradient) step
//! with a backtracked step size, then tries an L-BFGS direction restricted to
//! the free variables and keeps it only if it does at least as well as the
//! forward-backward point. Separation constraints are enforced by an outer
//! loop that raises the penalty weight until the worst residual is within
//! tolerance.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::{AgentState, ControlInput, INPUT_DIM};
use crate::error::{Error, Result};

use super::{cost, rollout, CnmpcProblem, ReferenceWindow, ShootingData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_inner_iterations: usize,
    /// Infinity-norm bound on the projected gradient `z − P(z − ∇f)`.
    pub gradient_tolerance: f64,
    pub lbfgs_memory: usize,
    pub penalty_initial: f64,
    pub penalty_multiplier: f64,
    pub penalty_max: f64,
    /// Accepted separation residual, m².
    pub constraint_tolerance: f64,
    /// Keep the merit value of every accepted iterate in the solution.
    pub record_merits: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_inner_iterations: 100,
            gradient_tolerance: 1e-4,
            lbfgs_memory: 10,
            penalty_initial: 10.0,
            penalty_multiplier: 10.0,
            penalty_max: 1e6,
            constraint_tolerance: 1e-3,
            record_merits: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty_multiplier > 1.0) {
            return Err(Error::contract("penalty_multiplier must exceed 1"));
        }
        if !(self.gradient_tolerance > 0.0 && self.constraint_tolerance > 0.0) {
            return Err(Error::contract("tolerances must be positive"));
        }
        if !(self.penalty_initial > 0.0 && self.penalty_max >= self.penalty_initial) {
            return Err(Error::contract("need 0 < penalty_initial <= penalty_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSolution {
    /// Per agent, `horizon_steps` inputs.
    pub inputs: Vec<Vec<ControlInput>>,
    /// Per agent, `horizon_steps + 1` states starting at the current state.
    pub predicted_states: Vec<Vec<AgentState>>,
    /// Tracking cost without the separation penalty.
    pub cost: f64,
    pub inner_iterations: usize,
    pub penalty_rounds: usize,
    /// Wall-clock seconds spent in [`solve`].
    pub solve_wall_time: f64,
    pub converged: bool,
    /// Worst separation residual over the horizon, m².
    pub max_constraint_violation: f64,
    /// Merit values of accepted iterates, one list per penalty round.
    /// Empty unless [`SolverConfig::record_merits`] is set.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merit_history: Vec<Vec<f64>>,
}

impl ControlSolution {
    /// Inputs to actuate now.
    pub fn first_inputs(&self) -> Vec<ControlInput> {
        self.inputs.iter().map(|s| s[0]).collect()
    }
}

/// Drops the first input and repeats the last one; pads or truncates to `horizon`.
pub fn shift_warm_start(previous: &[ControlInput], horizon: usize) -> Vec<ControlInput> {
    let Some(last) = previous.last().copied() else {
        return Vec::new();
    };
    let mut out: Vec<ControlInput> = previous.iter().skip(1).copied().take(horizon).collect();
    out.resize(horizon, last);
    out
}

struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    fn new(problem: &CnmpcProblem) -> Self {
        let n = problem.decision_len();
        let (l, u) = (problem.input_lower.to_array(), problem.input_upper.to_array());
        Bounds {
            lo: (0..n).map(|k| l[k % INPUT_DIM]).collect(),
            hi: (0..n).map(|k| u[k % INPUT_DIM]).collect(),
        }
    }

    fn project(&self, z: &mut [f64]) {
        for (k, v) in z.iter_mut().enumerate() {
            *v = v.clamp(self.lo[k], self.hi[k]);
        }
    }

    fn projected_step(&self, z: &[f64], d: &[f64], t: f64) -> Vec<f64> {
        let mut out: Vec<f64> = z.iter().zip(d).map(|(a, b)| a + t * b).collect();
        self.project(&mut out);
        out
    }

    /// `‖z − P(z − g)‖∞`
    fn projected_gradient_norm(&self, z: &[f64], g: &[f64]) -> f64 {
        z.iter()
            .zip(g)
            .enumerate()
            .map(|(k, (a, b))| (a - (a - b).clamp(self.lo[k], self.hi[k])).abs())
            .fold(0.0, f64::max)
    }

    /// Variables not pinned at a bound by the gradient.
    fn free_mask(&self, z: &[f64], g: &[f64]) -> Vec<bool> {
        z.iter()
            .zip(g)
            .enumerate()
            .map(|(k, (v, gk))| !((*v <= self.lo[k] && *gk > 0.0) || (*v >= self.hi[k] && *gk < 0.0)))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Lbfgs {
    memory: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl Lbfgs {
    fn new(memory: usize) -> Self {
        Lbfgs {
            memory,
            pairs: VecDeque::with_capacity(memory),
        }
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if self.memory == 0 || !(sy > 1e-12 * norm(&s) * norm(&y)) {
            return;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// `−H·q` by the two-loop recursion, or `None` without curvature pairs.
    fn direction(&self, q: &[f64]) -> Option<Vec<f64>> {
        let (s_last, y_last, _) = self.pairs.back()?;
        let mut q = q.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qk, yk)| *qk -= a * yk);
            alphas.push(a);
        }
        let h0 = dot(s_last, y_last) / dot(y_last, y_last);
        q.iter_mut().for_each(|v| *v *= h0);
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qk, sk)| *qk += (a - b) * sk);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        Some(q)
    }
}

struct InnerOutcome {
    iterations: usize,
    converged: bool,
    merits: Vec<f64>,
}

fn initial_step_size(data: &ShootingData, z: &[f64], g: &[f64]) -> f64 {
    let gn = norm(g);
    if gn == 0.0 {
        return 1.0;
    }
    let delta = 1e-4;
    let z2: Vec<f64> = z.iter().zip(g).map(|(a, b)| a - delta * b / gn).collect();
    let mut g2 = vec![0.0; z.len()];
    data.merit_and_gradient(&z2, &mut g2);
    let diff: Vec<f64> = g2.iter().zip(g).map(|(a, b)| a - b).collect();
    let lipschitz = norm(&diff) / delta;
    if lipschitz.is_finite() && lipschitz > 1e-9 {
        (0.95 / lipschitz).min(1e3)
    } else {
        1.0
    }
}

fn minimize(
    data: &ShootingData,
    bounds: &Bounds,
    z: &mut Vec<f64>,
    config: &SolverConfig,
) -> InnerOutcome {
    let n = z.len();
    bounds.project(z);
    let mut g = vec![0.0; n];
    let mut f = data.merit_and_gradient(z, &mut g);
    let mut merits = vec![f];
    let mut gamma = initial_step_size(data, z, &g);
    let mut lbfgs = Lbfgs::new(config.lbfgs_memory);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_inner_iterations {
        if bounds.projected_gradient_norm(z, &g) <= config.gradient_tolerance {
            converged = true;
            break;
        }

        // Forward-backward step with sufficient decrease on the merit.
        let (z_fb, f_fb) = loop {
            let z_bar = bounds.projected_step(z, &g, -gamma);
            let r: Vec<f64> = z.iter().zip(&z_bar).map(|(a, b)| a - b).collect();
            let f_bar = data.merit(&z_bar);
            let bound = f - dot(&g, &r) + dot(&r, &r) / (2.0 * gamma);
            if f_bar <= bound && f_bar <= f {
                break (Some(z_bar), f_bar);
            }
            gamma *= 0.5;
            if gamma < 1e-16 {
                break (None, f);
            }
        };
        let Some(z_fb) = z_fb else {
            break;
        };

        let mut next = z_fb;
        let mut f_next = f_fb;
        let mask = bounds.free_mask(z, &g);
        let masked_g: Vec<f64> = g.iter().zip(&mask).map(|(v, m)| if *m { *v } else { 0.0 }).collect();
        if let Some(mut d) = lbfgs.direction(&masked_g) {
            d.iter_mut().zip(&mask).for_each(|(v, m)| {
                if !*m {
                    *v = 0.0
                }
            });
            if dot(&d, &g) < 0.0 {
                for tau in [1.0, 0.5, 0.25] {
                    let z_t = bounds.projected_step(z, &d, tau);
                    let f_t = data.merit(&z_t);
                    if f_t <= f_fb {
                        next = z_t;
                        f_next = f_t;
                        break;
                    }
                }
            }
        }

        let mut g_next = vec![0.0; n];
        let f_check = data.merit_and_gradient(&next, &mut g_next);
        debug_assert_eq!(f_check.to_bits(), f_next.to_bits());
        let s: Vec<f64> = next.iter().zip(z.iter()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_next.iter().zip(&g).map(|(a, b)| a - b).collect();
        lbfgs.push(s, y);
        *z = next;
        g = g_next;
        f = f_check;
        merits.push(f);
        iterations += 1;
    }
    if !converged && bounds.projected_gradient_norm(z, &g) <= config.gradient_tolerance {
        converged = true;
    }
    InnerOutcome {
        iterations,
        converged,
        merits,
    }
}

/// Solves the centralized problem from the current states.
///
/// `warm_start` is the previous solution's input sequences (one per agent);
/// they are shifted by one step before use. Without it the solver starts
/// from `previous_input` held over the horizon. The returned inputs always
/// lie inside the input box, whether or not the solver converged.
pub fn solve(
    problem: &CnmpcProblem,
    current: &[AgentState],
    refs: &ReferenceWindow,
    previous_input: &[ControlInput],
    warm_start: Option<&[Vec<ControlInput>]>,
    config: &SolverConfig,
) -> Result<ControlSolution> {
    let started = Instant::now();
    config.validate()?;
    if current.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract("current states must be finite"));
    }
    let mut data = ShootingData::new(problem, current, refs, previous_input, 0.0)?;
    let bounds = Bounds::new(problem);
    let n = problem.horizon_steps;

    let mut z = Vec::with_capacity(problem.decision_len());
    for i in 0..problem.agent_count {
        let seq = match warm_start.and_then(|w| w.get(i)).filter(|s| !s.is_empty()) {
            Some(prev) => shift_warm_start(prev, n),
            None => vec![previous_input[i]; n],
        };
        z.extend(seq.iter().flat_map(|u| u.to_array()));
    }
    let constrained = problem.agent_count > 1 && n > 0;
    if constrained {
        break_symmetry(&data, &mut z);
    }
    bounds.project(&mut z);

    let mut penalty = if constrained { config.penalty_initial } else { 0.0 };
    let mut inner_iterations = 0;
    let mut penalty_rounds = 0;
    let mut merit_history = Vec::new();
    let (converged_inner, violation) = loop {
        data.penalty = penalty;
        let outcome = minimize(&data, &bounds, &mut z, config);
        inner_iterations += outcome.iterations;
        penalty_rounds += 1;
        if config.record_merits {
            merit_history.push(outcome.merits);
        }
        let violation = data.max_violation(&z);
        if !constrained || violation <= config.constraint_tolerance || penalty >= config.penalty_max {
            break (outcome.converged, violation);
        }
        penalty = (penalty * config.penalty_multiplier).min(config.penalty_max);
    };

    let inputs: Vec<Vec<ControlInput>> = z
        .chunks(n.max(1) * INPUT_DIM)
        .take(problem.agent_count)
        .map(|chunk| chunk.chunks(INPUT_DIM).map(ControlInput::from_slice).collect())
        .collect();
    let inputs = if n == 0 { vec![Vec::new(); problem.agent_count] } else { inputs };
    let predicted_states = rollout(current, &inputs, problem)?;
    let cost = cost(&predicted_states, &inputs, previous_input, refs, problem)?;

    Ok(ControlSolution {
        inputs,
        predicted_states,
        cost,
        inner_iterations,
        penalty_rounds,
        solve_wall_time: started.elapsed().as_secs_f64(),
        converged: converged_inner && violation <= config.constraint_tolerance,
        max_constraint_violation: violation,
        merit_history,
    })
}

/// Tilt added to the initial guess of agents on a collinear collision course.
const SWERVE_TILT: f64 = 0.05;

/// A head-on approach along the line joining two agents gives the
/// separation penalty no lateral gradient, so the optimizer can only brake.
/// Seeds both agents to veer right until the first predicted conflict.
fn break_symmetry(data: &ShootingData, z: &mut [f64]) {
    let p = &data.problem;
    let n = p.horizon_steps;
    let traj = data.forward(z);
    let planar = |i: usize, j: usize| nalgebra::Vector2::new(traj[i][j][0], traj[i][j][1]);
    for l in 0..p.agent_count {
        for i in l + 1..p.agent_count {
            let Some(j) = (1..=n).find(|&j| (planar(i, j) - planar(l, j)).norm() < p.safe_radius) else {
                continue;
            };
            let r0 = planar(i, 0) - planar(l, 0);
            let rj = planar(i, j) - planar(l, j);
            let cross = r0.x * rj.y - r0.y * rj.x;
            if r0.norm() < 1e-9 || cross.abs() > 1e-6 * r0.norm() * rj.norm().max(1e-9) {
                continue;
            }
            let left = nalgebra::Vector2::new(-r0.y, r0.x) / r0.norm();
            for (agent, dir) in [(l, -left), (i, left)] {
                let (sy, cy) = data.initial[agent][8].sin_cos();
                let pitch = SWERVE_TILT * (cy * dir.x + sy * dir.y);
                let roll = SWERVE_TILT * (sy * dir.x - cy * dir.y);
                for step in 0..j {
                    let k = (agent * n + step) * INPUT_DIM;
                    z[k] += roll;
                    z[k + 1] += pitch;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_repeats_last() {
        let a = ControlInput::new(0.1, 0.0, 9.0);
        let b = ControlInput::new(0.2, 0.0, 9.5);
        let c = ControlInput::new(0.3, 0.0, 10.0);
        assert_eq!(shift_warm_start(&[a, b, c], 3), vec![b, c, c]);
        assert_eq!(shift_warm_start(&[a, b, c], 1), vec![b]);
        assert_eq!(shift_warm_start(&[a], 2), vec![a, a]);
        assert!(shift_warm_start(&[], 4).is_empty());
    }

    #[test]
    fn config_rejects_bad_multiplier() {
        let cfg = SolverConfig {
            penalty_multiplier: 1.0,
            ..SolverConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lbfgs_direction_on_quadratic_is_newton_like() {
        // f = ½ Σ c_k z_k²; exact curvature pairs give the Newton step.
        let c = [1.0, 4.0, 9.0];
        let mut m = Lbfgs::new(5);
        for k in 0..3 {
            let mut s = vec![0.0; 3];
            s[k] = 1.0;
            let y: Vec<f64> = s.iter().zip(c).map(|(a, b)| a * b).collect();
            m.push(s, y);
        }
        let g = [2.0, 8.0, 18.0];
        let d = m.direction(&g).unwrap();
        for k in 0..3 {
            assert!((d[k] + g[k] / c[k]).abs() < 1e-12);
        }
    }
}
