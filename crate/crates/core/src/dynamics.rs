//! UAV kinematic model with delayed inputs.
//!
//! Translational motion is driven by a body-fixed thrust rotated into the
//! world frame, gravity and linear drag. Roll and pitch follow their
//! references through first-order lags; yaw is not actuated and stays fixed.
//!
//! Input delay is not modelled here: [`step`] integrates whatever command is
//! currently applied, and the transport layer is responsible for delivering
//! stale commands.

use nalgebra::{Matrix3, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard gravity used by the model, m/s².
pub const GRAVITY: f64 = 9.81;

/// Length of the packed state vector `[p, v, (roll, pitch, yaw)]`.
pub const STATE_DIM: usize = 9;
/// Length of the packed input vector `[roll_ref, pitch_ref, thrust]`.
pub const INPUT_DIM: usize = 3;

pub type StateVec = SVector<f64, STATE_DIM>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Roll, pitch, yaw in radians.
    pub orientation: Vector3<f64>,
    /// Simulation clock, seconds.
    pub timestamp: f64,
}

impl AgentState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        AgentState {
            position,
            velocity: Vector3::zeros(),
            orientation: Vector3::zeros(),
            timestamp: 0.0,
        }
    }

    pub fn roll(&self) -> f64 {
        self.orientation.x
    }

    pub fn pitch(&self) -> f64 {
        self.orientation.y
    }

    pub fn yaw(&self) -> f64 {
        self.orientation.z
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.orientation.iter().all(|v| v.is_finite())
            && self.timestamp.is_finite()
    }

    /// Checks finiteness and the attitude ranges (roll/pitch strictly inside
    /// ±π/2, yaw in [−π, π)).
    pub fn validate(&self) -> Result<()> {
        use std::f64::consts::{FRAC_PI_2, PI};
        if !self.is_finite() {
            return Err(Error::contract("agent state has non-finite components"));
        }
        if self.roll().abs() >= FRAC_PI_2 || self.pitch().abs() >= FRAC_PI_2 {
            return Err(Error::contract("roll/pitch outside (-pi/2, pi/2)"));
        }
        if !(-PI..PI).contains(&self.yaw()) {
            return Err(Error::contract("yaw outside [-pi, pi)"));
        }
        Ok(())
    }

    pub fn to_vector(&self) -> StateVec {
        let mut x = StateVec::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(6).copy_from(&self.orientation);
        x
    }

    pub fn from_vector(x: &StateVec, timestamp: f64) -> Self {
        AgentState {
            position: x.fixed_rows::<3>(0).into_owned(),
            velocity: x.fixed_rows::<3>(3).into_owned(),
            orientation: x.fixed_rows::<3>(6).into_owned(),
            timestamp,
        }
    }
}

/// Attitude references and collective thrust.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub roll_ref: f64,
    pub pitch_ref: f64,
    /// Newtons.
    pub thrust: f64,
}

impl ControlInput {
    pub const fn new(roll_ref: f64, pitch_ref: f64, thrust: f64) -> Self {
        ControlInput {
            roll_ref,
            pitch_ref,
            thrust,
        }
    }

    pub fn to_array(self) -> [f64; INPUT_DIM] {
        [self.roll_ref, self.pitch_ref, self.thrust]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        ControlInput::new(v[0], v[1], v[2])
    }

    /// Componentwise clamp into `[lower, upper]`.
    pub fn clamp(self, lower: &ControlInput, upper: &ControlInput) -> Self {
        ControlInput::new(
            self.roll_ref.clamp(lower.roll_ref, upper.roll_ref),
            self.pitch_ref.clamp(lower.pitch_ref, upper.pitch_ref),
            self.thrust.clamp(lower.thrust, upper.thrust),
        )
    }

    pub fn within(&self, lower: &ControlInput, upper: &ControlInput) -> bool {
        let (v, lo, hi) = (self.to_array(), lower.to_array(), upper.to_array());
        (0..INPUT_DIM).all(|k| v[k] >= lo[k] && v[k] <= hi[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// kg
    pub mass: f64,
    /// Diagonal of the drag matrix, 1/s.
    pub drag: [f64; 3],
    pub roll_gain: f64,
    pub pitch_gain: f64,
    /// Roll time constant, seconds.
    pub roll_time_constant: f64,
    /// Pitch time constant, seconds.
    pub pitch_time_constant: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            mass: 1.0,
            drag: [0.01, 0.01, 0.0],
            roll_gain: 1.0,
            pitch_gain: 1.0,
            roll_time_constant: 0.2,
            pitch_time_constant: 0.2,
        }
    }
}

impl ModelParams {
    pub fn gravity() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -GRAVITY)
    }

    pub fn drag_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.drag))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mass > 0.0
            && self.roll_time_constant > 0.0
            && self.pitch_time_constant > 0.0
            && self.drag.iter().all(|d| *d >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::contract(
                "model params need mass > 0, time constants > 0, drag >= 0",
            ))
        }
    }
}

/// Uplink/downlink delay pair; the model consumes the total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DelaySpec {
    pub uplink: f64,
    pub downlink: f64,
}

impl DelaySpec {
    pub fn new(uplink: f64, downlink: f64) -> Result<Self> {
        if uplink < 0.0 || downlink < 0.0 {
            return Err(Error::contract("delays must be non-negative"));
        }
        Ok(DelaySpec { uplink, downlink })
    }

    pub fn total(&self) -> f64 {
        self.uplink + self.downlink
    }
}

/// Third column of the ZYX Euler rotation: the world-frame direction of body z.
pub(crate) fn thrust_axis(orientation: &Vector3<f64>) -> Vector3<f64> {
    let (sr, cr) = orientation.x.sin_cos();
    let (sp, cp) = orientation.y.sin_cos();
    let (sy, cy) = orientation.z.sin_cos();
    Vector3::new(cy * sp * cr + sy * sr, sy * sp * cr - cy * sr, cp * cr)
}

/// Partial derivatives of [`thrust_axis`] with respect to roll, pitch, yaw.
fn thrust_axis_partials(orientation: &Vector3<f64>) -> [Vector3<f64>; 3] {
    let (sr, cr) = orientation.x.sin_cos();
    let (sp, cp) = orientation.y.sin_cos();
    let (sy, cy) = orientation.z.sin_cos();
    [
        Vector3::new(-cy * sp * sr + sy * cr, -sy * sp * sr - cy * cr, -cp * sr),
        Vector3::new(cy * cp * cr, sy * cp * cr, -sp * cr),
        Vector3::new(-sy * sp * cr + cy * sr, cy * sp * cr + sy * sr, 0.0),
    ]
}

/// Time derivative of the packed state under a held input.
pub fn derivative(x: &StateVec, u: &ControlInput, params: &ModelParams) -> StateVec {
    let orientation = Vector3::new(x[6], x[7], x[8]);
    let axis = thrust_axis(&orientation);
    let mut dx = StateVec::zeros();
    for k in 0..3 {
        dx[k] = x[3 + k];
        dx[3 + k] = u.thrust / params.mass * axis[k] - params.drag[k] * x[3 + k];
    }
    dx[5] -= GRAVITY;
    dx[6] = (params.roll_gain * u.roll_ref - x[6]) / params.roll_time_constant;
    dx[7] = (params.pitch_gain * u.pitch_ref - x[7]) / params.pitch_time_constant;
    dx
}

/// Vector-Jacobian product of [`derivative`]: returns `(Jxᵀ·w, Juᵀ·w)`.
fn derivative_vjp(
    x: &StateVec,
    u: &ControlInput,
    params: &ModelParams,
    w: &StateVec,
) -> (StateVec, [f64; INPUT_DIM]) {
    let orientation = Vector3::new(x[6], x[7], x[8]);
    let axis = thrust_axis(&orientation);
    let partials = thrust_axis_partials(&orientation);
    let w_acc = Vector3::new(w[3], w[4], w[5]);
    let scale = u.thrust / params.mass;

    let mut gx = StateVec::zeros();
    for k in 0..3 {
        gx[3 + k] = w[k] - params.drag[k] * w[3 + k];
    }
    gx[6] = scale * partials[0].dot(&w_acc) - w[6] / params.roll_time_constant;
    gx[7] = scale * partials[1].dot(&w_acc) - w[7] / params.pitch_time_constant;
    gx[8] = scale * partials[2].dot(&w_acc);

    let gu = [
        params.roll_gain / params.roll_time_constant * w[6],
        params.pitch_gain / params.pitch_time_constant * w[7],
        axis.dot(&w_acc) / params.mass,
    ];
    (gx, gu)
}

/// One classical Runge-Kutta step with zero-order-hold input.
pub fn rk4(x: &StateVec, u: &ControlInput, params: &ModelParams, dt: f64) -> StateVec {
    let k1 = derivative(x, u, params);
    let k2 = derivative(&(x + k1 * (dt / 2.0)), u, params);
    let k3 = derivative(&(x + k2 * (dt / 2.0)), u, params);
    let k4 = derivative(&(x + k3 * dt), u, params);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Reverse-mode sweep through one [`rk4`] step.
///
/// Given the adjoint `lambda` of the step output, returns the adjoints of
/// the step's state and input arguments.
pub(crate) fn rk4_vjp(
    x: &StateVec,
    u: &ControlInput,
    params: &ModelParams,
    dt: f64,
    lambda: &StateVec,
) -> (StateVec, [f64; INPUT_DIM]) {
    let k1 = derivative(x, u, params);
    let s2 = x + k1 * (dt / 2.0);
    let k2 = derivative(&s2, u, params);
    let s3 = x + k2 * (dt / 2.0);
    let k3 = derivative(&s3, u, params);
    let s4 = x + k3 * dt;

    let mut gx = *lambda;
    let mut gu = [0.0; INPUT_DIM];
    let mut add_u = |g: [f64; INPUT_DIM]| {
        for k in 0..INPUT_DIM {
            gu[k] += g[k];
        }
    };

    let gk4 = lambda * (dt / 6.0);
    let mut gk3 = lambda * (dt / 3.0);
    let mut gk2 = lambda * (dt / 3.0);
    let mut gk1 = lambda * (dt / 6.0);

    let (gs4, g) = derivative_vjp(&s4, u, params, &gk4);
    add_u(g);
    gx += gs4;
    gk3 += gs4 * dt;

    let (gs3, g) = derivative_vjp(&s3, u, params, &gk3);
    add_u(g);
    gx += gs3;
    gk2 += gs3 * (dt / 2.0);

    let (gs2, g) = derivative_vjp(&s2, u, params, &gk2);
    add_u(g);
    gx += gs2;
    gk1 += gs2 * (dt / 2.0);

    let (gs1, g) = derivative_vjp(x, u, params, &gk1);
    add_u(g);
    gx += gs1;

    (gx, gu)
}

/// Advances `state` by `dt` seconds with `delayed_input` held constant.
pub fn step(
    state: &AgentState,
    delayed_input: &ControlInput,
    params: &ModelParams,
    dt: f64,
) -> Result<AgentState> {
    if !(dt > 0.0) {
        return Err(Error::contract(format!("step needs dt > 0, got {dt}")));
    }
    let next = rk4(&state.to_vector(), delayed_input, params, dt);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelDivergence { agent: None });
    }
    Ok(AgentState::from_vector(&next, state.timestamp + dt))
}

/// The gravity-compensating input: level attitude, thrust `m·g`.
pub fn hover_input(params: &ModelParams) -> ControlInput {
    ControlInput::new(0.0, 0.0, params.mass * GRAVITY)
}

/// Exact solution of the roll and pitch lags after `tau` seconds under a held input.
pub fn predict_attitude(
    orientation: &Vector3<f64>,
    input: &ControlInput,
    params: &ModelParams,
    tau: f64,
) -> Vector3<f64> {
    let settle = |q: f64, target: f64, alpha: f64| target + (q - target) * (-tau / alpha).exp();
    Vector3::new(
        settle(orientation.x, params.roll_gain * input.roll_ref, params.roll_time_constant),
        settle(orientation.y, params.pitch_gain * input.pitch_ref, params.pitch_time_constant),
        orientation.z,
    )
}

/// Predicts the present state from a snapshot that is `tau` seconds old.
///
/// Position is extrapolated with the snapshot velocity. Velocity integrates
/// the acceleration produced by `delayed_input`, with the drag term taken
/// implicitly at the predicted velocity, which for diagonal drag solves per
/// axis as `v̂ = (v + (u/m + g)·τ) / (1 + a·τ)`. Roll and pitch follow the
/// closed-form response of their first-order channels to `delayed_input`;
/// holding them instead makes the delayed loop chatter on the tilt bounds.
pub fn estimate_present(
    delayed_state: &AgentState,
    delayed_input: &ControlInput,
    params: &ModelParams,
    tau: f64,
) -> Result<AgentState> {
    if tau < 0.0 || tau.is_nan() {
        return Err(Error::contract(format!("estimate_present needs tau >= 0, got {tau}")));
    }
    if tau == 0.0 {
        return Ok(*delayed_state);
    }
    let force = thrust_axis(&delayed_state.orientation) * delayed_input.thrust;
    let accel = force / params.mass + ModelParams::gravity();
    let mut velocity = Vector3::zeros();
    for k in 0..3 {
        velocity[k] =
            (delayed_state.velocity[k] + accel[k] * tau) / (1.0 + params.drag[k] * tau);
    }
    Ok(AgentState {
        position: delayed_state.position + delayed_state.velocity * tau,
        velocity,
        orientation: predict_attitude(&delayed_state.orientation, delayed_input, params, tau),
        timestamp: delayed_state.timestamp + tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rest() -> AgentState {
        AgentState::at_rest(Vector3::new(1.0, -2.0, 3.0))
    }

    #[test]
    fn hover_is_fixed_point() {
        let params = ModelParams::default();
        let next = step(&rest(), &hover_input(&params), &params, 0.01).unwrap();
        assert_eq!(next.position, rest().position);
        assert_eq!(next.velocity, Vector3::zeros());
        assert_eq!(next.orientation, Vector3::zeros());
    }

    #[test]
    fn hover_thrust_is_mg() {
        let mut params = ModelParams::default();
        assert_eq!(hover_input(&params).thrust, 9.81);
        params.mass = 2.5;
        assert!((hover_input(&params).thrust - 24.525).abs() < 1e-12);
        let next = step(&rest(), &hover_input(&params), &params, 0.01).unwrap();
        assert!(next.velocity.norm() < 1e-12);
    }

    #[test]
    fn hover_fixed_point_for_small_dt() {
        let params = ModelParams {
            mass: 1.7,
            ..ModelParams::default()
        };
        for dt in [0.001, 0.01, 0.02, 0.05] {
            let mut s = rest();
            for _ in 0..100 {
                s = step(&s, &hover_input(&params), &params, dt).unwrap();
            }
            assert!((s.position - rest().position).norm() < 1e-12, "dt={dt}");
            assert!(s.velocity.norm() < 1e-12);
        }
    }

    #[test]
    fn free_fall_without_drag_accelerates_at_g() {
        let params = ModelParams {
            drag: [0.0; 3],
            ..ModelParams::default()
        };
        let mut s = rest();
        s.velocity = Vector3::new(1.0, 0.5, -0.25);
        let dt = 0.01;
        let next = step(&s, &ControlInput::new(0.0, 0.0, 0.0), &params, dt).unwrap();
        let accel = (next.velocity - s.velocity) / dt;
        assert!((accel - ModelParams::gravity()).norm() < 1e-9);
    }

    #[test]
    fn roll_step_response_matches_closed_form() {
        let params = ModelParams::default();
        let r = 0.2;
        let input = ControlInput::new(r, 0.0, params.mass * GRAVITY);
        let alpha = params.roll_time_constant;
        let dt = 0.01;
        let mut s = rest();
        let steps = (alpha / dt).round() as usize;
        for _ in 0..steps {
            s = step(&s, &input, &params, dt).unwrap();
        }
        let expected = params.roll_gain * r * (1.0 - (-1.0f64).exp());
        assert!((s.roll() - expected).abs() < 1e-6);
    }

    #[test]
    fn yaw_is_never_actuated() {
        let params = ModelParams::default();
        let mut s = rest();
        s.orientation.z = 0.7;
        let input = ControlInput::new(0.3, -0.2, 14.0);
        for _ in 0..50 {
            s = step(&s, &input, &params, 0.02).unwrap();
        }
        assert_eq!(s.yaw(), 0.7);
    }

    #[test]
    fn rk4_observed_order() {
        let params = ModelParams::default();
        let r = 0.3;
        let input = ControlInput::new(r, 0.0, params.mass * GRAVITY);
        let alpha = params.roll_time_constant;
        let exact = |t: f64| params.roll_gain * r * (1.0 - (-t / alpha).exp());
        let err = |dt: f64| {
            let s = step(&rest(), &input, &params, dt).unwrap();
            (s.roll() - exact(dt)).abs()
        };
        let (e1, e2) = (err(0.04), err(0.02));
        assert!(e1 / e2 >= 8.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn non_finite_input_is_divergence() {
        let params = ModelParams::default();
        let err = step(&rest(), &ControlInput::new(0.0, 0.0, f64::INFINITY), &params, 0.01);
        assert!(matches!(err, Err(Error::ModelDivergence { .. })));
        assert!(step(&rest(), &hover_input(&params), &params, 0.0).is_err());
    }

    #[test]
    fn estimator_identity_at_zero_delay() {
        let params = ModelParams::default();
        let mut s = rest();
        s.velocity = Vector3::new(0.3, 0.1, -0.2);
        let out = estimate_present(&s, &ControlInput::new(0.1, 0.0, 5.0), &params, 0.0).unwrap();
        assert_eq!(out, s);
        assert!(estimate_present(&s, &hover_input(&params), &params, -0.1).is_err());
    }

    #[test]
    fn estimator_constant_velocity() {
        let params = ModelParams {
            drag: [0.0; 3],
            ..ModelParams::default()
        };
        let mut s = rest();
        s.velocity = Vector3::new(1.0, -0.5, 0.0);
        let out = estimate_present(&s, &hover_input(&params), &params, 0.1).unwrap();
        assert_eq!(out.position, s.position + s.velocity * 0.1);
        assert!((out.velocity - s.velocity).norm() < 1e-12);
    }

    #[test]
    fn estimator_free_fall() {
        let params = ModelParams {
            drag: [0.0; 3],
            ..ModelParams::default()
        };
        let s = rest();
        let out = estimate_present(&s, &ControlInput::new(0.0, 0.0, 0.0), &params, 0.05).unwrap();
        assert!((out.velocity.z - (-9.81 * 0.05)).abs() < 1e-12);
    }

    #[test]
    fn estimator_implicit_drag_solves_relation() {
        let params = ModelParams {
            drag: [0.3, 0.2, 0.1],
            ..ModelParams::default()
        };
        let mut s = rest();
        s.velocity = Vector3::new(2.0, -1.0, 0.5);
        s.orientation = Vector3::new(0.1, -0.05, 0.3);
        let u = ControlInput::new(0.0, 0.0, 11.0);
        let tau = 0.12;
        let out = estimate_present(&s, &u, &params, tau).unwrap();
        // v̂ must satisfy v̂ = v + (u/m + g − A v̂)·τ.
        let force = thrust_axis(&s.orientation) * u.thrust;
        let rhs = s.velocity
            + (force / params.mass + ModelParams::gravity() - params.drag_matrix() * out.velocity)
                * tau;
        assert!((rhs - out.velocity).norm() < 1e-12);
    }

    #[test]
    fn estimator_attitude_follows_lag() {
        let params = ModelParams::default();
        let mut s = rest();
        s.orientation = Vector3::new(0.05, 0.0, 0.4);
        let u = ControlInput::new(0.2, -0.1, 9.81);
        let out = estimate_present(&s, &u, &params, 0.2).unwrap();
        let e = (-1.0f64).exp();
        assert!((out.roll() - (0.2 + (0.05 - 0.2) * e)).abs() < 1e-12);
        assert!((out.pitch() - (-0.1 + 0.1 * e)).abs() < 1e-12);
        assert_eq!(out.yaw(), 0.4);
        let stepped = (0..200).fold(s, |x, _| step(&x, &u, &params, 0.001).unwrap());
        assert!((stepped.roll() - out.roll()).abs() < 1e-9);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let params = ModelParams {
            drag: [0.1, 0.2, 0.05],
            ..ModelParams::default()
        };
        let x = StateVec::from_column_slice(&[0.1, 0.2, 1.0, 0.3, -0.2, 0.1, 0.12, -0.08, 0.4]);
        let u = ControlInput::new(0.15, -0.1, 10.5);
        let w = StateVec::from_column_slice(&[0.3, -0.7, 1.1, 0.5, 0.9, -0.4, 0.2, -0.6, 0.8]);
        let dt = 0.05;
        let (gx, gu) = rk4_vjp(&x, &u, &params, dt, &w);
        let f = |x: &StateVec, u: &ControlInput| w.dot(&rk4(x, u, &params, dt));
        let h = 1e-6;
        for k in 0..STATE_DIM {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (f(&xp, &u) - f(&xm, &u)) / (2.0 * h);
            assert!((fd - gx[k]).abs() < 1e-7, "x[{k}]: fd {fd} vs {}", gx[k]);
        }
        for k in 0..INPUT_DIM {
            let mut up = u.to_array();
            let mut um = u.to_array();
            up[k] += h;
            um[k] -= h;
            let fd = (f(&x, &ControlInput::from_slice(&up)) - f(&x, &ControlInput::from_slice(&um)))
                / (2.0 * h);
            assert!((fd - gu[k]).abs() < 1e-7, "u[{k}]: fd {fd} vs {}", gu[k]);
        }
    }
}
