//! Rigid-body and motor dynamics of a single quadrotor.
//!
//! State and frames: position, velocity and gravity live in the world frame
//! (z up); body rates and all propeller/aero forces live in the body frame.
//! The orientation quaternion is scalar-first and maps body to world.
//!
//! A control tick is integrated with classic RK4 over fixed substeps. Before
//! every substep a proportional body-rate controller turns the commanded
//! collective thrust and body rates into steady-state motor speeds through a
//! static allocation matrix; the motors then follow a first-order lag.

use std::collections::VecDeque;

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Default integration substep inside a control tick.
pub const SUBSTEP: f64 = 0.002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
    pub velocity: Vec3,
    pub body_rates: Vec3,
    pub motor_speeds: Vector4<f64>,
}

impl QuadState {
    pub fn at_rest(position: Vec3) -> Self {
        Self {
            position,
            orientation: UnitQuaternion::identity(),
            velocity: Vec3::zeros(),
            body_rates: Vec3::zeros(),
            motor_speeds: Vector4::zeros(),
        }
    }

    /// Level hover at `position` with the given heading and motors spun up.
    pub fn hover(position: Vec3, yaw: f64, params: &QuadParams) -> Self {
        let per_rotor = params.mass * params.gravity_norm() / 4.0;
        let speed = (per_rotor / params.thrust_coeff).sqrt();
        Self {
            position,
            orientation: UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
            velocity: Vec3::zeros(),
            body_rates: Vec3::zeros(),
            motor_speeds: Vector4::repeat(speed),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|x| x.is_finite())
            && self.orientation.coords.iter().all(|x| x.is_finite())
            && self.velocity.iter().all(|x| x.is_finite())
            && self.body_rates.iter().all(|x| x.is_finite())
            && self.motor_speeds.iter().all(|x| x.is_finite())
    }

    pub fn per_rotor_thrust(&self, params: &QuadParams) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, w) in out.iter_mut().zip(self.motor_speeds.iter()) {
            *o = params.thrust_coeff * w * w;
        }
        out
    }
}

/// Physical parameters of one vehicle. Defaults describe the nominal
/// 220 g racing platform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadParams {
    pub mass: f64,
    /// Diagonal of the inertia tensor, kg m^2.
    pub inertia: [f64; 3],
    pub motor_time_constant: f64,
    /// Per-rotor thrust coefficient, N s^2 / rad^2.
    pub thrust_coeff: f64,
    /// Per-rotor drag-torque coefficient, N m s^2 / rad^2.
    pub torque_coeff: f64,
    /// Diagonal motor-to-motor distance, m.
    pub motor_distance: f64,
    /// Linear body-frame drag, N s / m.
    pub drag: [f64; 3],
    /// Maximum collective thrust of all four rotors, N.
    pub max_thrust: f64,
    pub max_motor_speed: f64,
    pub gravity: [f64; 3],
    /// Proportional body-rate gain per axis, 1/s.
    pub rate_gain: [f64; 3],
}

impl Default for QuadParams {
    fn default() -> Self {
        let max_motor_speed: f64 = 3000.0;
        let max_rotor_thrust = 14.0 / 4.0;
        let thrust_coeff = max_rotor_thrust / (max_motor_speed * max_motor_speed);
        Self {
            mass: 0.220,
            inertia: [0.14e-3, 0.17e-3, 0.21e-3],
            motor_time_constant: 0.033,
            thrust_coeff,
            torque_coeff: 0.016 * thrust_coeff,
            motor_distance: 0.118,
            drag: [0.01, 0.01, 0.01],
            max_thrust: 14.0,
            max_motor_speed,
            gravity: [0.0, 0.0, -9.81],
            rate_gain: [20.0, 20.0, 20.0],
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dynamics.mass", self.mass),
            ("dynamics.motor_time_constant", self.motor_time_constant),
            ("dynamics.thrust_coeff", self.thrust_coeff),
            ("dynamics.motor_distance", self.motor_distance),
            ("dynamics.max_thrust", self.max_thrust),
            ("dynamics.max_motor_speed", self.max_motor_speed),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if self.inertia.iter().any(|&j| !(j > 0.0)) {
            return Err(Error::config("dynamics.inertia", "entries must be positive"));
        }
        if self.drag.iter().any(|&d| d < 0.0) || self.torque_coeff < 0.0 {
            return Err(Error::config("dynamics.drag", "must be non-negative"));
        }
        Ok(())
    }

    pub fn gravity_vec(&self) -> Vec3 {
        Vec3::from(self.gravity)
    }

    pub fn gravity_norm(&self) -> f64 {
        self.gravity_vec().norm()
    }

    pub fn max_rotor_thrust(&self) -> f64 {
        self.max_thrust / 4.0
    }

    /// Upper bound of the mass-normalized collective thrust command.
    pub fn max_collective_accel(&self) -> f64 {
        self.max_thrust / self.mass
    }

    /// Rotor positions in the body frame (x configuration).
    pub fn rotor_positions(&self) -> [Vec3; 4] {
        let a = self.motor_distance / 2.0 * std::f64::consts::FRAC_1_SQRT_2;
        [
            Vec3::new(a, -a, 0.0),
            Vec3::new(-a, a, 0.0),
            Vec3::new(a, a, 0.0),
            Vec3::new(-a, -a, 0.0),
        ]
    }

    /// Yaw reaction sign of each rotor.
    pub const ROTOR_SPIN: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];

    /// Maps rotor thrusts to (collective thrust, roll, pitch, yaw torque).
    pub fn allocation_matrix(&self) -> Matrix4<f64> {
        let r = self.rotor_positions();
        let kappa = self.torque_coeff / self.thrust_coeff;
        let mut m = Matrix4::zeros();
        for i in 0..4 {
            m[(0, i)] = 1.0;
            m[(1, i)] = r[i].y;
            m[(2, i)] = -r[i].x;
            m[(3, i)] = Self::ROTOR_SPIN[i] * kappa;
        }
        m
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WrenchBreakdown {
    pub f_prop: Vec3,
    pub tau_prop: Vec3,
    pub f_aero: Vec3,
    pub tau_aero: Vec3,
}

/// Collective thrust (mass-normalized, m/s^2) and body-rate command (rad/s).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub collective: f64,
    pub body_rates: Vec3,
}

impl Command {
    pub fn new(collective: f64, body_rates: Vec3) -> Self {
        Self {
            collective,
            body_rates,
        }
    }

    pub fn hover(params: &QuadParams) -> Self {
        Self::new(params.gravity_norm(), Vec3::zeros())
    }

    pub fn is_finite(&self) -> bool {
        self.collective.is_finite() && self.body_rates.iter().all(|x| x.is_finite())
    }
}

/// Propeller and aerodynamic wrench. `local_airspeed` is the world-frame wind
/// velocity at the vehicle; drag acts on the velocity relative to it.
pub fn compute_wrench(state: &QuadState, params: &QuadParams, local_airspeed: &Vec3) -> WrenchBreakdown {
    let rotors = params.rotor_positions();
    let mut thrust = 0.0;
    let mut tau = Vec3::zeros();
    for i in 0..4 {
        let w2 = state.motor_speeds[i] * state.motor_speeds[i];
        let t = params.thrust_coeff * w2;
        thrust += t;
        tau.x += rotors[i].y * t;
        tau.y -= rotors[i].x * t;
        tau.z += QuadParams::ROTOR_SPIN[i] * params.torque_coeff * w2;
    }
    let rel_world = state.velocity - local_airspeed;
    let rel_body = state.orientation.inverse_transform_vector(&rel_world);
    let f_aero = -Vec3::from(params.drag).component_mul(&rel_body);
    WrenchBreakdown {
        f_prop: Vec3::new(0.0, 0.0, thrust),
        tau_prop: tau,
        f_aero,
        tau_aero: Vec3::zeros(),
    }
}

/// Steady-state motor speeds the low-level controller requests for `command`
/// given the current body rates.
pub fn motor_setpoint(state: &QuadState, command: &Command, controller: &QuadParams) -> Vector4<f64> {
    let collective = command.collective.clamp(0.0, controller.max_collective_accel());
    let inertia = Vec3::from(controller.inertia);
    let gain = Vec3::from(controller.rate_gain);
    let torque = inertia.component_mul(&gain.component_mul(&(command.body_rates - state.body_rates)));
    let wrench = Vector4::new(controller.mass * collective, torque.x, torque.y, torque.z);
    let alloc_inv = controller
        .allocation_matrix()
        .try_inverse()
        .expect("rotor allocation matrix is invertible for a non-degenerate frame");
    let thrusts = alloc_inv * wrench;
    let f_max = controller.max_rotor_thrust();
    thrusts.map(|f| (f.clamp(0.0, f_max) / controller.thrust_coeff).sqrt().min(controller.max_motor_speed))
}

#[derive(Clone, Copy)]
struct Derivative {
    p: Vec3,
    q: Quaternion<f64>,
    v: Vec3,
    w: Vec3,
    motors: Vector4<f64>,
}

#[derive(Clone, Copy)]
struct RawState {
    p: Vec3,
    q: Quaternion<f64>,
    v: Vec3,
    w: Vec3,
    motors: Vector4<f64>,
}

impl RawState {
    fn from_state(s: &QuadState) -> Self {
        Self {
            p: s.position,
            q: *s.orientation.quaternion(),
            v: s.velocity,
            w: s.body_rates,
            motors: s.motor_speeds,
        }
    }

    fn offset(&self, d: &Derivative, h: f64) -> Self {
        Self {
            p: self.p + d.p * h,
            q: self.q + d.q * h,
            v: self.v + d.v * h,
            w: self.w + d.w * h,
            motors: self.motors + d.motors * h,
        }
    }

    fn derivative(&self, setpoint: &Vector4<f64>, params: &QuadParams, airspeed: &Vec3) -> Derivative {
        // The wrench only needs a rotation; intermediate RK stages are not unit.
        let unit = UnitQuaternion::new_normalize(self.q);
        let as_state = QuadState {
            position: self.p,
            orientation: unit,
            velocity: self.v,
            body_rates: self.w,
            motor_speeds: self.motors,
        };
        let wrench = compute_wrench(&as_state, params, airspeed);
        let force_world = unit.transform_vector(&(wrench.f_prop + wrench.f_aero));
        let inertia = Vec3::from(params.inertia);
        let jw = inertia.component_mul(&self.w);
        let torque = wrench.tau_prop + wrench.tau_aero - self.w.cross(&jw);
        Derivative {
            p: self.v,
            q: self.q * Quaternion::from_parts(0.0, self.w * 0.5),
            v: force_world / params.mass + params.gravity_vec(),
            w: torque.component_div(&inertia),
            motors: (setpoint - self.motors) / params.motor_time_constant,
        }
    }
}

/// One RK4 substep with the motor setpoint held constant. Returns the new
/// state and the quaternion norm error observed before renormalization.
fn rk4_substep(
    state: &QuadState,
    setpoint: &Vector4<f64>,
    params: &QuadParams,
    airspeed: &Vec3,
    h: f64,
) -> (QuadState, f64) {
    let x = RawState::from_state(state);
    let k1 = x.derivative(setpoint, params, airspeed);
    let k2 = x.offset(&k1, h / 2.0).derivative(setpoint, params, airspeed);
    let k3 = x.offset(&k2, h / 2.0).derivative(setpoint, params, airspeed);
    let k4 = x.offset(&k3, h).derivative(setpoint, params, airspeed);
    let sum = Derivative {
        p: k1.p + (k2.p + k3.p) * 2.0 + k4.p,
        q: k1.q + (k2.q + k3.q) * 2.0 + k4.q,
        v: k1.v + (k2.v + k3.v) * 2.0 + k4.v,
        w: k1.w + (k2.w + k3.w) * 2.0 + k4.w,
        motors: k1.motors + (k2.motors + k3.motors) * 2.0 + k4.motors,
    };
    let next = x.offset(&sum, h / 6.0);
    let norm = next.q.norm();
    let motors = next.motors.map(|m| m.clamp(0.0, params.max_motor_speed));
    (
        QuadState {
            position: next.p,
            orientation: UnitQuaternion::new_unchecked(next.q / norm),
            velocity: next.v,
            body_rates: next.w,
            motor_speeds: motors,
        },
        (norm - 1.0).abs(),
    )
}

fn substeps(dt: f64) -> (usize, f64) {
    let n = ((dt / SUBSTEP) - 1e-9).ceil().max(1.0) as usize;
    (n, dt / n as f64)
}

fn check_inputs(state: &QuadState, dt: f64) -> Result<()> {
    if !state.is_finite() {
        return Err(Error::NonFinite("quadrotor state".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::config("dt", format!("must be positive, got {dt}")));
    }
    Ok(())
}

/// Advances the vehicle by `dt` under a thrust/body-rate command. The plant
/// and the onboard controller share `params`.
pub fn step(
    state: &QuadState,
    command: &Command,
    params: &QuadParams,
    local_airspeed: &Vec3,
    dt: f64,
) -> Result<QuadState> {
    step_with_controller(state, command, params, params, local_airspeed, dt)
}

/// Like [`step`], but the controller runs on its own (typically nominal)
/// model while the plant uses randomized parameters.
pub fn step_with_controller(
    state: &QuadState,
    command: &Command,
    plant: &QuadParams,
    controller: &QuadParams,
    local_airspeed: &Vec3,
    dt: f64,
) -> Result<QuadState> {
    check_inputs(state, dt)?;
    if !command.is_finite() {
        return Err(Error::NonFinite("command".into()));
    }
    let (n, h) = substeps(dt);
    let mut s = state.clone();
    for _ in 0..n {
        let setpoint = motor_setpoint(&s, command, controller);
        s = rk4_substep(&s, &setpoint, plant, local_airspeed, h).0;
    }
    Ok(s)
}

/// Open-loop propagation with a fixed motor setpoint; returns the largest
/// pre-renormalization quaternion norm error seen across substeps.
pub fn propagate(
    state: &QuadState,
    setpoint: &Vector4<f64>,
    params: &QuadParams,
    local_airspeed: &Vec3,
    dt: f64,
) -> Result<(QuadState, f64)> {
    check_inputs(state, dt)?;
    let (n, h) = substeps(dt);
    let mut s = state.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (next, err) = rk4_substep(&s, setpoint, params, local_airspeed, h);
        worst = worst.max(err);
        s = next;
    }
    Ok((s, worst))
}

/// Fractional randomization ranges and initial-condition noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationSpec {
    pub thrust_coeff: f64,
    pub torque_coeff: f64,
    pub drag: f64,
    pub inertia: f64,
    pub mass: f64,
    /// Upper bound of the actuation delay, s.
    pub max_delay: f64,
    pub init_pos_horizontal: f64,
    pub init_pos_vertical: f64,
    pub init_velocity: f64,
    pub init_attitude_deg: f64,
    pub init_rates_deg: f64,
}

impl Default for RandomizationSpec {
    fn default() -> Self {
        Self {
            thrust_coeff: 0.10,
            torque_coeff: 0.10,
            drag: 0.10,
            inertia: 0.10,
            mass: 0.05,
            max_delay: 0.040,
            init_pos_horizontal: 0.5,
            init_pos_vertical: 0.3,
            init_velocity: 0.5,
            init_attitude_deg: 20.0,
            init_rates_deg: 25.0,
        }
    }
}

impl RandomizationSpec {
    pub fn none() -> Self {
        Self {
            thrust_coeff: 0.0,
            torque_coeff: 0.0,
            drag: 0.0,
            inertia: 0.0,
            mass: 0.0,
            max_delay: 0.0,
            init_pos_horizontal: 0.0,
            init_pos_vertical: 0.0,
            init_velocity: 0.0,
            init_attitude_deg: 0.0,
            init_rates_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("randomization.thrust_coeff", self.thrust_coeff),
            ("randomization.torque_coeff", self.torque_coeff),
            ("randomization.drag", self.drag),
            ("randomization.inertia", self.inertia),
            ("randomization.mass", self.mass),
            ("randomization.max_delay", self.max_delay),
            ("randomization.init_pos_horizontal", self.init_pos_horizontal),
            ("randomization.init_pos_vertical", self.init_pos_vertical),
            ("randomization.init_velocity", self.init_velocity),
            ("randomization.init_attitude_deg", self.init_attitude_deg),
            ("randomization.init_rates_deg", self.init_rates_deg),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be non-negative, got {v}")));
            }
        }
        for (name, v) in &fields[..5] {
            if *v >= 1.0 {
                return Err(Error::config(*name, "fractional range must be below 1"));
            }
        }
        Ok(())
    }

    pub fn sample_delay<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.max_delay * rng.random::<f64>()
    }

    /// Uniform initial-condition noise around `state`.
    pub fn perturb_initial<R: Rng + ?Sized>(&self, state: &QuadState, rng: &mut R) -> QuadState {
        let mut sym = |r: f64| r * (2.0 * rng.random::<f64>() - 1.0);
        let mut s = state.clone();
        s.position += Vec3::new(
            sym(self.init_pos_horizontal),
            sym(self.init_pos_horizontal),
            sym(self.init_pos_vertical),
        );
        s.velocity += Vec3::new(sym(self.init_velocity), sym(self.init_velocity), sym(self.init_velocity));
        let att = self.init_attitude_deg.to_radians();
        let tilt = UnitQuaternion::from_euler_angles(sym(att), sym(att), sym(att));
        s.orientation = s.orientation * tilt;
        let rates = self.init_rates_deg.to_radians();
        s.body_rates += Vec3::new(sym(rates), sym(rates), sym(rates));
        s
    }
}

/// Multiplies each physical parameter by an independent uniform factor in
/// `[1 - r, 1 + r]`.
pub fn randomize<R: Rng + ?Sized>(params: &QuadParams, spec: &RandomizationSpec, rng: &mut R) -> QuadParams {
    let mut factor = |r: f64| 1.0 + r * (2.0 * rng.random::<f64>() - 1.0);
    let mut p = params.clone();
    p.thrust_coeff *= factor(spec.thrust_coeff);
    p.torque_coeff *= factor(spec.torque_coeff);
    for d in p.drag.iter_mut() {
        *d *= factor(spec.drag);
    }
    for j in p.inertia.iter_mut() {
        *j *= factor(spec.inertia);
    }
    p.mass *= factor(spec.mass);
    p
}

/// Ring of past commands, newest at the back, one entry per control tick.
#[derive(Clone, Debug)]
pub struct CommandHistory {
    period: f64,
    entries: VecDeque<Command>,
    capacity: usize,
}

impl CommandHistory {
    pub fn new(period: f64, max_delay: f64) -> Self {
        let capacity = (max_delay / period).ceil() as usize + 2;
        Self {
            period,
            entries: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, command: Command) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(command);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn period(&self) -> f64 {
        self.period
    }
}

/// The command issued `delay` seconds ago under zero-order hold. An underfull
/// history yields its oldest entry.
pub fn apply_actuation_delay(history: &CommandHistory, delay: f64) -> Option<Command> {
    let ticks_back = ((delay / history.period) - 1e-9).ceil().max(0.0) as usize;
    let n = history.entries.len();
    if n == 0 {
        return None;
    }
    let idx = n.saturating_sub(1 + ticks_back);
    history.entries.get(idx).copied()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hover_state() -> (QuadState, QuadParams) {
        let params = QuadParams::default();
        (QuadState::hover(Vec3::new(0.0, 0.0, 2.0), 0.0, &params), params)
    }

    #[test]
    fn zero_input_zero_wrench() {
        let params = QuadParams::default();
        let s = QuadState::at_rest(Vec3::zeros());
        let w = compute_wrench(&s, &params, &Vec3::zeros());
        assert_eq!(w, WrenchBreakdown::default());
    }

    #[test]
    fn hover_wrench_balances_weight() {
        let (s, params) = hover_state();
        let w = compute_wrench(&s, &params, &Vec3::zeros());
        let expected = 0.220 * 9.81;
        assert_relative_eq!(w.f_prop.z, expected, epsilon = 1e-12);
        assert_eq!(w.f_prop.x, 0.0);
        assert_eq!(w.f_prop.y, 0.0);
        assert!(w.tau_prop.norm() < 1e-15);
    }

    #[test]
    fn drag_opposes_velocity() {
        let params = QuadParams::default();
        let mut s = QuadState::at_rest(Vec3::zeros());
        s.velocity = Vec3::new(1.0, 0.0, 0.0);
        let w = compute_wrench(&s, &params, &Vec3::zeros());
        assert_relative_eq!(w.f_aero.x, -0.01, epsilon = 1e-15);
        assert_eq!(w.f_aero.y, 0.0);
        // Wind moving with the vehicle cancels drag.
        let w = compute_wrench(&s, &params, &Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(w.f_aero.norm(), 0.0);
    }

    #[test]
    fn hover_is_a_fixed_point() {
        let (mut s, params) = hover_state();
        let start = s.clone();
        for _ in 0..50 {
            s = step(&s, &Command::hover(&params), &params, &Vec3::zeros(), 0.02).unwrap();
        }
        assert!((s.position - start.position).norm() < 1e-4);
        assert!(s.orientation.angle_to(&start.orientation) < 1e-4);
    }

    #[test]
    fn zero_rates_keep_orientation() {
        let (mut s, params) = hover_state();
        s.orientation = UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3);
        let q0 = s.orientation;
        let setpoint = s.motor_speeds;
        let (s2, _) = propagate(&s, &setpoint, &params, &Vec3::zeros(), 0.02).unwrap();
        assert_eq!(s2.body_rates, Vec3::zeros());
        assert!(s2.orientation.angle_to(&q0) < 1e-14);
    }

    #[test]
    fn free_fall_with_motors_off() {
        let params = QuadParams {
            drag: [0.0; 3],
            ..QuadParams::default()
        };
        let s = QuadState::at_rest(Vec3::new(0.0, 0.0, 10.0));
        let cmd = Command::new(0.0, Vec3::zeros());
        let mut cur = s;
        for _ in 0..50 {
            cur = step(&cur, &cmd, &params, &Vec3::zeros(), 0.02).unwrap();
        }
        assert_relative_eq!(cur.velocity.z, -9.81, max_relative = 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let (mut s, params) = hover_state();
        let bad = Command::new(f64::NAN, Vec3::zeros());
        assert!(step(&s, &bad, &params, &Vec3::zeros(), 0.02).is_err());
        s.velocity.x = f64::INFINITY;
        assert!(step(&s, &Command::hover(&params), &params, &Vec3::zeros(), 0.02).is_err());
    }

    #[test]
    fn motor_speeds_respect_bounds() {
        let (mut s, params) = hover_state();
        let cmd = Command::new(1e3, Vec3::new(50.0, -50.0, 20.0));
        for _ in 0..20 {
            s = step(&s, &cmd, &params, &Vec3::zeros(), 0.02).unwrap();
            assert!(s.motor_speeds.iter().all(|&w| (0.0..=params.max_motor_speed).contains(&w)));
        }
    }

    #[test]
    fn randomize_identity_and_bounds() {
        let params = QuadParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(randomize(&params, &RandomizationSpec::none(), &mut rng), params);
        let spec = RandomizationSpec::default();
        for _ in 0..1000 {
            let p = randomize(&params, &spec, &mut rng);
            assert!((0.209..=0.231).contains(&p.mass));
        }
        let a = randomize(&params, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = randomize(&params, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn actuation_delay_ticks() {
        let mut h = CommandHistory::new(0.02, 0.04);
        for i in 0..5 {
            h.push(Command::new(i as f64, Vec3::zeros()));
        }
        assert_eq!(apply_actuation_delay(&h, 0.0).unwrap().collective, 4.0);
        assert_eq!(apply_actuation_delay(&h, 0.020).unwrap().collective, 3.0);
        assert_eq!(apply_actuation_delay(&h, 0.040).unwrap().collective, 2.0);
        // Zero-order hold between ticks.
        assert_eq!(apply_actuation_delay(&h, 0.010).unwrap().collective, 3.0);

        let mut short = CommandHistory::new(0.02, 0.04);
        short.push(Command::new(7.0, Vec3::zeros()));
        assert_eq!(apply_actuation_delay(&short, 0.040).unwrap().collective, 7.0);
    }
}
