//! Benchmark environments and control policies.
//!
//! Every environment is a discrete-time map obtained by forward-Euler
//! integration of its continuous dynamics at a fixed step. Controls are
//! expressed as *deviations* from the equilibrium control `u_eq`: the
//! public step map is
//!
//! ```text
//! step(x, u_dev) = step_raw(x, clamp(u_dev + u_eq))
//! ```
//!
//! where the clamp projects onto the actuator box before integration.
//! This convention makes the origin of the (state, deviation) space an
//! exact fixed point of every environment, so zero-centred controllers
//! and certificates compose cleanly.
//!
//! Each environment also records its step on a [`Tape`], which is what
//! lets training and falsification differentiate through multi-step
//! rollouts.

use serde::Serialize;
use thiserror::Error;

use crate::glf::Trajectory;
use crate::lqr::{solve_discounted_are, LinearSystem};
use crate::matlib::Matrix;
use crate::net::{Mlp, NodeId, Tape};
use crate::rng::Rng;

/// Errors produced by environment construction and evaluation.
#[derive(Debug, Error)]
pub enum DynError {
    /// The requested environment name is not known.
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
    /// A vector did not match the environment's dimensions.
    #[error("{context}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        /// What was being checked.
        context: &'static str,
        /// Expected length.
        expected: usize,
        /// Supplied length.
        got: usize,
    },
    /// The discount factor is outside `(0, 1)`.
    #[error("discount factor {0} must lie in (0, 1)")]
    InvalidGamma(f64),
    /// An underlying linear-quadratic solve failed.
    #[error(transparent)]
    Lqr(#[from] crate::lqr::LqrError),
    /// A policy network was malformed.
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

/// The concrete dynamical model behind an [`OpenLoopEnv`].
#[derive(Debug, Clone)]
enum EnvModel {
    /// `x' = A x + B u` with quadratic stage cost from the system.
    Linear(LinearSystem),
    /// Damped inverted pendulum (angle measured from the upright).
    PendulumAppendix,
    /// Undamped inverted pendulum with wrapped angle and clamped rate.
    PendulumGym,
    /// Kinematic path tracking around a circular reference.
    PathTracking,
    /// Planar quadrotor with two rotor thrusts.
    Quadrotor2d,
}

// Pendulum (appendix variant): angle from upright, damped.
const PA_G: f64 = 9.81;
const PA_M: f64 = 0.15;
const PA_L: f64 = 0.5;
const PA_DAMP: f64 = 0.1;
const PA_UMAX: f64 = 6.0;

// Pendulum (gym variant): angle from upright, undamped, wrapped/clamped.
const PG_G: f64 = 10.0;
const PG_M: f64 = 1.0;
const PG_L: f64 = 1.0;
const PG_UMAX: f64 = 2.0;
const PG_OMEGA_MAX: f64 = 8.0;

// Path tracking.
const PT_WHEELBASE: f64 = 1.0;
const PT_RADIUS: f64 = 10.0;
const PT_SPEED: f64 = 2.0;
const PT_UMAX: f64 = 0.84;

// Planar quadrotor.
const QR_M: f64 = 0.486;
const QR_ARM: f64 = 0.25;
const QR_INERTIA: f64 = 0.00383;
const QR_G: f64 = 9.81;

/// Integration step shared by all benchmark environments.
pub const DT: f64 = 0.05;

/// An environment before a policy is attached: dimensions, actuator
/// box, state domain, equilibrium control, step map, and stage cost.
#[derive(Debug, Clone)]
pub struct OpenLoopEnv {
    model: EnvModel,
    name: String,
    domain_lo: Vec<f64>,
    domain_hi: Vec<f64>,
    control_lo: Vec<f64>,
    control_hi: Vec<f64>,
    u_eq: Vec<f64>,
}

impl OpenLoopEnv {
    /// Damped pendulum stabilized about the upright, state `(theta,
    /// omega)`, torque within `[-6, 6]`.
    pub fn pendulum_appendix() -> Self {
        Self {
            model: EnvModel::PendulumAppendix,
            name: "pendulum-appendix".to_string(),
            domain_lo: vec![-12.0, -12.0],
            domain_hi: vec![12.0, 12.0],
            control_lo: vec![-PA_UMAX],
            control_hi: vec![PA_UMAX],
            u_eq: vec![0.0],
        }
    }

    /// Undamped pendulum with the angle wrapped into `[-pi, pi)` and the
    /// rate clamped into `[-8, 8]`, torque within `[-2, 2]`.
    pub fn pendulum_gym() -> Self {
        Self {
            model: EnvModel::PendulumGym,
            name: "pendulum-gym".to_string(),
            domain_lo: vec![-std::f64::consts::PI, -PG_OMEGA_MAX],
            domain_hi: vec![std::f64::consts::PI, PG_OMEGA_MAX],
            control_lo: vec![-PG_UMAX],
            control_hi: vec![PG_UMAX],
            u_eq: vec![0.0],
        }
    }

    /// Kinematic vehicle tracking a circle of radius 10, state
    /// `(lateral error, heading error)`, steering within `[-0.84, 0.84]`.
    /// The equilibrium steering is `L / (v R)`.
    pub fn path_tracking() -> Self {
        Self {
            model: EnvModel::PathTracking,
            name: "path-tracking".to_string(),
            domain_lo: vec![-3.0, -3.0],
            domain_hi: vec![3.0, 3.0],
            control_lo: vec![-PT_UMAX],
            control_hi: vec![PT_UMAX],
            u_eq: vec![PT_WHEELBASE / (PT_SPEED * PT_RADIUS)],
        }
    }

    /// Planar quadrotor, state `(x, z, theta, vx, vz, omega)`, two rotor
    /// thrusts within `[0, 2.5 m g / 2]` and hover equilibrium
    /// `u_eq = m g / 2` per rotor.
    pub fn quadrotor2d() -> Self {
        let hover = QR_M * QR_G / 2.0;
        Self {
            model: EnvModel::Quadrotor2d,
            name: "quadrotor2d".to_string(),
            domain_lo: vec![
                -0.75,
                -0.75,
                -std::f64::consts::FRAC_PI_2,
                -4.0,
                -4.0,
                -3.0,
            ],
            domain_hi: vec![0.75, 0.75, std::f64::consts::FRAC_PI_2, 4.0, 4.0, 3.0],
            control_lo: vec![0.0, 0.0],
            control_hi: vec![2.5 * hover, 2.5 * hover],
            u_eq: vec![hover, hover],
        }
    }

    /// Wraps a linear system as an environment with unbounded controls
    /// and a default state domain of `[-5, 5]^n`.
    pub fn linear(sys: LinearSystem) -> Self {
        let n = sys.state_dim();
        let m = sys.control_dim();
        Self {
            model: EnvModel::Linear(sys),
            name: "linear".to_string(),
            domain_lo: vec![-5.0; n],
            domain_hi: vec![5.0; n],
            control_lo: vec![f64::NEG_INFINITY; m],
            control_hi: vec![f64::INFINITY; m],
            u_eq: vec![0.0; m],
        }
    }

    /// Looks up one of the benchmark environments by its canonical name.
    pub fn by_name(name: &str) -> Result<Self, DynError> {
        match name {
            "pendulum-appendix" => Ok(Self::pendulum_appendix()),
            "pendulum-gym" => Ok(Self::pendulum_gym()),
            "path-tracking" => Ok(Self::path_tracking()),
            "quadrotor2d" => Ok(Self::quadrotor2d()),
            other => Err(DynError::UnknownEnv(other.to_string())),
        }
    }

    /// Canonical environment name.
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Replaces the sampling domain (used by the linear wrapper when a
    /// caller wants a task-specific box).
    pub fn with_domain(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), self.state_dim());
        assert_eq!(hi.len(), self.state_dim());
        self.domain_lo = lo;
        self.domain_hi = hi;
        self
    }

    /// State dimension.
    pub fn state_dim(&self) -> usize {
        self.domain_lo.len()
    }

    /// Control dimension.
    pub fn control_dim(&self) -> usize {
        self.u_eq.len()
    }

    /// Sampling/validity box for states, as `(lo, hi)`.
    pub fn domain(&self) -> (&[f64], &[f64]) {
        (&self.domain_lo, &self.domain_hi)
    }

    /// Equilibrium control (raw actuator units).
    pub fn u_eq(&self) -> &[f64] {
        &self.u_eq
    }

    /// Actuator box in *deviation* coordinates: `[lo - u_eq, hi - u_eq]`.
    pub fn control_dev_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self
            .control_lo
            .iter()
            .zip(&self.u_eq)
            .map(|(l, e)| l - e)
            .collect();
        let hi = self
            .control_hi
            .iter()
            .zip(&self.u_eq)
            .map(|(h, e)| h - e)
            .collect();
        (lo, hi)
    }

    /// Whether `x` lies inside the state domain (boundary inclusive).
    pub fn in_domain(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.domain_lo.iter().zip(&self.domain_hi))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Uniform sample from the state domain.
    pub fn sample_state(&self, rng: &mut Rng) -> Vec<f64> {
        self.domain_lo
            .iter()
            .zip(&self.domain_hi)
            .map(|(&lo, &hi)| rng.range(lo, hi))
            .collect()
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<(), DynError> {
        if x.len() != self.state_dim() {
            return Err(DynError::DimensionMismatch {
                context: "state",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if u.len() != self.control_dim() {
            return Err(DynError::DimensionMismatch {
                context: "control",
                expected: self.control_dim(),
                got: u.len(),
            });
        }
        Ok(())
    }

    /// One step under a *deviation* control: the deviation is shifted by
    /// `u_eq`, clamped onto the actuator box, and integrated.
    pub fn step(&self, x: &[f64], u_dev: &[f64]) -> Result<Vec<f64>, DynError> {
        self.check_dims(x, u_dev)?;
        let u_raw: Vec<f64> = u_dev
            .iter()
            .zip(&self.u_eq)
            .zip(self.control_lo.iter().zip(&self.control_hi))
            .map(|((d, e), (lo, hi))| (d + e).clamp(*lo, *hi))
            .collect();
        Ok(self.step_raw(x, &u_raw))
    }

    /// One step of the raw physics (no shift, no clamp).
    fn step_raw(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match &self.model {
            EnvModel::Linear(sys) => {
                let mut next = sys.a.matvec(x);
                let bu = sys.b.matvec(u);
                for (n, v) in next.iter_mut().zip(bu) {
                    *n += v;
                }
                next
            }
            EnvModel::PendulumAppendix => {
                let (theta, omega) = (x[0], x[1]);
                let ml2 = PA_M * PA_L * PA_L;
                let acc = (PA_G / PA_L) * theta.sin() - (PA_DAMP / ml2) * omega + u[0] / ml2;
                vec![theta + DT * omega, omega + DT * acc]
            }
            EnvModel::PendulumGym => {
                let (theta, omega) = (x[0], x[1]);
                let ml2 = PG_M * PG_L * PG_L;
                let acc = (PG_G / PG_L) * theta.sin() + u[0] / ml2;
                let theta_next = crate::net::wrap_to_pi(theta + DT * omega);
                let omega_next = (omega + DT * acc).clamp(-PG_OMEGA_MAX, PG_OMEGA_MAX);
                vec![theta_next, omega_next]
            }
            EnvModel::PathTracking => {
                let (d_e, th_e) = (x[0], x[1]);
                let d_dot = PT_SPEED * th_e.sin();
                let th_dot =
                    (PT_SPEED / PT_WHEELBASE) * u[0] - th_e.cos() / (PT_RADIUS - d_e);
                vec![d_e + DT * d_dot, th_e + DT * th_dot]
            }
            EnvModel::Quadrotor2d => {
                let (px, pz, theta, vx, vz, om) = (x[0], x[1], x[2], x[3], x[4], x[5]);
                let thrust = u[0] + u[1];
                let ax = -(thrust / QR_M) * theta.sin();
                let az = (thrust / QR_M) * theta.cos() - QR_G;
                let aom = (QR_ARM / QR_INERTIA) * (u[0] - u[1]);
                vec![
                    px + DT * vx,
                    pz + DT * vz,
                    theta + DT * om,
                    vx + DT * ax,
                    vz + DT * az,
                    om + DT * aom,
                ]
            }
        }
    }

    /// Quadratic stage cost in deviation coordinates. The pendulum
    /// variants use `theta^2 + 0.1 omega^2 + 0.001 u^2`; the linear
    /// wrapper uses its system's `Q` and `R`; the remaining benchmarks
    /// use `|x|^2 + 0.01 |u|^2`.
    pub fn stage_cost(&self, x: &[f64], u_dev: &[f64]) -> f64 {
        match &self.model {
            EnvModel::Linear(sys) => sys.q.quad_form(x) + sys.r.quad_form(u_dev),
            EnvModel::PendulumAppendix | EnvModel::PendulumGym => {
                x[0] * x[0] + 0.1 * x[1] * x[1] + 0.001 * u_dev[0] * u_dev[0]
            }
            EnvModel::PathTracking | EnvModel::Quadrotor2d => {
                let xs: f64 = x.iter().map(|v| v * v).sum();
                let us: f64 = u_dev.iter().map(|v| v * v).sum();
                xs + 0.01 * us
            }
        }
    }

    /// Records [`OpenLoopEnv::step`] on a tape: shift by `u_eq`, clamp
    /// onto the actuator box, integrate.
    pub fn step_on_tape(&self, tape: &mut Tape<'_>, x: NodeId, u_dev: NodeId) -> NodeId {
        assert_eq!(tape.value(x).len(), self.state_dim(), "state node width");
        assert_eq!(tape.value(u_dev).len(), self.control_dim(), "control node width");
        let shifted = tape.add_const(u_dev, &self.u_eq);
        let u = tape.clamp(shifted, &self.control_lo, &self.control_hi);
        match &self.model {
            EnvModel::Linear(sys) => {
                let zeros = vec![0.0; sys.state_dim()];
                let ax = tape.const_affine(x, &sys.a, &zeros);
                let bu = tape.const_affine(u, &sys.b, &zeros);
                tape.add(ax, bu)
            }
            EnvModel::PendulumAppendix => {
                let ml2 = PA_M * PA_L * PA_L;
                let theta = tape.slice(x, 0, 1);
                let s = tape.sin(theta);
                // theta' = theta + dt * omega, and the linear part of
                // omega' = omega (1 - dt * damp / ml2).
                let lin = Matrix::from_rows(&[
                    &[1.0, DT],
                    &[0.0, 1.0 - DT * PA_DAMP / ml2],
                ]);
                let base = tape.const_affine(x, &lin, &[0.0, 0.0]);
                let grav = tape.scale(s, DT * PA_G / PA_L);
                let torq = tape.scale(u, DT / ml2);
                let zero = tape.leaf(&[0.0]);
                let add_omega = tape.add(grav, torq);
                let padded = tape.concat(&[zero, add_omega]);
                tape.add(base, padded)
            }
            EnvModel::PendulumGym => {
                let ml2 = PG_M * PG_L * PG_L;
                let theta = tape.slice(x, 0, 1);
                let s = tape.sin(theta);
                let lin = Matrix::from_rows(&[&[1.0, DT], &[0.0, 1.0]]);
                let base = tape.const_affine(x, &lin, &[0.0, 0.0]);
                let grav = tape.scale(s, DT * PG_G / PG_L);
                let torq = tape.scale(u, DT / ml2);
                let zero = tape.leaf(&[0.0]);
                let add_omega = tape.add(grav, torq);
                let padded = tape.concat(&[zero, add_omega]);
                let unwrapped = tape.add(base, padded);
                let wrapped = tape.wrap_angle(unwrapped, 0);
                tape.clamp(
                    wrapped,
                    &[f64::NEG_INFINITY, -PG_OMEGA_MAX],
                    &[f64::INFINITY, PG_OMEGA_MAX],
                )
            }
            EnvModel::PathTracking => {
                let th = tape.slice(x, 1, 1);
                let d = tape.slice(x, 0, 1);
                let s = tape.sin(th);
                let c = tape.cos(th);
                // d' = d + dt * v * sin(th).
                let ds = tape.scale(s, DT * PT_SPEED);
                let d_next = tape.add(d, ds);
                // th' = th + dt * (v / L) u - dt * cos(th) / (R - d).
                let neg_d = tape.scale(d, -1.0);
                let denom = tape.add_const(neg_d, &[PT_RADIUS]);
                let inv = tape.recip(denom);
                let curv = tape.mul(c, inv);
                let steer = tape.scale(u, DT * PT_SPEED / PT_WHEELBASE);
                let curv_dt = tape.scale(curv, -DT);
                let th_mid = tape.add(th, steer);
                let th_next = tape.add(th_mid, curv_dt);
                tape.concat(&[d_next, th_next])
            }
            EnvModel::Quadrotor2d => {
                // Kinematic part: positions and attitude advance by the
                // matching velocities; velocities keep their old value.
                let kin = Matrix::from_rows(&[
                    &[1.0, 0.0, 0.0, DT, 0.0, 0.0],
                    &[0.0, 1.0, 0.0, 0.0, DT, 0.0],
                    &[0.0, 0.0, 1.0, 0.0, 0.0, DT],
                    &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
                    &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                    &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
                ]);
                // Gravity acts on vz; the rotor difference drives omega.
                let grav = [0.0, 0.0, 0.0, 0.0, -DT * QR_G, 0.0];
                let base = tape.const_affine(x, &kin, &grav);
                let theta = tape.slice(x, 2, 1);
                let s = tape.sin(theta);
                let c = tape.cos(theta);
                let thrust_row = Matrix::from_rows(&[&[1.0, 1.0]]);
                let thrust = tape.const_affine(u, &thrust_row, &[0.0]);
                let ax = {
                    let st = tape.mul(s, thrust);
                    tape.scale(st, -DT / QR_M)
                };
                let az = {
                    let ct = tape.mul(c, thrust);
                    tape.scale(ct, DT / QR_M)
                };
                let diff_row = Matrix::from_rows(&[&[1.0, -1.0]]);
                let diff = tape.const_affine(u, &diff_row, &[0.0]);
                let aom = tape.scale(diff, DT * QR_ARM / QR_INERTIA);
                let zero = tape.leaf(&[0.0, 0.0, 0.0]);
                let accel = tape.concat(&[zero, ax, az, aom]);
                tape.add(base, accel)
            }
        }
    }
}

/// A feedback law mapping states to *deviation* controls.
#[derive(Debug, Clone)]
pub enum Policy {
    /// Always outputs zero deviation (pure equilibrium control). The
    /// variant is width-agnostic: [`Policy::control`] returns an empty
    /// vector, and [`ClosedLoopEnv`] widens it to the environment's
    /// control width.
    Zero,
    /// Linear state feedback `u = K x`.
    Linear {
        /// Gain matrix, `control_dim x state_dim`.
        k: Matrix,
    },
    /// Neural controller `u = head(body(x) - body(0))` with a saturated
    /// control head, so the origin maps to zero deviation exactly.
    Net {
        /// The underlying network.
        net: Mlp,
    },
    /// Energy-shaping swing-up with a linear catch near the upright,
    /// for the gym pendulum.
    SwingUp {
        /// Linear gain used inside the capture region.
        k: Matrix,
        /// Capture half-widths `(|theta|, |omega|)`.
        capture: (f64, f64),
    },
}

/// Energy-pumping gain of the swing-up law.
const SWINGUP_KE: f64 = 0.5;

impl Policy {
    /// Builds the swing-up policy for the gym pendulum: an energy-pumping
    /// law far from the target and a discrete-time linear-quadratic catch
    /// controller near the upright.
    pub fn swing_up() -> Result<Self, DynError> {
        // Euler discretization of the pendulum linearized at the upright.
        let a = Matrix::from_rows(&[&[1.0, DT], &[DT * PG_G / PG_L, 1.0]]);
        let b = Matrix::from_rows(&[&[0.0], &[DT / (PG_M * PG_L * PG_L)]]);
        let q = Matrix::diag(&[1.0, 0.1]);
        let r = Matrix::scalar(0.001);
        let sys = LinearSystem::new(a, b, q, r)?;
        let sol = solve_discounted_are(&sys, 1.0)?;
        Ok(Policy::SwingUp { k: sol.k.clone(), capture: (0.3, 1.0) })
    }

    /// Deviation control at `x`.
    pub fn control(&self, x: &[f64]) -> Result<Vec<f64>, DynError> {
        match self {
            Policy::Zero => Ok(vec![0.0; 0]),
            Policy::Linear { k } => {
                if x.len() != k.cols() {
                    return Err(DynError::DimensionMismatch {
                        context: "policy input",
                        expected: k.cols(),
                        got: x.len(),
                    });
                }
                Ok(k.matvec(x))
            }
            Policy::Net { net } => {
                let body = net.body(x)?;
                let body0 = net.body(&vec![0.0; net.input_width()])?;
                let centered: Vec<f64> =
                    body.iter().zip(body0.iter()).map(|(a, b)| a - b).collect();
                Ok(net.apply_head(&centered))
            }
            Policy::SwingUp { k, capture } => {
                let (theta, omega) = (x[0], x[1]);
                Ok(vec![swing_up_control(theta, omega, k, *capture)])
            }
        }
    }

    /// Records the policy on a tape. `net_src` must be the tape source of
    /// the policy network's parameters when the policy is [`Policy::Net`]
    /// and is ignored otherwise.
    pub fn control_on_tape(
        &self,
        tape: &mut Tape<'_>,
        x: NodeId,
        net_src: Option<usize>,
    ) -> NodeId {
        match self {
            Policy::Zero => tape.leaf(&[]),
            Policy::Linear { k } => {
                let zeros = vec![0.0; k.rows()];
                tape.const_affine(x, k, &zeros)
            }
            Policy::Net { net } => {
                let src = net_src.expect("a Net policy needs its parameter source");
                let body = net.body_on_tape(tape, x, src);
                let zero_in = vec![0.0; net.input_width()];
                let z = tape.leaf(&zero_in);
                let body0 = net.body_on_tape(tape, z, src);
                let centered = tape.sub(body, body0);
                net.head_on_tape(tape, centered)
            }
            Policy::SwingUp { k, capture } => {
                // Rebuild exactly the branch the current value takes; the
                // tape is constructed per evaluation, so this is the exact
                // piecewise derivative almost everywhere.
                let (theta, omega) = (tape.value(x)[0], tape.value(x)[1]);
                if theta.abs() <= capture.0 && omega.abs() <= capture.1 {
                    let zeros = vec![0.0; 1];
                    let lin = tape.const_affine(x, k, &zeros);
                    return tape.clamp(lin, &[-PG_UMAX], &[PG_UMAX]);
                }
                if omega.abs() < 0.01 && theta.cos() < -0.95 {
                    return tape.leaf(&[PG_UMAX]);
                }
                // u = sat(k_e (E* - E) omega) with E = omega^2 / 2 + g cos(theta).
                let th = tape.slice(x, 0, 1);
                let om = tape.slice(x, 1, 1);
                let c = tape.cos(th);
                let om2 = tape.mul(om, om);
                let kinetic = tape.scale(om2, 0.5);
                let potential = tape.scale(c, PG_G);
                let e = tape.add(kinetic, potential);
                let neg_e = tape.scale(e, -1.0);
                let gap = tape.add_const(neg_e, &[PG_G]);
                let raw = {
                    let ge = tape.mul(gap, om);
                    tape.scale(ge, SWINGUP_KE)
                };
                tape.sat_box(raw, &[-PG_UMAX], &[PG_UMAX])
            }
        }
    }
}

/// The swing-up law in plain arithmetic: linear catch near the upright,
/// a fixed kick out of the hanging rest point, energy pumping elsewhere.
fn swing_up_control(theta: f64, omega: f64, k: &Matrix, capture: (f64, f64)) -> f64 {
    if theta.abs() <= capture.0 && omega.abs() <= capture.1 {
        let u = k[(0, 0)] * theta + k[(0, 1)] * omega;
        return u.clamp(-PG_UMAX, PG_UMAX);
    }
    if omega.abs() < 0.01 && theta.cos() < -0.95 {
        return PG_UMAX;
    }
    let energy = 0.5 * omega * omega + PG_G * theta.cos();
    let raw = SWINGUP_KE * (PG_G - energy) * omega;
    crate::net::sat_scalar(raw, -PG_UMAX, PG_UMAX)
}

/// An environment paired with a feedback policy.
#[derive(Debug, Clone)]
pub struct ClosedLoopEnv {
    /// The underlying environment.
    pub env: OpenLoopEnv,
    /// The feedback law producing deviation controls.
    pub policy: Policy,
}

impl ClosedLoopEnv {
    /// Pairs an environment with a policy.
    pub fn new(env: OpenLoopEnv, policy: Policy) -> Self {
        Self { env, policy }
    }

    /// Evaluates the policy at `x`, widening [`Policy::Zero`] to the
    /// environment's control width.
    pub fn control(&self, x: &[f64]) -> Result<Vec<f64>, DynError> {
        match &self.policy {
            Policy::Zero => Ok(vec![0.0; self.env.control_dim()]),
            p => p.control(x),
        }
    }

    /// One closed-loop step, returning the next state and the deviation
    /// control that produced it.
    pub fn step(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), DynError> {
        let u = self.control(x)?;
        let next = self.env.step(x, &u)?;
        Ok((next, u))
    }

    /// Records `steps` closed-loop steps on a tape, returning the state
    /// nodes `x_0 .. x_steps` and the control nodes `u_0 .. u_{steps-1}`.
    pub fn rollout_on_tape(
        &self,
        tape: &mut Tape<'_>,
        x0: NodeId,
        steps: usize,
        net_src: Option<usize>,
    ) -> (Vec<NodeId>, Vec<NodeId>) {
        let mut states = vec![x0];
        let mut controls = Vec::with_capacity(steps);
        let zeros = vec![0.0; self.env.control_dim()];
        let mut x = x0;
        for _ in 0..steps {
            let u = match &self.policy {
                Policy::Zero => tape.leaf(&zeros),
                p => p.control_on_tape(tape, x, net_src),
            };
            let next = self.env.step_on_tape(tape, x, u);
            controls.push(u);
            states.push(next);
            x = next;
        }
        (states, controls)
    }
}

/// Flags, one per visited state, marking which of them left the domain.
pub type ExitFlags = Vec<bool>;

/// Simulates `steps` closed-loop steps from `x0`. Domain exits are
/// recorded per visited state but never terminate the rollout. The
/// returned trajectory holds `steps + 1` states and `steps` controls.
pub fn rollout(
    cl: &ClosedLoopEnv,
    x0: &[f64],
    steps: usize,
) -> Result<(Trajectory, ExitFlags), DynError> {
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps);
    let mut exits = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    exits.push(!cl.env.in_domain(&x));
    states.push(x.clone());
    for _ in 0..steps {
        let (next, u) = cl.step(&x)?;
        exits.push(!cl.env.in_domain(&next));
        controls.push(u);
        states.push(next.clone());
        x = next;
    }
    Ok((Trajectory { states, controls }, exits))
}

/// Cutoff for the truncated discounted sum in [`estimate_value`].
pub const VALUE_TRUNCATION: f64 = 1e-4;

/// Estimates the discounted infinite-horizon cost of the closed loop
/// from `x0` by summing stage costs until the discount weight `gamma^k`
/// falls below [`VALUE_TRUNCATION`].
pub fn estimate_value(cl: &ClosedLoopEnv, x0: &[f64], gamma: f64) -> Result<f64, DynError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(DynError::InvalidGamma(gamma));
    }
    let mut total = 0.0;
    let mut weight = 1.0;
    let mut x = x0.to_vec();
    while weight >= VALUE_TRUNCATION {
        let u = cl.control(&x)?;
        total += weight * cl.env.stage_cost(&x, &u);
        x = cl.env.step(&x, &u)?;
        weight *= gamma;
    }
    Ok(total)
}

/// Summary of a batch of stabilization rollouts; see
/// [`crate::glf::check_stability_by_simulation`].
#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    /// Fraction of starts that end inside the target ball and stay there
    /// for the final tenth of the horizon.
    pub converged_fraction: f64,
    /// Largest state norm observed over all rollouts.
    pub max_excursion: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_system(gamma: f64) -> (LinearSystem, crate::lqr::LqrSolution) {
        let sys = LinearSystem::scalar(2.0, 1.0, 1.0, 1.0).expect("valid system");
        let sol = solve_discounted_are(&sys, gamma).expect("solvable");
        (sys, sol)
    }

    #[test]
    fn hand_integrated_pins_match_each_environment() {
        let pa = OpenLoopEnv::pendulum_appendix();
        let next = pa
            .step(&[std::f64::consts::FRAC_PI_6, 0.0], &[0.0])
            .expect("step");
        assert!((next[1] - 0.4905).abs() < 1e-12, "appendix rate pin, got {}", next[1]);
        assert!((next[0] - std::f64::consts::FRAC_PI_6).abs() < 1e-15);

        let pg = OpenLoopEnv::pendulum_gym();
        let next = pg
            .step(&[std::f64::consts::FRAC_PI_2, 0.0], &[0.0])
            .expect("step");
        assert!((next[1] - 0.5).abs() < 1e-12, "gym rate pin, got {}", next[1]);

        let pt = OpenLoopEnv::path_tracking();
        let next = pt.step(&[0.0, std::f64::consts::FRAC_PI_2], &[0.0]).expect("step");
        assert!((next[0] - 0.1).abs() < 1e-12, "path lateral pin, got {}", next[0]);
    }

    #[test]
    fn origin_with_zero_deviation_is_a_fixed_point_everywhere() {
        for env in [
            OpenLoopEnv::pendulum_appendix(),
            OpenLoopEnv::pendulum_gym(),
            OpenLoopEnv::path_tracking(),
            OpenLoopEnv::quadrotor2d(),
            OpenLoopEnv::linear(example_system(0.7).0),
        ] {
            let x0 = vec![0.0; env.state_dim()];
            let u0 = vec![0.0; env.control_dim()];
            let next = env.step(&x0, &u0).expect("step");
            for v in &next {
                assert!(v.abs() < 1e-12, "{} drifts from the origin: {next:?}", env.name());
            }
        }
    }

    #[test]
    fn control_clamp_is_idempotent_and_applied_before_integration() {
        let env = OpenLoopEnv::pendulum_appendix();
        let x = [1.0, -2.0];
        let saturated = env.step(&x, &[50.0]).expect("step");
        let at_limit = env.step(&x, &[PA_UMAX]).expect("step");
        assert_eq!(saturated, at_limit);

        let quad = OpenLoopEnv::quadrotor2d();
        let x6 = [0.1, -0.1, 0.2, 0.0, 0.0, 0.0];
        let (lo, hi) = quad.control_dev_bounds();
        // Raw thrust lives in [0, 2.5 u_eq], so deviations from hover
        // span [-u_eq, 1.5 u_eq] per rotor.
        let hover = QR_M * QR_G / 2.0;
        for r in 0..2 {
            assert!((lo[r] + hover).abs() < 1e-12);
            assert!((hi[r] - 1.5 * hover).abs() < 1e-12);
        }
        let below = quad.step(&x6, &[lo[0] - 7.0, 0.0]).expect("step");
        let floor = quad.step(&x6, &[lo[0], 0.0]).expect("step");
        assert_eq!(below, floor);
    }

    #[test]
    fn gym_pendulum_wraps_angle_and_clamps_rate() {
        let env = OpenLoopEnv::pendulum_gym();
        let next = env.step(&[3.1, 8.0], &[0.0]).expect("step");
        assert!(next[0] >= -std::f64::consts::PI && next[0] < std::f64::consts::PI);
        assert!((next[0] - crate::net::wrap_to_pi(3.1 + 0.05 * 8.0)).abs() < 1e-15);
        assert!(next[1] <= PG_OMEGA_MAX);
        // Strong positive torque at the rate limit keeps the rate pinned.
        let pinned = env.step(&[1.0, 8.0], &[2.0]).expect("step");
        assert_eq!(pinned[1], PG_OMEGA_MAX);
    }

    #[test]
    fn tape_step_reproduces_the_plain_step_on_every_environment() {
        let mut rng = Rng::new(20260815);
        for env in [
            OpenLoopEnv::pendulum_appendix(),
            OpenLoopEnv::pendulum_gym(),
            OpenLoopEnv::path_tracking(),
            OpenLoopEnv::quadrotor2d(),
            OpenLoopEnv::linear(example_system(0.7).0),
        ] {
            let (dev_lo, dev_hi) = env.control_dev_bounds();
            for _ in 0..25 {
                let x = env.sample_state(&mut rng);
                let u: Vec<f64> = dev_lo
                    .iter()
                    .zip(&dev_hi)
                    .map(|(&l, &h)| {
                        let l = l.max(-10.0);
                        let h = h.min(10.0);
                        rng.range(l - 1.0, h + 1.0)
                    })
                    .collect();
                let plain = env.step(&x, &u).expect("step");
                let mut tape = Tape::new();
                let xn = tape.leaf(&x);
                let un = tape.leaf(&u);
                let next = env.step_on_tape(&mut tape, xn, un);
                for (a, b) in plain.iter().zip(tape.value(next)) {
                    assert!(
                        (a - b).abs() < 1e-14,
                        "{}: tape {b} vs plain {a}",
                        env.name()
                    );
                }
            }
        }
    }

    #[test]
    fn tape_rollout_gradients_match_finite_differences_through_dynamics() {
        // Differentiate sum of squares of the state after 3 closed-loop
        // steps with respect to the initial state, for each nonlinear
        // environment under its equilibrium policy.
        let mut rng = Rng::new(7);
        for env in [
            OpenLoopEnv::pendulum_appendix(),
            OpenLoopEnv::path_tracking(),
            OpenLoopEnv::quadrotor2d(),
        ] {
            let n = env.state_dim();
            let m = env.control_dim();
            let cl = ClosedLoopEnv::new(env, Policy::Linear { k: Matrix::zeros(m, n) });
            let x0: Vec<f64> = (0..n).map(|_| rng.range(-0.2, 0.2)).collect();
            let value = |x: &[f64]| -> f64 {
                let mut cur = x.to_vec();
                for _ in 0..3 {
                    let (next, _) = cl.step(&cur).expect("step");
                    cur = next;
                }
                cur.iter().map(|v| v * v).sum()
            };
            let mut tape = Tape::new();
            let xn = tape.leaf(&x0);
            let (states, _) = cl.rollout_on_tape(&mut tape, xn, 3, None);
            let last = *states.last().expect("states");
            let loss = tape.sum_sq(last);
            tape.backward(loss);
            let grad = tape.grad_of(xn).to_vec();
            let h = 1e-6;
            for i in 0..n {
                let mut plus = x0.clone();
                plus[i] += h;
                let mut minus = x0.clone();
                minus[i] -= h;
                let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                let denom = grad[i].abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((grad[i] - fd) / denom).abs() < 1e-5,
                    "{}: coordinate {i}: tape {} vs fd {fd}",
                    cl.env.name(),
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn closed_loop_linear_env_matches_the_dedicated_linear_simulation() {
        let (sys, sol) = example_system(0.7);
        let cl = ClosedLoopEnv::new(OpenLoopEnv::linear(sys), Policy::Linear { k: sol.k.clone() });
        let x0 = vec![1.3];
        let reference = crate::lqr::simulate_linear(&sol, &x0, 100);
        let (traj, _) = rollout(&cl, &x0, 100).expect("rollout");
        for (a, b) in reference.iter().zip(traj.states.iter()) {
            assert!((a[0] - b[0]).abs() <= 1e-12, "diverged: {} vs {}", a[0], b[0]);
        }
    }

    #[test]
    fn rollout_records_domain_exits_without_terminating() {
        let env = OpenLoopEnv::pendulum_appendix();
        // Start near the box edge moving outward: the angle leaves the
        // domain within a few steps, yet the rollout keeps integrating.
        let cl = ClosedLoopEnv::new(env, Policy::Linear { k: Matrix::zeros(1, 2) });
        let (traj, exits) = rollout(&cl, &[11.9, 11.0], 200).expect("rollout");
        assert_eq!(traj.states.len(), 201);
        assert_eq!(traj.controls.len(), 200);
        assert_eq!(exits.len(), 201);
        assert!(exits.iter().any(|&e| e), "expected at least one domain exit");
        assert!(!exits[0], "the start state is inside the domain");
    }

    #[test]
    fn trajectories_resimulate_bitwise() {
        let env = OpenLoopEnv::pendulum_gym();
        let cl = ClosedLoopEnv::new(env, Policy::swing_up().expect("policy"));
        let (traj, _) = rollout(&cl, &[std::f64::consts::PI - 0.4, 0.3], 150).expect("rollout");
        let mut x = traj.states[0].clone();
        for k in 0..traj.controls.len() {
            let (next, u) = cl.step(&x).expect("step");
            assert_eq!(u, traj.controls[k], "control differs at step {k}");
            assert_eq!(next, traj.states[k + 1], "state differs at step {k}");
            x = next;
        }
    }

    #[test]
    fn swing_up_reaches_and_holds_the_upright() {
        let env = OpenLoopEnv::pendulum_gym();
        let cl = ClosedLoopEnv::new(env, Policy::swing_up().expect("policy"));
        // Start hanging at the bottom, at rest.
        let (traj, _) = rollout(&cl, &[std::f64::consts::PI, 0.0], 200).expect("rollout");
        let last = traj.states.last().expect("states");
        assert!(
            last[0].abs() < 0.2,
            "swing-up did not reach the upright: final theta {}",
            last[0]
        );
        // Policy is exactly zero at the target.
        let u = cl.policy.control(&[0.0, 0.0]).expect("control");
        assert_eq!(u, vec![0.0]);
    }

    #[test]
    fn zero_policy_drives_actuated_environments_at_equilibrium_control() {
        let cl = ClosedLoopEnv::new(OpenLoopEnv::pendulum_appendix(), Policy::Zero);
        let (next, u) = cl.step(&[0.5, 0.0]).expect("step");
        assert_eq!(u, vec![0.0]);
        assert_eq!(next, cl.env.step(&[0.5, 0.0], &[0.0]).expect("step"));
        let (traj, _) = rollout(&cl, &[0.5, 0.0], 5).expect("rollout");
        assert_eq!(traj.states.len(), 6);

        let mut tape = Tape::new();
        let x0 = tape.leaf(&[0.5, 0.0]);
        let (states, controls) = cl.rollout_on_tape(&mut tape, x0, 2, None);
        assert_eq!(tape.value(controls[0]), &[0.0]);
        for (a, b) in tape.value(states[1]).iter().zip(&traj.states[1]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn estimated_value_matches_the_algebraic_value_for_linear_loops() {
        for gamma in [0.5, 0.7, 0.9] {
            let (sys, sol) = example_system(gamma);
            let cl =
                ClosedLoopEnv::new(OpenLoopEnv::linear(sys), Policy::Linear { k: sol.k.clone() });
            for x0 in [[0.8], [-1.6], [2.4]] {
                let estimate = estimate_value(&cl, &x0, gamma).expect("estimate");
                let algebraic = sol.p.quad_form(&x0);
                assert!(
                    (estimate - algebraic).abs() <= 0.01 * algebraic.abs(),
                    "gamma {gamma}: estimate {estimate} vs algebraic {algebraic}"
                );
            }
        }
    }

    #[test]
    fn estimate_value_rejects_undiscounted_requests() {
        let (sys, sol) = example_system(0.7);
        let cl = ClosedLoopEnv::new(OpenLoopEnv::linear(sys), Policy::Linear { k: sol.k });
        assert!(matches!(
            estimate_value(&cl, &[1.0], 1.0),
            Err(DynError::InvalidGamma(_))
        ));
        assert!(matches!(
            estimate_value(&cl, &[1.0], 0.0),
            Err(DynError::InvalidGamma(_))
        ));
    }

    #[test]
    fn unknown_environment_names_are_rejected() {
        assert!(matches!(
            OpenLoopEnv::by_name("pendulum"),
            Err(DynError::UnknownEnv(_))
        ));
        for name in ["pendulum-appendix", "pendulum-gym", "path-tracking", "quadrotor2d"] {
            assert_eq!(OpenLoopEnv::by_name(name).expect("known").name(), name);
        }
    }
}
