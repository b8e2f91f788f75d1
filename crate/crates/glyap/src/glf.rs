//! Generalized certificates of stability.
//!
//! A certificate combines a frozen *base* value function `J`, a learned
//! *residual* `phi`, a per-state vector of *step weights* `sigma`, and
//! three scalars (`alpha_bar`, `beta`, `delta`) into the practical
//! candidate
//!
//! ```text
//! V(x) = |J(x) - J(0)| + |phi(x) - phi(0)| + beta |x|^2
//! ```
//!
//! which is zero at the origin by construction and positive definite
//! whenever `beta > 0`. The certified decrease condition is not the
//! classical one-step decay but a weighted average over the next `M`
//! steps; [`residual_f`] evaluates its defect on a trajectory window and
//! [`classical_from_generalized`] rebuilds the equivalent one-step
//! function whose ordinary decrement matches the averaged condition
//! exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{rollout, ClosedLoopEnv, StabilityReport};
use crate::lmi::StepWeights;
use crate::matlib::Matrix;
use crate::net::{Mlp, NodeId, Tape};

/// Errors produced by certificate evaluation.
#[derive(Debug, Error)]
pub enum GlfError {
    /// A trajectory window was shorter than the averaging horizon needs.
    #[error("trajectory holds {got} states but the window needs {needed}")]
    TrajectoryTooShort {
        /// Required number of states (`M + 1`).
        needed: usize,
        /// Available number of states.
        got: usize,
    },
    /// A weight function returned the wrong number of weights.
    #[error("weight function produced {got} weights for a window of {expected}")]
    WeightCountMismatch {
        /// Expected window length.
        expected: usize,
        /// Produced number of weights.
        got: usize,
    },
    /// An invalid certificate field.
    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),
    /// A network evaluation failed.
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
    /// A simulation failed.
    #[error(transparent)]
    Dyn(#[from] crate::dynamics::DynError),
}

/// A simulated trajectory: `states` holds the visited states (one more
/// entry than `controls`), `controls` the deviation controls that
/// produced each transition. Re-running the policy and step map from
/// `states[0]` reproduces both sequences bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Visited states, `x_0 .. x_K`.
    pub states: Vec<Vec<f64>>,
    /// Deviation controls, `u_0 .. u_{K-1}`.
    pub controls: Vec<Vec<f64>>,
}

/// A scalar function of the state, used for both the base value and the
/// learned residual of a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum ValueFn {
    /// Identically zero.
    Zero,
    /// A constant. Unlike every other variant, a constant component is
    /// passed through [`eval_practical_v`] unchanged (it carries no state
    /// information to centre); this is what degenerate diagnostic
    /// certificates like `V = 1` rely on.
    Constant(f64),
    /// Quadratic form `x' P x`.
    Quadratic(Matrix),
    /// Factored quadratic `|W x|^2 = x' W' W x`, positive semidefinite
    /// for any trainable square factor `W`.
    FactoredQuadratic(Matrix),
    /// A scalar-head network.
    Net(Mlp),
    /// A scalar-head network times a constant (used when regression
    /// targets were normalized before fitting).
    ScaledNet {
        /// The fitted network.
        net: Mlp,
        /// Multiplier restoring the original target scale.
        scale: f64,
    },
}

impl ValueFn {
    /// Raw value `f(x)`.
    pub fn eval(&self, x: &[f64]) -> Result<f64, GlfError> {
        Ok(match self {
            ValueFn::Zero => 0.0,
            ValueFn::Constant(c) => *c,
            ValueFn::Quadratic(p) => p.quad_form(x),
            ValueFn::FactoredQuadratic(w) => w.matvec(x).iter().map(|v| v * v).sum(),
            ValueFn::Net(net) => net.forward(x)?[0],
            ValueFn::ScaledNet { net, scale } => scale * net.forward(x)?[0],
        })
    }

    /// Records the raw value on a tape. `src` must be the tape source of
    /// this function's parameters when it has any (network or factored
    /// quadratic being trained); pass `None` to treat them as constants.
    pub fn on_tape(&self, tape: &mut Tape<'_>, x: NodeId, src: Option<usize>) -> NodeId {
        match self {
            ValueFn::Zero => tape.leaf(&[0.0]),
            ValueFn::Constant(c) => tape.leaf(&[*c]),
            ValueFn::Quadratic(p) => {
                let zeros = vec![0.0; p.rows()];
                let px = tape.const_affine(x, p, &zeros);
                tape.dot(x, px)
            }
            ValueFn::FactoredQuadratic(w) => {
                let wx = match src {
                    Some(s) => tape.linear_param(x, s, 0, w.rows(), w.cols()),
                    None => {
                        let zeros = vec![0.0; w.rows()];
                        tape.const_affine(x, w, &zeros)
                    }
                };
                tape.sum_sq(wx)
            }
            ValueFn::Net(net) => match src {
                Some(s) => net.forward_on_tape(tape, x, s),
                None => tape.leaf(&[net.forward(tape.value(x)).expect("net width")[0]]),
            },
            ValueFn::ScaledNet { net, scale } => {
                let raw = match src {
                    Some(s) => net.forward_on_tape(tape, x, s),
                    None => tape.leaf(&[net.forward(tape.value(x)).expect("net width")[0]]),
                };
                tape.scale(raw, *scale)
            }
        }
    }

    /// Trainable parameter view, if this function has one.
    ///
    /// For a [`ValueFn::FactoredQuadratic`] the flat layout matches the
    /// tape's affine convention: the row-major factor followed by a bias
    /// block that is absent here, so only the matrix entries appear.
    pub fn params(&self) -> Option<&[f64]> {
        match self {
            ValueFn::Net(net) | ValueFn::ScaledNet { net, .. } => Some(net.params()),
            ValueFn::FactoredQuadratic(w) => Some(w.entries()),
            _ => None,
        }
    }
}

/// Step-weight functions: how the `M` weights are produced at a state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum WeightFn {
    /// State-independent weights summing to the window length.
    Constant(StepWeights),
    /// Softmax-normalized network weights: positive and summing to the
    /// window length exactly at every state.
    Net(Mlp),
    /// Floor-constrained network weights `sigma_i(x) = floor +
    /// max(body_i(x), 0)`: each weight stays at or above the floor, with
    /// no sum normalization.
    FloorNet {
        /// Network whose pre-head outputs are floored.
        net: Mlp,
        /// Lower bound kept on every weight.
        floor: f64,
    },
}

impl WeightFn {
    /// Window length this weight function is for.
    pub fn horizon(&self) -> usize {
        match self {
            WeightFn::Constant(w) => w.horizon(),
            WeightFn::Net(net) => net.output_width(),
            WeightFn::FloorNet { net, .. } => net.output_width(),
        }
    }

    /// Weights at `x`.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, GlfError> {
        Ok(match self {
            WeightFn::Constant(w) => w.sigma().to_vec(),
            WeightFn::Net(net) => net.forward(x)?,
            WeightFn::FloorNet { net, floor } => {
                net.body(x)?.iter().map(|v| floor + v.max(0.0)).collect()
            }
        })
    }
}

/// Default exclusion radius around the origin for an environment: zero
/// for linear loops, small for the pendulums, and half a unit for the
/// larger nonlinear benchmarks.
pub fn default_delta(env_name: &str) -> f64 {
    match env_name {
        "linear" => 0.0,
        "pendulum-appendix" | "pendulum-gym" => 0.05,
        _ => 0.5,
    }
}

/// A generalized certificate; see the module docs for the role of each
/// field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedCertificate {
    /// Frozen base value function `J`.
    #[serde(rename = "base")]
    pub base_value: ValueFn,
    /// Learned residual `phi`.
    #[serde(rename = "residual")]
    pub residual_fn: ValueFn,
    /// Step-weight function `sigma`.
    #[serde(rename = "weights")]
    pub weight_fn: WeightFn,
    /// Required average decrease margin in `[0, 1)`.
    pub alpha_bar: f64,
    /// Coefficient of the positive-definite quadratic term.
    pub beta: f64,
    /// Radius of the ball around the origin excluded from the decrease
    /// condition.
    pub delta: f64,
    /// Averaging window length.
    #[serde(rename = "M")]
    pub m: usize,
}

impl GeneralizedCertificate {
    /// Checks the scalar ranges and that the weight function produces
    /// exactly `M` weights.
    pub fn validate(&self) -> Result<(), GlfError> {
        if self.m == 0 {
            return Err(GlfError::InvalidCertificate("window length M must be >= 1".into()));
        }
        if !(self.alpha_bar >= 0.0 && self.alpha_bar < 1.0) {
            return Err(GlfError::InvalidCertificate(format!(
                "alpha_bar must lie in [0, 1), got {}",
                self.alpha_bar
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(GlfError::InvalidCertificate(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(GlfError::InvalidCertificate(format!(
                "delta must be non-negative, got {}",
                self.delta
            )));
        }
        if self.weight_fn.horizon() != self.m {
            return Err(GlfError::WeightCountMismatch {
                expected: self.m,
                got: self.weight_fn.horizon(),
            });
        }
        Ok(())
    }

    /// Serializes the certificate to JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    /// Parses a certificate from JSON.
    pub fn from_json(text: &str) -> Result<Self, GlfError> {
        let cert: Self = serde_json::from_str(text)
            .map_err(|e| GlfError::InvalidCertificate(format!("JSON parse failure: {e}")))?;
        cert.validate()?;
        Ok(cert)
    }
}

fn centered(f: &ValueFn, x: &[f64]) -> Result<f64, GlfError> {
    match f {
        // Constants pass through unchanged; centring them would erase
        // the one piece of information they carry.
        ValueFn::Constant(c) => Ok(*c),
        other => {
            let zero = vec![0.0; x.len()];
            Ok((other.eval(x)? - other.eval(&zero)?).abs())
        }
    }
}

/// Evaluates the practical candidate
/// `V(x) = |J(x) - J(0)| + |phi(x) - phi(0)| + beta |x|^2`.
///
/// `V(0) = 0` holds exactly (each centred term cancels identically and
/// the quadratic term vanishes), and the value is invariant to adding a
/// constant to the base or the residual.
pub fn eval_practical_v(cert: &GeneralizedCertificate, x: &[f64]) -> Result<f64, GlfError> {
    let base = centered(&cert.base_value, x)?;
    let residual = centered(&cert.residual_fn, x)?;
    let quad: f64 = x.iter().map(|v| v * v).sum();
    Ok(base + residual + cert.beta * quad)
}

/// Records [`eval_practical_v`] on a tape. `base_src` / `res_src` are
/// the parameter sources of the base and residual when they are being
/// trained (see [`ValueFn::on_tape`]); `zero` must be a leaf holding the
/// zero state.
pub fn practical_v_on_tape(
    cert: &GeneralizedCertificate,
    tape: &mut Tape<'_>,
    x: NodeId,
    zero: NodeId,
    base_src: Option<usize>,
    res_src: Option<usize>,
) -> NodeId {
    let mut total: Option<NodeId> = None;
    for (f, src) in [(&cert.base_value, base_src), (&cert.residual_fn, res_src)] {
        let term = match f {
            ValueFn::Constant(c) => tape.leaf(&[*c]),
            other => {
                let fx = other.on_tape(tape, x, src);
                let f0 = other.on_tape(tape, zero, src);
                let diff = tape.sub(fx, f0);
                tape.abs(diff)
            }
        };
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    let quad = tape.sum_sq(x);
    let bq = tape.scale(quad, cert.beta);
    let t = total.expect("two components were added");
    tape.add(t, bq)
}

/// Evaluates the averaged decrease defect on the first window of a
/// trajectory:
///
/// ```text
/// F = (1/M) sum_{i=1..M} sigma_i(x_0) V(x_i)  -  (1 - alpha_bar) V(x_0)
/// ```
///
/// Negative values certify the required average decrease at `x_0`. The
/// trajectory must hold at least `M + 1` states. With weights
/// `(M, 0, ..., 0)` and `alpha_bar = 0` this reduces to the classical
/// one-step decrement `V(x_1) - V(x_0)` exactly.
pub fn residual_f(cert: &GeneralizedCertificate, traj: &Trajectory) -> Result<f64, GlfError> {
    let needed = cert.m + 1;
    if traj.states.len() < needed {
        return Err(GlfError::TrajectoryTooShort { needed, got: traj.states.len() });
    }
    let sigma = cert.weight_fn.eval(&traj.states[0])?;
    if sigma.len() != cert.m {
        return Err(GlfError::WeightCountMismatch { expected: cert.m, got: sigma.len() });
    }
    // Dividing each weight by M (rather than the accumulated sum) keeps
    // the classical specialization sigma = (M, 0, ..., 0) exact: M/M is
    // 1 in floating point, so the reduction to V(x_1) - V(x_0) is
    // bitwise.
    let m = cert.m as f64;
    let mut avg = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        avg += (s / m) * eval_practical_v(cert, &traj.states[i + 1])?;
    }
    Ok(avg - (1.0 - cert.alpha_bar) * eval_practical_v(cert, &traj.states[0])?)
}

/// Rebuilds the classical one-step function equivalent to a weighted
/// multi-step condition with constant weights:
///
/// ```text
/// W(x) = sum_{j=0..M-1} a_j V(f^j(x)),   a_j = (1/M) sum_{i=j+1..M} sigma_i
/// ```
///
/// (so `a_0 = 1` because the weights sum to `M`). Along any trajectory
/// of `f`, `W(x_{k+1}) - W(x_k)` equals the weighted average
/// `(1/M) sum_i sigma_i V(x_{k+i}) - V(x_k)` identically, which is what
/// makes the averaged condition a genuine Lyapunov argument.
pub fn classical_from_generalized(
    value: &dyn Fn(&[f64]) -> f64,
    weights: &StepWeights,
    step: &dyn Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
) -> f64 {
    let m = weights.horizon();
    let sigma = weights.sigma();
    let mut total = 0.0;
    let mut cur = x.to_vec();
    for j in 0..m {
        let a_j: f64 = sigma[j..].iter().sum::<f64>() / m as f64;
        total += a_j * value(&cur);
        if j + 1 < m {
            cur = step(&cur);
        }
    }
    total
}

/// Simulates every start for `horizon` steps under the closed loop and
/// reports the fraction that end *and stay* inside the ball of radius
/// `ball` for the final tenth of the horizon, together with the largest
/// state norm seen anywhere. A rollout that leaves the domain box at any
/// point counts as non-converged even if it later settles in the ball.
pub fn check_stability_by_simulation(
    cl: &ClosedLoopEnv,
    starts: &[Vec<f64>],
    horizon: usize,
    ball: f64,
) -> Result<StabilityReport, GlfError> {
    let tail = ((horizon as f64) * 0.1).ceil().max(1.0) as usize;
    let mut converged = 0usize;
    let mut excursion = 0.0f64;
    for x0 in starts {
        let (traj, exits) = rollout(cl, x0, horizon)?;
        let mut ok = !exits.iter().any(|&left| left);
        for (k, state) in traj.states.iter().enumerate() {
            let norm = state.iter().map(|v| v * v).sum::<f64>().sqrt();
            excursion = excursion.max(norm);
            if k + tail >= traj.states.len() && norm >= ball {
                ok = false;
            }
        }
        if ok {
            converged += 1;
        }
    }
    let fraction = if starts.is_empty() { 0.0 } else { converged as f64 / starts.len() as f64 };
    Ok(StabilityReport { converged_fraction: fraction, max_excursion: excursion })
}
