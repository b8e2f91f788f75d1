//! Discounted linear-quadratic regulation.
//!
//! Solves the discounted LQR problem for a linear system with quadratic
//! stage cost `x'Qx + u'Ru` and discount `gamma` in `(0, 1]`: the value
//! function is `x' P x` with `P` the fixed point of the discounted
//! algebraic Riccati equation
//!
//! ```text
//! P = Q + gamma A'PA - gamma^2 A'PB (R + gamma B'PB)^-1 B'PA,
//! ```
//!
//! the optimal gain is `K = -gamma (R + gamma B'PB)^-1 B'PA`, and the
//! closed loop is `F = A + BK`. Discounting breaks the naive Lyapunov
//! property of the value function: the closed loop is exponentially
//! stable if and only if `rho(F) < 1`, which fails for small discounts.
//! [`true_gamma_threshold`] computes the critical discount by bisection
//! on the spectral radius.
//!
//! The equation is solved by fixed-point (value) iteration from
//! `P0 = Q`, which converges for stabilizable pairs at desk-scale
//! dimensions and avoids a Schur-based solver.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matlib::{self, Matrix};
use crate::tol;

/// Errors from LQR construction and solving.
#[derive(Debug, Error)]
pub enum LqrError {
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error(
        "Riccati iteration diverged (P exceeded {0:.1e}); \
         system may not be stabilizable or the discount makes cost unbounded"
    )]
    Divergence(f64),
    #[error("Riccati iteration did not converge within the iteration cap")]
    NoConvergence,
    #[error("closed loop is unstable even at discount 1; no stability threshold exists")]
    NoThreshold,
    #[error("discount must lie in (0, 1], got {0}")]
    InvalidGamma(f64),
    #[error("linear algebra failure: {0}")]
    Mat(#[from] matlib::MatError),
    #[error("solution failed the Riccati residual check: residual {residual:.3e}")]
    ResidualCheck { residual: f64 },
}

/// A discrete-time linear system `x+ = Ax + Bu` with quadratic stage
/// cost `x'Qx + u'Ru`.
///
/// Invariants (checked by [`LinearSystem::new`]): `A` is n x n, `B` is
/// n x m, `Q` is n x n symmetric with smallest eigenvalue >= -1e-10
/// (positive semidefinite up to roundoff), `R` is m x m symmetric
/// positive definite.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct LinearSystem {
    pub a: Matrix,
    pub b: Matrix,
    pub q: Matrix,
    pub r: Matrix,
}

impl LinearSystem {
    /// Validated constructor.
    ///
    /// # Errors
    /// [`LqrError::InvalidSystem`] on dimension inconsistency, an
    /// asymmetric or indefinite `Q`, or a non-positive-definite `R`.
    pub fn new(a: Matrix, b: Matrix, q: Matrix, r: Matrix) -> Result<Self, LqrError> {
        let n = a.rows();
        let m = b.cols();
        if !a.is_square() {
            return Err(LqrError::InvalidSystem(format!(
                "A must be square, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        if b.rows() != n {
            return Err(LqrError::InvalidSystem(format!(
                "B must have {n} rows, got {}",
                b.rows()
            )));
        }
        if q.rows() != n || q.cols() != n {
            return Err(LqrError::InvalidSystem(format!(
                "Q must be {n}x{n}, got {}x{}",
                q.rows(),
                q.cols()
            )));
        }
        if r.rows() != m || r.cols() != m {
            return Err(LqrError::InvalidSystem(format!(
                "R must be {m}x{m}, got {}x{}",
                r.rows(),
                r.cols()
            )));
        }
        q.check_symmetric()
            .map_err(|e| LqrError::InvalidSystem(format!("Q: {e}")))?;
        let (q_min, _) = matlib::sym_extreme_eigs(&q).map_err(LqrError::Mat)?;
        if q_min < -1e-10 {
            return Err(LqrError::InvalidSystem(format!(
                "Q must be positive semidefinite; smallest eigenvalue {q_min:.3e}"
            )));
        }
        r.check_symmetric()
            .map_err(|e| LqrError::InvalidSystem(format!("R: {e}")))?;
        if matlib::cholesky(&r, 0.0).is_err() {
            return Err(LqrError::InvalidSystem(
                "R must be positive definite".into(),
            ));
        }
        Ok(LinearSystem { a, b, q, r })
    }

    /// Convenience constructor for scalar (n = m = 1) systems.
    ///
    /// # Errors
    /// Same validation as [`LinearSystem::new`] (`q >= 0`, `r > 0`).
    pub fn scalar(a: f64, b: f64, q: f64, r: f64) -> Result<Self, LqrError> {
        LinearSystem::new(
            Matrix::scalar(a),
            Matrix::scalar(b),
            Matrix::scalar(q),
            Matrix::scalar(r),
        )
    }

    /// State dimension.
    #[must_use]
    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    /// Control dimension.
    #[must_use]
    pub fn control_dim(&self) -> usize {
        self.b.cols()
    }

    /// Load a system from a JSON document `{A, B, Q, R}` of nested
    /// numeric arrays.
    ///
    /// # Errors
    /// Parse errors and the [`LinearSystem::new`] validations.
    pub fn from_json(text: &str) -> Result<Self, LqrError> {
        let raw: LinearSystem = serde_json::from_str(text)
            .map_err(|e| LqrError::InvalidSystem(format!("JSON parse: {e}")))?;
        LinearSystem::new(raw.a, raw.b, raw.q, raw.r)
    }
}

/// Solution of the discounted LQR problem at a fixed discount.
///
/// Invariants: `p` is symmetric positive semidefinite and satisfies the
/// discounted Riccati residual bound `<= 1e-8 * (1 + max-norm of P)`;
/// `f = a + b k` exactly by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LqrSolution {
    /// Discount factor in (0, 1].
    pub gamma: f64,
    /// Value matrix: optimal cost-to-go is `x' P x`.
    pub p: Matrix,
    /// Optimal feedback gain (`u = K x`).
    pub k: Matrix,
    /// Closed-loop matrix `A + B K`.
    pub f: Matrix,
}

/// Gain and closed loop for a given `P` candidate:
/// `K = -gamma (R + gamma B'PB)^-1 B'PA`, `F = A + BK`.
fn gain_for(sys: &LinearSystem, p: &Matrix, gamma: f64) -> Result<(Matrix, Matrix), LqrError> {
    let bt_p = sys.b.t().matmul(p);
    let g = sys.r.add(&bt_p.matmul(&sys.b).scale(gamma)).symmetrized();
    let bt_p_a = bt_p.matmul(&sys.a);
    let k = matlib::spd_solve(&g, &bt_p_a)?.scale(-gamma);
    let f = sys.a.add(&sys.b.matmul(&k));
    Ok((k, f))
}

/// Solve the discounted algebraic Riccati equation by value iteration.
///
/// Iterates `P <- Q + gamma A'P(A + BK)` with
/// `K = -gamma (R + gamma B'PB)^-1 B'PA` from `P0 = Q`, stopping when
/// the relative change falls below `1e-12` (cap 10^6 iterations). The
/// `m x m` inverse is applied through a Cholesky solve.
///
/// # Errors
/// [`LqrError::InvalidGamma`] for a discount outside `(0, 1]`;
/// [`LqrError::Divergence`] / [`LqrError::NoConvergence`] when the
/// iteration blows up or stalls (non-stabilizable pair);
/// [`LqrError::ResidualCheck`] if the converged matrix fails the
/// Riccati residual invariant.
///
/// # Examples
/// ```
/// use glyap::lqr::{solve_discounted_are, LinearSystem};
/// let sys = LinearSystem::scalar(2.0, 1.0, 1.0, 1.0).unwrap();
/// let sol = solve_discounted_are(&sys, 1.0).unwrap();
/// assert!((sol.p[(0, 0)] - (2.0 + 5.0_f64.sqrt())).abs() < 1e-9);
/// ```
pub fn solve_discounted_are(sys: &LinearSystem, gamma: f64) -> Result<LqrSolution, LqrError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(LqrError::InvalidGamma(gamma));
    }
    let cfg = tol::DEFAULT;
    let mut p = sys.q.clone();
    let mut converged = false;
    for _ in 0..cfg.are_max_iter {
        let (k, f) = gain_for(sys, &p, gamma)?;
        // P' = Q + gamma A'P(A + BK); algebraically equal to the
        // Riccati right-hand side but cheaper and better conditioned.
        let p_next = sys
            .q
            .add(&sys.a.t().matmul(&p.matmul(&f)).scale(gamma))
            .symmetrized();
        let change = p_next.sub(&p).norm_max();
        let scale = 1.0 + p_next.norm_max();
        p = p_next;
        if p.norm_max() > cfg.are_divergence_norm {
            return Err(LqrError::Divergence(cfg.are_divergence_norm));
        }
        if change <= cfg.are_rel_change * scale {
            converged = true;
            break;
        }
        let _ = k;
    }
    if !converged {
        return Err(LqrError::NoConvergence);
    }
    let (k, f) = gain_for(sys, &p, gamma)?;

    // Residual invariant: P - Q - gamma A'PA + gamma^2 A'PB G^-1 B'PA = 0.
    let bt_p = sys.b.t().matmul(&p);
    let g = sys.r.add(&bt_p.matmul(&sys.b).scale(gamma)).symmetrized();
    let bt_p_a = bt_p.matmul(&sys.a);
    let correction = sys
        .a
        .t()
        .matmul(&p.matmul(&sys.b))
        .matmul(&matlib::spd_solve(&g, &bt_p_a)?)
        .scale(gamma * gamma);
    let residual = p
        .sub(&sys.q)
        .sub(&sys.a.t().matmul(&p.matmul(&sys.a)).scale(gamma))
        .add(&correction)
        .norm_max();
    if residual > 1e-8 * (1.0 + p.norm_max()) {
        return Err(LqrError::ResidualCheck { residual });
    }

    Ok(LqrSolution { gamma, p, k, f })
}

/// True stability threshold: the infimum discount at which the optimal
/// closed loop is exponentially stable, found by bisection on
/// `rho(F) < 1` over `(1e-4, 1]` to absolute tolerance `tol`.
///
/// Stability is probed with margin `1e-9` to avoid boundary chatter.
/// If the closed loop is stable at the lower bracket already, the lower
/// bracket is returned. Monotonicity of stability in the discount is
/// assumed (exact for scalar systems; for general systems the result is
/// a bracket, not a proven threshold).
///
/// # Errors
/// [`LqrError::NoThreshold`] if the loop is unstable even at discount 1.
pub fn true_gamma_threshold(sys: &LinearSystem, tol_abs: f64) -> Result<f64, LqrError> {
    assert!(tol_abs > 0.0, "bisection tolerance must be positive");
    let cfg = tol::DEFAULT;
    let stable = |gamma: f64| -> bool {
        match solve_discounted_are(sys, gamma) {
            Ok(sol) => match matlib::spectral_radius(&sol.f) {
                Ok(rho) => rho < 1.0 - cfg.stability_margin,
                Err(_) => false,
            },
            Err(_) => false,
        }
    };
    if !stable(1.0) {
        return Err(LqrError::NoThreshold);
    }
    let mut lo = cfg.gamma_lower_bracket;
    if stable(lo) {
        return Ok(lo);
    }
    let mut hi = 1.0;
    while hi - lo > tol_abs {
        let mid = 0.5 * (lo + hi);
        if stable(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Simulate the optimal closed loop: returns
/// `[x0, F x0, F^2 x0, ..., F^steps x0]` by iterated multiplication.
#[must_use]
pub fn simulate_linear(sol: &LqrSolution, x0: &[f64], steps: usize) -> Vec<Vec<f64>> {
    assert_eq!(
        x0.len(),
        sol.f.rows(),
        "simulate_linear: state dimension mismatch"
    );
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(x0.to_vec());
    for k in 0..steps {
        let next = sol.f.matvec(&traj[k]);
        traj.push(next);
    }
    traj
}
