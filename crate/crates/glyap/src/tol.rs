//! Centralized numeric tolerances.
//!
//! Every convergence threshold, symmetry margin, and strict-inequality
//! guard used across the crate lives in one configuration record so the
//! numerics can be audited (and, when needed, tightened) in a single
//! place. The constant [`DEFAULT`] holds the values the library ships
//! with; functions that accept no explicit configuration use it.

/// Numeric-configuration record. All fields are absolute unless the name
/// says otherwise (`_rel` = relative to a stated norm).
#[derive(Debug, Clone, Copy)]
pub struct NumericConfig {
    /// Symmetry check: `|m_ij - m_ji| <= sym_rel * max(1, max-norm)`.
    pub sym_rel: f64,
    /// Jacobi eigensolver stop: off-diagonal Frobenius norm relative to
    /// the input's Frobenius norm.
    pub jacobi_off_rel: f64,
    /// Jacobi sweep cap (convergence is quadratic; this is generous).
    pub jacobi_max_sweeps: usize,
    /// Spectral radius: maximum number of repeated squarings.
    pub gelfand_max_squarings: usize,
    /// Spectral radius: early-stop relative change between estimates.
    pub gelfand_rel_change: f64,
    /// Riccati value iteration: relative-change stopping threshold.
    pub are_rel_change: f64,
    /// Riccati value iteration: iteration cap.
    pub are_max_iter: usize,
    /// Riccati value iteration: divergence guard on the max-norm of P.
    pub are_divergence_norm: f64,
    /// Discount-threshold bisection: lower bracket for the discount.
    pub gamma_lower_bracket: f64,
    /// Stability probe margin: stable means spectral radius < 1 - this.
    pub stability_margin: f64,
    /// LMI feasibility: residual target (strict "<= 0" with this margin).
    pub lmi_residual_tol: f64,
    /// LMI solver: diagonal shift in the S = L Lt + shift*I parameterization.
    pub lmi_psd_shift: f64,
    /// Step-weight sum slack: sum(sigma) >= M - this.
    pub weight_sum_slack: f64,
    /// Equality margin for the scaled-softmax weight normalization.
    pub softmax_sum_tol: f64,
}

/// Library-wide default tolerances.
pub const DEFAULT: NumericConfig = NumericConfig {
    sym_rel: 1e-12,
    jacobi_off_rel: 1e-12,
    jacobi_max_sweeps: 100,
    gelfand_max_squarings: 60,
    gelfand_rel_change: 1e-9,
    are_rel_change: 1e-12,
    are_max_iter: 1_000_000,
    are_divergence_norm: 1e14,
    gamma_lower_bracket: 1e-4,
    stability_margin: 1e-9,
    lmi_residual_tol: 1e-7,
    lmi_psd_shift: 1e-8,
    weight_sum_slack: 1e-12,
    softmax_sum_tol: 1e-9,
};

impl Default for NumericConfig {
    fn default() -> Self {
        DEFAULT
    }
}
