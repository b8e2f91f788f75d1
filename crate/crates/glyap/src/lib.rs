//! # glyap
//!
//! Stability certification of discrete-time control policies via
//! *generalized Lyapunov functions*: candidates that satisfy a weighted
//! multi-step average-decrease condition instead of the classical
//! per-step decrease, tolerating transient increases along trajectories.
//!
//! The crate provides three certification paths built on shared machinery:
//!
//! 1. **Exact LMI certificates for discounted LQR** ([`lqr`], [`lmi`]):
//!    solve the discounted algebraic Riccati equation, assemble one-step
//!    and multi-step LMI blocks, decide feasibility at a candidate
//!    discount factor, and compute certified discount lower bounds with
//!    search over the step weights.
//! 2. **Neural residual certificates for fixed policies** ([`glf`],
//!    [`net`]): augment a policy's value function with a trained residual
//!    network and a state-dependent step-weight head, then check the
//!    generalized decrease condition on dense samples.
//! 3. **Joint controller/certificate synthesis** ([`net`],
//!    [`synthverify`]): train a feedback controller together with a
//!    Lyapunov candidate and a sublevel-set region-of-attraction
//!    estimate, alternating loss minimization with projected-gradient
//!    falsification.
//!
//! Supporting modules: [`matlib`] (small dense linear algebra),
//! [`dynamics`] (benchmark environments and rollout machinery),
//! [`rng`] (splittable counter-based random streams for bit-reproducible
//! experiments), [`tol`] (centralized numeric tolerances), and [`cli`]
//! (the command implementations behind the `glyap` binary).
//!
//! All results produced by sampling are *sampling-verified*: checked on
//! dense random samples plus adversarial (projected-gradient) search,
//! as distinct from sound formal verification.

pub mod cli;
pub mod dynamics;
pub mod glf;
pub mod lmi;
pub mod lqr;
pub mod matlib;
pub mod net;
pub mod rng;
pub mod synthverify;
pub mod tol;
