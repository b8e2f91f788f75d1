//! Sampling-based verification, gradient-ascent falsification, and
//! Monte-Carlo region volume.
//!
//! Everything here is *statistical* evidence: a passing report means no
//! violation was found at the sampled states, not a proof over the
//! continuum. Reports therefore carry the exact sample counts so callers
//! can label results accordingly.

use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{rollout, ClosedLoopEnv, DynError, OpenLoopEnv, Policy};
use crate::glf::{
    eval_practical_v, practical_v_on_tape, residual_f, GeneralizedCertificate, GlfError, ValueFn,
    WeightFn,
};
use crate::net::{NodeId, Tape};
use crate::rng::Rng;

/// Errors produced by verification and falsification.
#[derive(Debug, Error)]
pub enum VerifyError {
    /// An invalid argument.
    #[error("invalid verification input: {0}")]
    InvalidInput(String),
    /// Certificate evaluation failed.
    #[error(transparent)]
    Glf(#[from] GlfError),
    /// Simulation failed.
    #[error(transparent)]
    Dyn(#[from] DynError),
}

/// A state at which the certificate condition fails, together with the
/// residual and candidate values observed there.
#[derive(Debug, Clone, Serialize)]
pub struct Counterexample {
    /// The violating state.
    pub state: Vec<f64>,
    /// Averaged decrease defect `F` at the state (positive = violation).
    pub f_value: f64,
    /// Candidate value `V` at the state.
    pub v_value: f64,
}

/// Maximum number of counterexamples retained in a report; the pass
/// fraction always reflects every checked sample.
pub const MAX_RECORDED_COUNTEREXAMPLES: usize = 100;

/// Outcome of a sampling-based check.
#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    /// Number of sampled states that were checked.
    pub samples_checked: usize,
    /// Exactly `passing / samples_checked`; defined as 1.0 for an empty
    /// check (vacuous pass).
    pub pass_fraction: f64,
    /// Up to [`MAX_RECORDED_COUNTEREXAMPLES`] violating states.
    pub counterexamples: Vec<Counterexample>,
    /// Level used for the region disjunct (`+inf` disables it).
    pub rho: f64,
    /// Monte-Carlo volume of the certified sublevel set, when computed.
    pub roa_volume: Option<f64>,
    /// Standard error of the volume estimate, when computed.
    pub roa_volume_stderr: Option<f64>,
}

/// Samples a state uniformly from the domain, excluding the open ball
/// of radius `delta` around the origin by rejection.
fn sample_outside_ball(env: &OpenLoopEnv, delta: f64, rng: &mut Rng) -> Result<Vec<f64>, VerifyError> {
    for _ in 0..10_000 {
        let x = env.sample_state(rng);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= delta {
            return Ok(x);
        }
    }
    Err(VerifyError::InvalidInput(format!(
        "could not sample outside the delta ball (delta = {delta}) within the domain"
    )))
}

/// Checks the certificate condition at `n_samples` states drawn
/// uniformly from the domain minus the `delta`-ball around the origin.
///
/// A state passes when either the averaged decrease holds with the whole
/// `M`-step rollout inside the domain, or the state lies outside the
/// certified region (`V >= rho`). Passing `rho = +inf` disables the
/// region disjunct so every sampled state must exhibit the decrease.
pub fn verify_sampled(
    cert: &GeneralizedCertificate,
    cl: &ClosedLoopEnv,
    rho: f64,
    n_samples: usize,
    seed: u64,
) -> Result<VerificationReport, VerifyError> {
    cert.validate()?;
    if rho.is_nan() {
        return Err(VerifyError::InvalidInput("rho must not be NaN".to_string()));
    }
    let mut rng = Rng::new(seed).split(0x5645_5249);
    let mut passing = 0usize;
    let mut counterexamples = Vec::new();
    for _ in 0..n_samples {
        let x = sample_outside_ball(&cl.env, cert.delta, &mut rng)?;
        let v0 = eval_practical_v(cert, &x)?;
        if v0 >= rho {
            passing += 1;
            continue;
        }
        let (traj, exits) = rollout(cl, &x, cert.m)?;
        let stays_inside = exits.iter().all(|&e| !e);
        let f = residual_f(cert, &traj)?;
        if f <= 0.0 && stays_inside {
            passing += 1;
        } else if counterexamples.len() < MAX_RECORDED_COUNTEREXAMPLES {
            counterexamples.push(Counterexample { state: x, f_value: f, v_value: v0 });
        }
    }
    let pass_fraction =
        if n_samples == 0 { 1.0 } else { passing as f64 / n_samples as f64 };
    Ok(VerificationReport {
        samples_checked: n_samples,
        pass_fraction,
        counterexamples,
        rho,
        roa_volume: None,
        roa_volume_stderr: None,
    })
}

/// Frozen parameter buffers of a certificate/policy pair, cloned so a
/// tape can borrow them while gradients flow back to the *state* leaf.
pub(crate) struct FrozenParams {
    policy: Option<Vec<f64>>,
    base: Option<Vec<f64>>,
    residual: Option<Vec<f64>>,
    weight: Option<Vec<f64>>,
}

impl FrozenParams {
    pub(crate) fn collect(cert: &GeneralizedCertificate, policy: &Policy) -> Self {
        let grab = |f: &ValueFn| f.params().map(|p| p.to_vec());
        Self {
            policy: match policy {
                Policy::Net { net } => Some(net.params().to_vec()),
                _ => None,
            },
            base: grab(&cert.base_value),
            residual: grab(&cert.residual_fn),
            weight: match &cert.weight_fn {
                WeightFn::Net(net) | WeightFn::FloorNet { net, .. } => Some(net.params().to_vec()),
                WeightFn::Constant(_) => None,
            },
        }
    }

    pub(crate) fn register<'a>(
        &'a self,
        tape: &mut Tape<'a>,
    ) -> (Option<usize>, Option<usize>, Option<usize>, Option<usize>) {
        let mut reg = |p: &'a Option<Vec<f64>>| p.as_ref().map(|v| tape.add_source(v));
        (reg(&self.policy), reg(&self.base), reg(&self.residual), reg(&self.weight))
    }
}

/// Records the weight function on a tape.
fn weights_on_tape(
    weight_fn: &WeightFn,
    tape: &mut Tape<'_>,
    x0: NodeId,
    src: Option<usize>,
) -> NodeId {
    match weight_fn {
        WeightFn::Constant(w) => tape.leaf(w.sigma()),
        WeightFn::Net(net) => {
            let s = src.expect("weight network source");
            net.forward_on_tape(tape, x0, s)
        }
        WeightFn::FloorNet { net, floor } => {
            let s = src.expect("weight network source");
            let body = net.body_on_tape(tape, x0, s);
            let hinged = tape.hinge(body);
            let floors = vec![*floor; net.output_width()];
            tape.add_const(hinged, &floors)
        }
    }
}

/// Records the averaged decrease defect `F` at `x0` on a tape, rolling
/// the closed loop out for `M` steps. Returns `(F, V(x0))` node ids.
pub(crate) fn residual_on_tape(
    cert: &GeneralizedCertificate,
    cl: &ClosedLoopEnv,
    tape: &mut Tape<'_>,
    x0: NodeId,
    policy_src: Option<usize>,
    base_src: Option<usize>,
    res_src: Option<usize>,
    weight_src: Option<usize>,
) -> (NodeId, NodeId) {
    let (states, _) = cl.rollout_on_tape(tape, x0, cert.m, policy_src);
    let zero = tape.leaf(&vec![0.0; cl.env.state_dim()]);
    let v0 = practical_v_on_tape(cert, tape, states[0], zero, base_src, res_src);
    let vs: Vec<NodeId> = (1..=cert.m)
        .map(|i| practical_v_on_tape(cert, tape, states[i], zero, base_src, res_src))
        .collect();
    let stacked = tape.concat(&vs);
    let sigma = weights_on_tape(&cert.weight_fn, tape, x0, weight_src);
    let weighted = tape.dot(sigma, stacked);
    let avg = tape.scale(weighted, 1.0 / cert.m as f64);
    let scaled_v0 = tape.scale(v0, 1.0 - cert.alpha_bar);
    let f = tape.sub(avg, scaled_v0);
    (f, v0)
}

/// Searches for certificate violations by projected gradient ascent on
/// the decrease defect `F` inside the region `{V <= rho}`, restarting
/// from `restarts` random states. `step_size` scales per-coordinate
/// steps by the domain's box widths. Returned counterexamples re-check:
/// simulating from each returned state reproduces `F > 0` with
/// `V <= rho`. Zero restarts return an empty list.
pub fn pgd_falsify(
    cert: &GeneralizedCertificate,
    cl: &ClosedLoopEnv,
    rho: f64,
    steps: usize,
    step_size: f64,
    restarts: usize,
    seed: u64,
) -> Result<Vec<Counterexample>, VerifyError> {
    cert.validate()?;
    if !(step_size > 0.0) {
        return Err(VerifyError::InvalidInput(format!(
            "step size must be positive, got {step_size}"
        )));
    }
    let mut rng = Rng::new(seed).split(0x5047_4441);
    let frozen = FrozenParams::collect(cert, &cl.policy);
    let (lo, hi) = cl.env.domain();
    let widths: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| h - l).collect();
    let guard = cert.delta.max(1e-6);
    let mut found = Vec::new();

    for _ in 0..restarts {
        let mut x = sample_outside_ball(&cl.env, cert.delta, &mut rng)?;
        let mut best: Option<Counterexample> = None;
        for _ in 0..=steps {
            let mut tape = Tape::new();
            let (p_src, b_src, r_src, w_src) = frozen.register(&mut tape);
            let xn = tape.leaf(&x);
            let (f_node, v_node) =
                residual_on_tape(cert, cl, &mut tape, xn, p_src, b_src, r_src, w_src);
            let f = tape.value(f_node)[0];
            let v = tape.value(v_node)[0];
            let norm = x.iter().map(|c| c * c).sum::<f64>().sqrt();
            if f > 0.0 && v <= rho && norm > guard {
                let better = best.as_ref().map_or(true, |b| f > b.f_value);
                if better {
                    best = Some(Counterexample { state: x.clone(), f_value: f, v_value: v });
                }
            }
            tape.backward(f_node);
            let grad = tape.grad_of(xn).to_vec();
            for i in 0..x.len() {
                x[i] = (x[i] + step_size * widths[i] * grad[i]).clamp(lo[i], hi[i]);
            }
        }
        if let Some(ce) = best {
            found.push(ce);
        }
    }
    // Strongest violations first.
    found.sort_by(|a, b| b.f_value.partial_cmp(&a.f_value).expect("finite residuals"));
    Ok(found)
}

/// How candidate states for the region-growing loss are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionMode {
    /// Uniform domain samples with values closest to the level `rho`.
    BoundarySample,
    /// Gradient descent on `V` from states outside the region, yielding
    /// the near-boundary states easiest to pull inside.
    PgdMinV,
}

/// Produces `n` candidate states near the boundary of `{V = rho}` used
/// to grow the certified region during synthesis.
pub fn region_candidates(
    cert: &GeneralizedCertificate,
    env: &OpenLoopEnv,
    rho: f64,
    n: usize,
    mode: RegionMode,
    seed: u64,
) -> Result<Vec<Vec<f64>>, VerifyError> {
    cert.validate()?;
    let mut rng = Rng::new(seed).split(0x5247_434E);
    match mode {
        RegionMode::BoundarySample => {
            // Oversample, keep the n states whose value is nearest rho.
            let pool = (8 * n).max(64);
            let mut scored: Vec<(f64, Vec<f64>)> = Vec::with_capacity(pool);
            for _ in 0..pool {
                let x = env.sample_state(&mut rng);
                let v = eval_practical_v(cert, &x)?;
                scored.push(((v - rho).abs(), x));
            }
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite values"));
            Ok(scored.into_iter().take(n).map(|(_, x)| x).collect())
        }
        RegionMode::PgdMinV => {
            let frozen = FrozenParams::collect(cert, &Policy::Zero);
            let (lo, hi) = env.domain();
            let widths: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| h - l).collect();
            let mut out = Vec::with_capacity(n);
            let zero_state = vec![0.0; env.state_dim()];
            for _ in 0..n {
                let mut x = env.sample_state(&mut rng);
                for _ in 0..20 {
                    let v = eval_practical_v(cert, &x)?;
                    if v <= rho {
                        break;
                    }
                    let mut tape = Tape::new();
                    let (_, b_src, r_src, _) = frozen.register(&mut tape);
                    let xn = tape.leaf(&x);
                    let zn = tape.leaf(&zero_state);
                    let vn = practical_v_on_tape(cert, &mut tape, xn, zn, b_src, r_src);
                    tape.backward(vn);
                    let grad = tape.grad_of(xn).to_vec();
                    for i in 0..x.len() {
                        x[i] = (x[i] - 0.05 * widths[i] * grad[i]).clamp(lo[i], hi[i]);
                    }
                }
                out.push(x);
            }
            Ok(out)
        }
    }
}

/// Monte-Carlo volume of `{V <= rho}` within the axis-aligned box
/// `(lo, hi)`: returns `(volume, standard error)` where the volume is
/// the box volume times the hit fraction `p` and the standard error is
/// `box_volume * sqrt(p (1 - p) / n)`.
pub fn roa_volume(
    cert: &GeneralizedCertificate,
    rho: f64,
    lo: &[f64],
    hi: &[f64],
    n: usize,
    seed: u64,
) -> Result<(f64, f64), VerifyError> {
    if lo.len() != hi.len() || lo.is_empty() {
        return Err(VerifyError::InvalidInput("volume box must be non-degenerate".to_string()));
    }
    if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
        return Err(VerifyError::InvalidInput(
            "volume box must have positive side lengths".to_string(),
        ));
    }
    if n == 0 {
        return Err(VerifyError::InvalidInput("volume estimation needs samples".to_string()));
    }
    let box_volume: f64 = lo.iter().zip(hi).map(|(l, h)| h - l).product();
    let mut rng = Rng::new(seed).split(0x524F_4156);
    let mut hits = 0usize;
    for _ in 0..n {
        let x: Vec<f64> = lo.iter().zip(hi).map(|(&l, &h)| rng.range(l, h)).collect();
        if eval_practical_v(cert, &x)? <= rho {
            hits += 1;
        }
    }
    let p = hits as f64 / n as f64;
    Ok((box_volume * p, box_volume * (p * (1.0 - p) / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmi::StepWeights;
    use crate::lqr::{solve_discounted_are, LinearSystem};
    use crate::matlib::Matrix;

    fn quadratic_cert(dim: usize, m: usize, alpha_bar: f64) -> GeneralizedCertificate {
        GeneralizedCertificate {
            base_value: ValueFn::Quadratic(Matrix::identity(dim)),
            residual_fn: ValueFn::Zero,
            weight_fn: WeightFn::Constant(
                StepWeights::classical(m),
            ),
            alpha_bar,
            beta: 0.0,
            delta: 0.0,
            m,
        }
    }

    fn example_loop(gamma: f64) -> ClosedLoopEnv {
        let sys = LinearSystem::scalar(2.0, 1.0, 1.0, 1.0).expect("system");
        let sol = solve_discounted_are(&sys, gamma).expect("solution");
        ClosedLoopEnv::new(OpenLoopEnv::linear(sys), Policy::Linear { k: sol.k })
    }

    #[test]
    fn contractive_linear_loop_passes_the_decrease_check_everywhere() {
        let cert = quadratic_cert(1, 1, 0.0);
        let cl = example_loop(0.7);
        let report = verify_sampled(&cert, &cl, f64::INFINITY, 2_000, 3).expect("verify");
        assert_eq!(report.samples_checked, 2_000);
        assert_eq!(report.pass_fraction, 1.0, "counterexamples: {:?}", report.counterexamples);
    }

    #[test]
    fn vacuous_constant_certificate_passes_via_the_region_disjunct() {
        let cert = GeneralizedCertificate {
            base_value: ValueFn::Constant(1.0),
            residual_fn: ValueFn::Zero,
            weight_fn: WeightFn::Constant(StepWeights::one_step()),
            alpha_bar: 0.0,
            beta: 0.0,
            delta: 0.0,
            m: 1,
        };
        let cl = example_loop(0.7);
        let report = verify_sampled(&cert, &cl, 0.5, 500, 9).expect("verify");
        assert_eq!(report.pass_fraction, 1.0);
    }

    #[test]
    fn empty_check_is_a_vacuous_pass() {
        let cert = quadratic_cert(1, 1, 0.0);
        let cl = example_loop(0.7);
        let report = verify_sampled(&cert, &cl, f64::INFINITY, 0, 1).expect("verify");
        assert_eq!(report.samples_checked, 0);
        assert_eq!(report.pass_fraction, 1.0);
    }

    #[test]
    fn pgd_finds_and_recorded_counterexamples_recheck() {
        // An expanding loop under a "certificate" that claims decrease:
        // x' = 1.2 x with V = x^2, so F = (1.44 - 1) x^2 > 0 away from 0.
        let sys = LinearSystem::scalar(1.2, 0.0, 1.0, 1.0).expect("system");
        let cl = ClosedLoopEnv::new(
            OpenLoopEnv::linear(sys),
            Policy::Linear { k: Matrix::zeros(1, 1) },
        );
        let cert = quadratic_cert(1, 1, 0.0);
        let found = pgd_falsify(&cert, &cl, f64::INFINITY, 25, 0.01, 10, 7).expect("pgd");
        assert!(!found.is_empty(), "ascent should find violations of a false claim");
        for ce in &found {
            let (traj, _) = rollout(&cl, &ce.state, cert.m).expect("rollout");
            let f = residual_f(&cert, &traj).expect("residual");
            assert!((f - ce.f_value).abs() < 1e-12, "recheck mismatch: {f} vs {}", ce.f_value);
            assert!(f > 0.0);
        }
        // Violations grow with |x|; ascent should push toward the box edge.
        assert!(found[0].state[0].abs() > 3.0, "ascent barely moved: {:?}", found[0].state);

        let none = pgd_falsify(&cert, &cl, f64::INFINITY, 25, 0.01, 0, 7).expect("pgd");
        assert!(none.is_empty(), "zero restarts return nothing");
    }

    #[test]
    fn pgd_respects_the_level_constraint() {
        let sys = LinearSystem::scalar(1.2, 0.0, 1.0, 1.0).expect("system");
        let cl = ClosedLoopEnv::new(
            OpenLoopEnv::linear(sys),
            Policy::Linear { k: Matrix::zeros(1, 1) },
        );
        let cert = quadratic_cert(1, 1, 0.0);
        // Only states with V = x^2 <= 1 qualify as counterexamples.
        let found = pgd_falsify(&cert, &cl, 1.0, 50, 0.01, 20, 11).expect("pgd");
        for ce in &found {
            assert!(ce.v_value <= 1.0, "counterexample outside the level set: {ce:?}");
        }
    }

    #[test]
    fn unit_disc_volume_matches_pi() {
        let cert = quadratic_cert(2, 1, 0.0);
        let (vol, stderr) = roa_volume(&cert, 1.0, &[-1.0, -1.0], &[1.0, 1.0], 200_000, 5)
            .expect("volume");
        assert!(stderr < 0.01);
        assert!(
            (vol - std::f64::consts::PI).abs() < 0.02 * std::f64::consts::PI,
            "volume {vol} is not pi within 2%"
        );
    }

    #[test]
    fn volume_is_monotone_in_the_level_and_deterministic_in_the_seed() {
        let cert = quadratic_cert(2, 1, 0.0);
        let lo = [-1.0, -1.0];
        let hi = [1.0, 1.0];
        let (v1, _) = roa_volume(&cert, 0.25, &lo, &hi, 20_000, 42).expect("volume");
        let (v2, _) = roa_volume(&cert, 0.5, &lo, &hi, 20_000, 42).expect("volume");
        let (v3, _) = roa_volume(&cert, 1.0, &lo, &hi, 20_000, 42).expect("volume");
        assert!(v1 <= v2 && v2 <= v3, "not monotone: {v1}, {v2}, {v3}");
        let (v2_again, se) = roa_volume(&cert, 0.5, &lo, &hi, 20_000, 42).expect("volume");
        assert_eq!(v2, v2_again);
        assert!(se > 0.0);
    }

    #[test]
    fn region_candidates_cluster_near_the_requested_level() {
        let cert = quadratic_cert(1, 1, 0.0);
        let env = OpenLoopEnv::linear(LinearSystem::scalar(2.0, 1.0, 1.0, 1.0).expect("system"));
        for mode in [RegionMode::BoundarySample, RegionMode::PgdMinV] {
            let cands = region_candidates(&cert, &env, 1.0, 40, mode, 13).expect("candidates");
            assert_eq!(cands.len(), 40);
            let mean_gap: f64 = cands
                .iter()
                .map(|x| (eval_practical_v(&cert, x).expect("eval") - 1.0).abs())
                .sum::<f64>()
                / cands.len() as f64;
            // Uniform samples over [-5, 5] would sit at E|x^2 - 1| ~ 7.3;
            // candidates should be far closer to the level set.
            assert!(mean_gap < 2.0, "{mode:?}: mean gap {mean_gap}");
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let cert = quadratic_cert(1, 1, 0.0);
        let cl = example_loop(0.7);
        assert!(verify_sampled(&cert, &cl, f64::NAN, 10, 0).is_err());
        assert!(pgd_falsify(&cert, &cl, 1.0, 10, 0.0, 5, 0).is_err());
        assert!(roa_volume(&cert, 1.0, &[0.0], &[0.0], 10, 0).is_err());
        assert!(roa_volume(&cert, 1.0, &[-1.0], &[1.0], 0, 0).is_err());
    }
}
