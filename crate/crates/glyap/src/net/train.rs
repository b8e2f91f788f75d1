//! Training configuration, the gradient entry point, and the two
//! training loops: certificate fitting for a fixed policy and joint
//! controller–certificate synthesis.
//!
//! Both loops use Adam with reduce-on-plateau scheduling and global-norm
//! gradient clipping, and both are bit-deterministic given the same
//! configuration and data. Loss terms are batch *means* (the coefficient
//! defaults are calibrated to that convention), so results are invariant
//! to dataset size at fixed coefficients.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dynamics::{estimate_value, rollout, ClosedLoopEnv, OpenLoopEnv, Policy};
use crate::glf::{eval_practical_v, residual_f, GeneralizedCertificate, Trajectory, ValueFn, WeightFn};
use crate::lmi::StepWeights;
use crate::matlib::Matrix;
use crate::net::optim::{clip_global_norm, Adam, PlateauScheduler};
use crate::net::tape::{LossExpr, NodeId, Tape};
use crate::net::{Head, Mlp, NetError};
use crate::rng::Rng;
use crate::synthverify::{pgd_falsify, region_candidates, RegionMode};

/// Hyper-parameters shared by the training loops.
///
/// Defaults follow the experimental setup: Adam at `5e-4` with a
/// reduce-on-plateau schedule (factor `0.5`, patience `500`), batches of
/// 256, 1000 epochs, and gradient clipping at global norm `5.0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Initial Adam learning rate.
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay on plateau.
    pub plateau_factor: f64,
    /// Epochs without improvement before the rate decays.
    pub plateau_patience: usize,
    /// Minibatch size.
    pub batch_size: usize,
    /// Number of passes over the dataset.
    pub epochs: usize,
    /// Global-norm gradient clip threshold.
    pub grad_clip: f64,
    /// Required average decrease margin in the certificate condition.
    pub alpha_bar: f64,
    /// Coefficient of the positive-definite quadratic term in the
    /// practical certificate.
    pub beta: f64,
    /// Radius of the ball around the origin excluded from the decrease
    /// condition.
    pub delta: f64,
    /// Averaging window length.
    #[serde(rename = "M")]
    pub m: usize,
    /// Seed for initialization, shuffling, and sampling.
    pub seed: u64,
    /// Weight of the domain-violation penalty inside the synthesis loss.
    pub c0: f64,
    /// Weight of the region-growing loss term.
    pub c1: f64,
    /// Weight of the sparsity (L1) regularizer on controller and
    /// certificate parameters.
    pub c2: f64,
    /// Target level of the certified sublevel set.
    pub rho: f64,
    /// Lower bound kept on step weights in floor-constrained mode.
    pub sigma_floor: f64,
    /// Hidden-layer widths of the trainable residual and weight
    /// networks in certificate training.
    pub hidden_widths: Vec<usize>,
    /// Number of base states sampled for the synthesis dataset.
    pub dataset_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            plateau_factor: 0.5,
            plateau_patience: 500,
            batch_size: 256,
            epochs: 1000,
            grad_clip: 5.0,
            alpha_bar: 0.02,
            beta: 0.01,
            delta: 0.05,
            m: 1,
            seed: 0,
            c0: 100.0,
            c1: 1.0,
            c2: 1e-4,
            rho: 1.0,
            sigma_floor: 0.1,
            hidden_widths: vec![64, 64, 64],
            dataset_size: 5000,
        }
    }
}

impl TrainConfig {
    /// Checks every field for its admissible range.
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |msg: String| Err(NetError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad(format!("plateau_factor must lie in (0, 1], got {}", self.plateau_factor));
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".to_string());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(self.alpha_bar >= 0.0 && self.alpha_bar < 1.0) {
            return bad(format!("alpha_bar must lie in [0, 1), got {}", self.alpha_bar));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be non-negative, got {}", self.delta));
        }
        if self.m == 0 {
            return bad("window length M must be at least 1".to_string());
        }
        for (name, v) in [("c0", self.c0), ("c1", self.c1), ("c2", self.c2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return bad(format!("sigma_floor must be positive, got {}", self.sigma_floor));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return bad("hidden_widths must all be positive".to_string());
        }
        if self.dataset_size == 0 {
            return bad("dataset_size must be at least 1".to_string());
        }
        Ok(())
    }
}

/// One row of the training history: epoch index, mean epoch loss, and
/// the learning rate in effect during that epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStat {
    /// Epoch index (0-based).
    pub epoch: usize,
    /// Mean loss over the epoch's batches.
    pub loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

/// Evaluates a composed scalar loss over a batch and returns the batch
/// mean together with the exact reverse-mode gradient with respect to
/// the network parameters.
///
/// The loss is `mean_i expr(net(x_i))`. An empty batch yields loss 0 and
/// a zero gradient. Errors: [`NetError::WidthMismatch`] if an input does
/// not match the network, [`NetError::UnsupportedPrimitive`] if the
/// expression is ill-typed (non-scalar root, width mismatches, `Min`
/// over vectors).
pub fn grad_params(
    net: &Mlp,
    loss: &LossExpr,
    inputs: &[Vec<f64>],
) -> Result<(f64, Vec<f64>), NetError> {
    if inputs.is_empty() {
        return Ok((0.0, vec![0.0; net.params().len()]));
    }
    for x in inputs {
        if x.len() != net.input_width() {
            return Err(NetError::WidthMismatch { expected: net.input_width(), got: x.len() });
        }
    }
    let params = net.params().to_vec();
    let mut tape = Tape::new();
    let src = tape.add_source(&params);
    let mut per_sample = Vec::with_capacity(inputs.len());
    for x in inputs {
        let xn = tape.leaf(x);
        let out = net.forward_on_tape(&mut tape, xn, src);
        let l = loss.build(&mut tape, out)?;
        if tape.value(l).len() != 1 {
            return Err(NetError::UnsupportedPrimitive(format!(
                "loss root must be scalar, got width {}",
                tape.value(l).len()
            )));
        }
        per_sample.push(l);
    }
    let stacked = tape.concat(&per_sample);
    let total = tape.sum(stacked);
    let mean = tape.scale(total, 1.0 / inputs.len() as f64);
    let value = tape.value(mean)[0];
    tape.backward(mean);
    Ok((value, tape.source_grads[src].clone()))
}

/// A certificate produced by [`train_certificate`] together with its
/// training history.
#[derive(Debug, Clone)]
pub struct TrainedCertificate {
    /// The fitted certificate (trained residual and weight networks).
    pub certificate: GeneralizedCertificate,
    /// Per-epoch loss and learning rate.
    pub history: Vec<EpochStat>,
}

/// Training loss reaching exactly this value stops the epoch loop: the
/// hinge objective's global minimum is zero, so there is nothing left
/// to optimize.
const CONVERGED_LOSS: f64 = 0.0;

/// Records `V(x) = shared_constant + |phi(x) - phi_at_zero| + beta |x|^2`
/// where `phi_at_zero` is a node shared across the whole batch.
fn centered_v_node(
    tape: &mut Tape<'_>,
    phi: &Mlp,
    phi_src: usize,
    phi_at_zero: NodeId,
    x: &[f64],
    constant: f64,
    beta: f64,
) -> NodeId {
    let xn = tape.leaf(x);
    let px = phi.forward_on_tape(tape, xn, phi_src);
    let diff = tape.sub(px, phi_at_zero);
    let abs = tape.abs(diff);
    let quad: f64 = x.iter().map(|v| v * v).sum();
    tape.add_const(abs, &[constant + beta * quad])
}

/// Fits a certificate for a fixed closed-loop policy by minimizing the
/// empirical hinge loss `mean_i hinge(F(x_0^{(i)}))` over pre-rolled
/// trajectories.
///
/// The candidate is `V(x) = |J(x) - J(0)| + |phi(x) - phi(0)| +
/// beta |x|^2` with `J` the frozen `base_value`, `phi` a trainable
/// scalar network, and the per-state weights produced by a trainable
/// network with a normalized positive head. Both trainable networks use
/// `cfg.hidden_widths` and are initialized from `cfg.seed`.
///
/// Each trajectory must carry at least `M + 1` states; only the first
/// window is used. An empty dataset returns the freshly initialized
/// certificate untouched with a single zero-loss history row. Training
/// stops early once an epoch reaches exactly zero loss. A non-finite
/// batch loss aborts with [`NetError::NonFiniteLoss`].
pub fn train_certificate(
    cl: &ClosedLoopEnv,
    base_value: &ValueFn,
    cfg: &TrainConfig,
    data: &[Trajectory],
) -> Result<TrainedCertificate, NetError> {
    cfg.validate()?;
    let n = cl.env.state_dim();
    let mut widths = vec![n];
    widths.extend_from_slice(&cfg.hidden_widths);
    widths.push(1);
    let mut phi = Mlp::new(&widths, Head::Scalar)?;
    *widths.last_mut().expect("non-empty") = cfg.m;
    let mut sigma = Mlp::new(&widths, Head::SoftmaxScaled)?;
    let root = Rng::new(cfg.seed).split(0x4345_5254);
    phi.init_kaiming(&mut root.split(1));
    sigma.init_kaiming(&mut root.split(2));

    // Frozen contribution of the base value and the quadratic term,
    // evaluated once per state: |J(x) - J(0)| + beta |x|^2 is constant
    // during training, so it enters the tape as a per-state constant.
    let probe = GeneralizedCertificate {
        base_value: base_value.clone(),
        residual_fn: ValueFn::Zero,
        weight_fn: WeightFn::Constant(StepWeights::one_step()),
        alpha_bar: cfg.alpha_bar,
        beta: 0.0,
        delta: cfg.delta,
        m: 1,
    };
    let mut constants = Vec::with_capacity(data.len());
    for (i, traj) in data.iter().enumerate() {
        if traj.states.len() < cfg.m + 1 {
            return Err(NetError::InvalidConfig(format!(
                "trajectory {i} has {} states but the window needs {}",
                traj.states.len(),
                cfg.m + 1
            )));
        }
        let mut c = Vec::with_capacity(cfg.m + 1);
        for x in &traj.states[..=cfg.m] {
            let v = crate::glf::eval_practical_v(&probe, x)
                .map_err(|e| NetError::InvalidConfig(format!("base value evaluation: {e}")))?;
            c.push(v);
        }
        constants.push(c);
    }

    let mut scheduler =
        PlateauScheduler::new(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience);
    let mut adam_phi = Adam::new(phi.params().len());
    let mut adam_sigma = Adam::new(sigma.params().len());
    let mut shuffle_rng = root.split(3);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    let zero_state = vec![0.0; n];

    if data.is_empty() {
        history.push(EpochStat { epoch: 0, loss: 0.0, lr: scheduler.lr() });
    }
    for epoch in 0..cfg.epochs {
        if data.is_empty() {
            break;
        }
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss_val, mut g_phi, mut g_sigma) = {
                let phi_snap = phi.params().to_vec();
                let sigma_snap = sigma.params().to_vec();
                let mut tape = Tape::new();
                let phi_src = tape.add_source(&phi_snap);
                let sigma_src = tape.add_source(&sigma_snap);
                let zero_leaf = tape.leaf(&zero_state);
                let phi0 = phi.forward_on_tape(&mut tape, zero_leaf, phi_src);
                let mut hinges = Vec::with_capacity(chunk.len());
                for &ti in chunk {
                    let traj = &data[ti];
                    let v_nodes: Vec<NodeId> = (0..=cfg.m)
                        .map(|k| {
                            centered_v_node(
                                &mut tape,
                                &phi,
                                phi_src,
                                phi0,
                                &traj.states[k],
                                constants[ti][k],
                                cfg.beta,
                            )
                        })
                        .collect();
                    let x0 = tape.leaf(&traj.states[0]);
                    let sig = sigma.forward_on_tape(&mut tape, x0, sigma_src);
                    let tail = tape.concat(&v_nodes[1..]);
                    let weighted = tape.dot(sig, tail);
                    let avg = tape.scale(weighted, 1.0 / cfg.m as f64);
                    let v0 = tape.scale(v_nodes[0], 1.0 - cfg.alpha_bar);
                    let f = tape.sub(avg, v0);
                    hinges.push(tape.hinge(f));
                }
                let stacked = tape.concat(&hinges);
                let sum = tape.sum(stacked);
                let mean = tape.scale(sum, 1.0 / chunk.len() as f64);
                let loss_val = tape.value(mean)[0];
                tape.backward(mean);
                (
                    loss_val,
                    tape.source_grads[phi_src].clone(),
                    tape.source_grads[sigma_src].clone(),
                )
            };
            if !loss_val.is_finite() {
                return Err(NetError::NonFiniteLoss { epoch, loss: loss_val });
            }
            clip_global_norm(&mut [&mut g_phi, &mut g_sigma], cfg.grad_clip);
            adam_phi.step(phi.params_mut(), &g_phi, scheduler.lr());
            adam_sigma.step(sigma.params_mut(), &g_sigma, scheduler.lr());
            total += loss_val * chunk.len() as f64;
        }
        let epoch_loss = total / data.len() as f64;
        history.push(EpochStat { epoch, loss: epoch_loss, lr: scheduler.lr() });
        scheduler.observe(epoch_loss);
        if epoch_loss <= CONVERGED_LOSS {
            break;
        }
    }

    Ok(TrainedCertificate {
        certificate: GeneralizedCertificate {
            base_value: base_value.clone(),
            residual_fn: ValueFn::Net(phi),
            weight_fn: WeightFn::Net(sigma),
            alpha_bar: cfg.alpha_bar,
            beta: cfg.beta,
            delta: cfg.delta,
            m: cfg.m,
        },
        history,
    })
}

/// Hyper-parameters of the discounted-cost regression in
/// [`fit_discounted_value`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Number of uniformly sampled training states.
    pub states: usize,
    /// Hidden-layer widths of the regression network.
    pub hidden_widths: Vec<usize>,
    /// Passes over the sampled states.
    pub epochs: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Minibatch size.
    pub batch_size: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            states: 2000,
            hidden_widths: vec![32, 32],
            epochs: 300,
            learning_rate: 1e-3,
            batch_size: 128,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<(), NetError> {
        let bad = |msg: String| Err(NetError::InvalidConfig(msg));
        if self.states == 0 {
            return bad("states must be at least 1".to_string());
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return bad("hidden_widths must all be positive".to_string());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }
}

/// Fits a small regression network to the truncated discounted cost of
/// the closed loop over uniformly sampled domain states: the stand-in
/// for a pre-trained value estimator when none is supplied from a file.
///
/// Targets come from [`estimate_value`] and are normalized by their
/// largest magnitude before fitting; the returned [`ValueFn::ScaledNet`]
/// restores the original cost scale. The mean squared error is
/// minimized with Adam under reduce-on-plateau scheduling, and the
/// whole procedure is bit-deterministic in `seed`.
pub fn fit_discounted_value(
    cl: &ClosedLoopEnv,
    gamma: f64,
    cfg: &FitConfig,
    seed: u64,
) -> Result<ValueFn, NetError> {
    cfg.validate()?;
    let n = cl.env.state_dim();
    let root = Rng::new(seed).split(0x4649_5456);

    let mut sample_rng = root.split(1);
    let mut states = Vec::with_capacity(cfg.states);
    let mut targets = Vec::with_capacity(cfg.states);
    for _ in 0..cfg.states {
        let x = cl.env.sample_state(&mut sample_rng);
        let y = estimate_value(cl, &x, gamma)
            .map_err(|e| NetError::InvalidConfig(format!("cost rollout: {e}")))?;
        states.push(x);
        targets.push(y);
    }
    let scale = targets.iter().fold(0.0f64, |acc, y| acc.max(y.abs())).max(1e-12);
    for y in &mut targets {
        *y /= scale;
    }

    let mut widths = vec![n];
    widths.extend_from_slice(&cfg.hidden_widths);
    widths.push(1);
    let mut net = Mlp::new(&widths, Head::Scalar)?;
    net.init_kaiming(&mut root.split(2));

    let mut adam = Adam::new(net.params().len());
    let mut scheduler = PlateauScheduler::new(cfg.learning_rate, 0.5, 50);
    let mut shuffle_rng = root.split(3);
    let mut order: Vec<usize> = (0..cfg.states).collect();
    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss_val, mut grad) = {
                let snap = net.params().to_vec();
                let mut tape = Tape::new();
                let src = tape.add_source(&snap);
                let mut errors = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let x = tape.leaf(&states[i]);
                    let out = net.forward_on_tape(&mut tape, x, src);
                    let target = tape.leaf(&[targets[i]]);
                    let diff = tape.sub(out, target);
                    errors.push(tape.sum_sq(diff));
                }
                let stacked = tape.concat(&errors);
                let sum = tape.sum(stacked);
                let mean = tape.scale(sum, 1.0 / chunk.len() as f64);
                let loss_val = tape.value(mean)[0];
                tape.backward(mean);
                (loss_val, tape.source_grads[src].clone())
            };
            if !loss_val.is_finite() {
                return Err(NetError::NonFiniteLoss { epoch, loss: loss_val });
            }
            clip_global_norm(&mut [&mut grad], 5.0);
            adam.step(net.params_mut(), &grad, scheduler.lr());
            total += loss_val * chunk.len() as f64;
        }
        scheduler.observe(total / cfg.states as f64);
    }
    Ok(ValueFn::ScaledNet { net, scale })
}

/// Output of [`train_synthesis`]: controller, matching certificate, the
/// level defining the certified region, and the training history.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    /// Trained feedback controller (deviation control, zero at origin).
    pub controller: Mlp,
    /// Certificate candidate trained jointly with the controller.
    pub certificate: GeneralizedCertificate,
    /// Level whose sublevel set is the certified region.
    pub rho: f64,
    /// Per-epoch loss and learning rate.
    pub history: Vec<EpochStat>,
}

/// Falsification schedule and strength. The ascent runs every tenth of
/// the epoch budget, restarting from [`FALSIFY_RESTARTS`] random states.
const FALSIFY_STEPS: usize = 30;
const FALSIFY_RESTARTS: usize = 8;
const FALSIFY_STEP_SIZE: f64 = 0.02;
/// Number of held states used by the region-growing loss, refreshed at
/// every falsification round.
const REGION_SET_SIZE: usize = 256;
/// Region states entering each batch's region term.
const REGION_BATCH: usize = 64;

/// How the trainable candidate value is parameterized per environment,
/// mirroring the benchmark configurations: small networks for the
/// pendulums, quadratic forms elsewhere.
fn synthesis_value_arch(env: &OpenLoopEnv, rng: &mut Rng) -> ValueFn {
    let n = env.state_dim();
    match env.name() {
        "pendulum-appendix" | "pendulum-gym" => {
            let mut net =
                Mlp::new(&[n, 16, 16, 8, 1], Head::Scalar).expect("static widths are valid");
            net.init_kaiming(rng);
            ValueFn::Net(net)
        }
        _ => {
            // Positive-definite start: a scaled identity factor plus a
            // small random perturbation.
            let mut rows = vec![vec![0.0; n]; n];
            for (i, row) in rows.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if i == j { 0.5 } else { 0.0 } + 0.05 * rng.normal();
                }
            }
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            ValueFn::FactoredQuadratic(Matrix::from_rows(&refs))
        }
    }
}

/// Controller body widths per environment.
fn synthesis_controller_hidden(env: &OpenLoopEnv) -> Vec<usize> {
    match env.name() {
        "quadrotor2d" => vec![8, 8],
        _ => vec![8, 8, 8, 8],
    }
}

/// Writes a flat parameter buffer back into a trainable value function.
fn write_value_params(v: &mut ValueFn, buf: &[f64]) {
    match v {
        ValueFn::Net(net) | ValueFn::ScaledNet { net, .. } => {
            net.params_mut().copy_from_slice(buf);
        }
        ValueFn::FactoredQuadratic(w) => {
            let cols = w.cols();
            let rows: Vec<&[f64]> = buf.chunks(cols).collect();
            *w = Matrix::from_rows(&rows);
        }
        ValueFn::Zero | ValueFn::Constant(_) | ValueFn::Quadratic(_) => {}
    }
}

/// Jointly trains a saturated neural controller and a certificate
/// candidate on `env` under fixed constant step weights.
///
/// Per sampled state the stability term is
/// `hinge(min{hinge(F) + c0 H, rho - V})` where `F` is the weighted
/// average decrease defect over an `M`-step differentiable rollout and
/// `H` sums the per-step box violations; a region term `c1 *
/// mean hinge(V/rho - 1)` over held near-boundary states grows the
/// certified set, and `c2` scales an exact L1 penalty on controller and
/// value parameters. Minimization alternates with gradient-ascent
/// falsification whose counterexamples join the dataset (FIFO-capped at
/// ten times the base set). Training stops early when the hinge terms
/// reach zero and a falsification round finds no violation. A non-finite
/// loss stops training and returns the last finite-epoch parameters.
pub fn train_synthesis(
    env: &OpenLoopEnv,
    cfg: &TrainConfig,
    weights: &StepWeights,
) -> Result<SynthesisResult, NetError> {
    cfg.validate()?;
    if weights.horizon() != cfg.m {
        return Err(NetError::InvalidConfig(format!(
            "config window M = {} does not match the {} step weights",
            cfg.m,
            weights.horizon()
        )));
    }
    let n = env.state_dim();
    let root = Rng::new(cfg.seed).split(0x53594E54);

    // Controller: saturated head over the deviation-control box, with
    // the body centered at the origin by the policy wrapper.
    let (dev_lo, dev_hi) = env.control_dev_bounds();
    let mut ctrl_widths = vec![n];
    ctrl_widths.extend(synthesis_controller_hidden(env));
    ctrl_widths.push(env.control_dim());
    let mut ctrl =
        Mlp::new(&ctrl_widths, Head::SaturatedControl { lo: dev_lo, hi: dev_hi })?;
    ctrl.init_kaiming(&mut root.split(1));

    let mut value_fn = synthesis_value_arch(env, &mut root.split(2));
    let mut v_buf = value_fn.params().expect("trainable value").to_vec();

    let make_cert = |value_fn: &ValueFn| GeneralizedCertificate {
        base_value: ValueFn::Zero,
        residual_fn: value_fn.clone(),
        weight_fn: WeightFn::Constant(weights.clone()),
        alpha_bar: cfg.alpha_bar,
        beta: cfg.beta,
        delta: cfg.delta,
        m: cfg.m,
    };
    let cl = ClosedLoopEnv::new(env.clone(), Policy::Net { net: ctrl.clone() });
    let (dom_lo, dom_hi) = env.domain();

    // Base dataset: uniform domain states outside the excluded ball.
    let mut sample_rng = root.split(3);
    let sample_outside = |rng: &mut Rng| loop {
        let x = env.sample_state(rng);
        if x.iter().map(|v| v * v).sum::<f64>().sqrt() >= cfg.delta {
            return x;
        }
    };
    let base: Vec<Vec<f64>> =
        (0..cfg.dataset_size).map(|_| sample_outside(&mut sample_rng)).collect();
    let mut extra: VecDeque<Vec<f64>> = VecDeque::new();
    let extra_cap = 10 * cfg.dataset_size;
    let mut region_set: Vec<Vec<f64>> =
        (0..REGION_SET_SIZE).map(|_| env.sample_state(&mut sample_rng)).collect();

    let mut scheduler =
        PlateauScheduler::new(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience);
    let mut adam_ctrl = Adam::new(ctrl.params().len());
    let mut adam_v = Adam::new(v_buf.len());
    let mut shuffle_rng = root.split(4);
    let mut falsify_rng = root.split(5);
    let falsify_every = (cfg.epochs / 10).max(1);
    let mut history = Vec::new();
    let mut checkpoint = (ctrl.params().to_vec(), v_buf.clone());
    let zero_state = vec![0.0; n];

    let neg_dom_hi: Vec<f64> = dom_hi.iter().map(|v| -v).collect();
    for epoch in 0..cfg.epochs {
        let all: Vec<&Vec<f64>> = base.iter().chain(extra.iter()).collect();
        let mut order: Vec<usize> = (0..all.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut hinge_total = 0.0;
        let mut batches = 0usize;
        let mut abort = false;
        for chunk in order.chunks(cfg.batch_size) {
            let region_chunk: Vec<usize> =
                (0..REGION_BATCH.min(region_set.len())).map(|_| shuffle_rng.index(region_set.len())).collect();
            let (loss_val, hinge_val, mut g_ctrl, mut g_v) = {
                let ctrl_snap = ctrl.params().to_vec();
                let v_snap = v_buf.clone();
                let mut tape = Tape::new();
                let ctrl_src = tape.add_source(&ctrl_snap);
                let v_src = tape.add_source(&v_snap);
                let zero_leaf = tape.leaf(&zero_state);
                let v_at_zero = value_fn.on_tape(&mut tape, zero_leaf, Some(v_src));

                // Practical value with the origin evaluation shared
                // across the batch: |phi(x) - phi(0)| + beta |x|^2.
                fn v_of(
                    tape: &mut Tape<'_>,
                    value_fn: &ValueFn,
                    v_src: usize,
                    v_at_zero: NodeId,
                    beta: f64,
                    x: NodeId,
                ) -> NodeId {
                    let vx = value_fn.on_tape(tape, x, Some(v_src));
                    let diff = tape.sub(vx, v_at_zero);
                    let abs = tape.abs(diff);
                    let quad = tape.sum_sq(x);
                    let bq = tape.scale(quad, beta);
                    tape.add(abs, bq)
                }

                let mut stab_terms = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let x0 = tape.leaf(all[i]);
                    let (states, _) = cl.rollout_on_tape(&mut tape, x0, cfg.m, Some(ctrl_src));
                    let v0 = v_of(&mut tape, &value_fn, v_src, v_at_zero, cfg.beta, states[0]);
                    let tail: Vec<NodeId> = (1..=cfg.m)
                        .map(|k| v_of(&mut tape, &value_fn, v_src, v_at_zero, cfg.beta, states[k]))
                        .collect();
                    let stacked = tape.concat(&tail);
                    let sig = tape.leaf(weights.sigma());
                    let weighted = tape.dot(sig, stacked);
                    let avg = tape.scale(weighted, 1.0 / cfg.m as f64);
                    let scaled_v0 = tape.scale(v0, 1.0 - cfg.alpha_bar);
                    let f = tape.sub(avg, scaled_v0);
                    let hinge_f = tape.hinge(f);

                    // Per-step box-violation penalty over the window.
                    let mut h: Option<NodeId> = None;
                    for &s in &states[1..] {
                        let over = tape.add_const(s, &neg_dom_hi);
                        let over_h = tape.hinge(over);
                        let over_sum = tape.sum(over_h);
                        let neg = tape.scale(s, -1.0);
                        let under = tape.add_const(neg, &dom_lo);
                        let under_h = tape.hinge(under);
                        let under_sum = tape.sum(under_h);
                        let both = tape.add(over_sum, under_sum);
                        h = Some(match h {
                            Some(acc) => tape.add(acc, both),
                            None => both,
                        });
                    }
                    let h = h.expect("window length is at least 1");
                    let ch = tape.scale(h, cfg.c0);
                    let inner = tape.add(hinge_f, ch);
                    let neg_v0 = tape.scale(v0, -1.0);
                    let room = tape.add_const(neg_v0, &[cfg.rho]);
                    let min = tape.min2(inner, room);
                    stab_terms.push(tape.hinge(min));
                }
                let stacked = tape.concat(&stab_terms);
                let stab_sum = tape.sum(stacked);
                let stab = tape.scale(stab_sum, 1.0 / chunk.len() as f64);

                // Region growth: pull held near-boundary states inside.
                let mut region_terms = Vec::with_capacity(region_chunk.len());
                for &ri in &region_chunk {
                    let x = tape.leaf(&region_set[ri]);
                    let v = v_of(&mut tape, &value_fn, v_src, v_at_zero, cfg.beta, x);
                    let scaled = tape.scale(v, 1.0 / cfg.rho);
                    let gap = tape.add_const(scaled, &[-1.0]);
                    region_terms.push(tape.hinge(gap));
                }
                let region = if region_terms.is_empty() {
                    tape.leaf(&[0.0])
                } else {
                    let stacked = tape.concat(&region_terms);
                    let sum = tape.sum(stacked);
                    tape.scale(sum, 1.0 / region_terms.len() as f64)
                };
                let c1_region = tape.scale(region, cfg.c1);
                let hinge_part = tape.add(stab, c1_region);

                // Exact L1 penalty on controller and value parameters.
                let ctrl_vec = tape.param_vec(ctrl_src, 0, ctrl_snap.len());
                let ctrl_abs = tape.abs(ctrl_vec);
                let ctrl_l1 = tape.sum(ctrl_abs);
                let v_vec = tape.param_vec(v_src, 0, v_snap.len());
                let v_abs = tape.abs(v_vec);
                let v_l1 = tape.sum(v_abs);
                let l1 = tape.add(ctrl_l1, v_l1);
                let c2_l1 = tape.scale(l1, cfg.c2);
                let loss = tape.add(hinge_part, c2_l1);

                let loss_val = tape.value(loss)[0];
                let hinge_val = tape.value(hinge_part)[0];
                tape.backward(loss);
                (
                    loss_val,
                    hinge_val,
                    tape.source_grads[ctrl_src].clone(),
                    tape.source_grads[v_src].clone(),
                )
            };
            if !loss_val.is_finite() {
                // Abort with the last finite-epoch checkpoint.
                ctrl.params_mut().copy_from_slice(&checkpoint.0);
                v_buf.copy_from_slice(&checkpoint.1);
                abort = true;
                break;
            }
            clip_global_norm(&mut [&mut g_ctrl, &mut g_v], cfg.grad_clip);
            adam_ctrl.step(ctrl.params_mut(), &g_ctrl, scheduler.lr());
            adam_v.step(&mut v_buf, &g_v, scheduler.lr());
            total += loss_val;
            hinge_total += hinge_val;
            batches += 1;
        }
        if abort {
            break;
        }
        let epoch_loss = total / batches as f64;
        let epoch_hinge = hinge_total / batches as f64;
        history.push(EpochStat { epoch, loss: epoch_loss, lr: scheduler.lr() });
        scheduler.observe(epoch_loss);
        checkpoint = (ctrl.params().to_vec(), v_buf.clone());

        let scheduled = (epoch + 1) % falsify_every == 0;
        let hinges_cleared = epoch_hinge <= CONVERGED_LOSS;
        if scheduled || hinges_cleared {
            write_value_params(&mut value_fn, &v_buf);
            let cert = make_cert(&value_fn);
            let cl_now = ClosedLoopEnv::new(env.clone(), Policy::Net { net: ctrl.clone() });
            let found = pgd_falsify(
                &cert,
                &cl_now,
                cfg.rho,
                FALSIFY_STEPS,
                FALSIFY_STEP_SIZE,
                FALSIFY_RESTARTS,
                falsify_rng.next_u64(),
            )
            .map_err(|e| NetError::InvalidConfig(format!("falsification failed: {e}")))?;
            if found.is_empty() && hinges_cleared {
                break;
            }
            for ce in found {
                extra.push_back(ce.state);
                if extra.len() > extra_cap {
                    extra.pop_front();
                }
            }
            region_set = region_candidates(
                &cert,
                env,
                cfg.rho,
                REGION_SET_SIZE,
                RegionMode::BoundarySample,
                falsify_rng.next_u64(),
            )
            .map_err(|e| NetError::InvalidConfig(format!("region sampling failed: {e}")))?;
        }
    }
    write_value_params(&mut value_fn, &v_buf);
    Ok(SynthesisResult {
        certificate: make_cert(&value_fn),
        controller: ctrl,
        rho: cfg.rho,
        history,
    })
}

/// Averages a certificate's step weights over `samples`, normalizes the
/// mean to total mass 1, and sums it over `bins` contiguous step groups
/// of (near-)equal size.
///
/// The returned fractions sum to 1 within 1e-9. Constant weights are
/// averaged the same way (the samples then only need to be non-empty).
pub fn weight_concentration(
    cert: &GeneralizedCertificate,
    samples: &[Vec<f64>],
    bins: usize,
) -> Result<Vec<f64>, NetError> {
    let m = cert.m;
    if bins == 0 || bins > m {
        return Err(NetError::InvalidConfig(format!(
            "bins must lie in [1, M] = [1, {m}], got {bins}"
        )));
    }
    if samples.is_empty() {
        return Err(NetError::InvalidConfig(
            "weight concentration needs at least one sample state".to_string(),
        ));
    }
    let mut mean = vec![0.0; m];
    for x in samples {
        let sigma = cert
            .weight_fn
            .eval(x)
            .map_err(|e| NetError::InvalidConfig(format!("weight evaluation: {e}")))?;
        for (acc, s) in mean.iter_mut().zip(&sigma) {
            *acc += s;
        }
    }
    let total: f64 = mean.iter().sum();
    if !(total > 0.0) {
        return Err(NetError::InvalidConfig(format!(
            "total weight mass must be positive, got {total}"
        )));
    }
    let mut fractions = Vec::with_capacity(bins);
    for b in 0..bins {
        let start = b * m / bins;
        let end = (b + 1) * m / bins;
        fractions.push(mean[start..end].iter().sum::<f64>() / total);
    }
    Ok(fractions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn default_config_is_valid_and_partial_json_fills_in_defaults() {
        TrainConfig::default().validate().expect("defaults are valid");
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"M": 15, "epochs": 3}"#).expect("partial config parses");
        assert_eq!(cfg.m, 15);
        assert_eq!(cfg.epochs, 3);
        assert!((cfg.learning_rate - 5e-4).abs() < 1e-18);
        assert_eq!(cfg.plateau_patience, 500);
        cfg.validate().expect("still valid");
    }

    #[test]
    fn invalid_configs_are_rejected_with_context() {
        let mut cfg = TrainConfig::default();
        cfg.m = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.alpha_bar = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fitted_cost_network_tracks_the_exact_quadratic_value() {
        use crate::lqr::{solve_discounted_are, LinearSystem};
        let sys = LinearSystem::scalar(2.0, 1.0, 1.0, 1.0).expect("valid system");
        let sol = solve_discounted_are(&sys, 0.7).expect("solvable");
        let p = sol.p[(0, 0)];
        let cl =
            ClosedLoopEnv::new(OpenLoopEnv::linear(sys), Policy::Linear { k: sol.k.clone() });
        let cfg = FitConfig { states: 600, epochs: 800, ..FitConfig::default() };
        let fitted = fit_discounted_value(&cl, 0.7, &cfg, 42).expect("fits");
        assert!(matches!(fitted, ValueFn::ScaledNet { .. }));
        // Probe well inside the sampled range (the linear domain box is
        // [-5, 5]); the truncated rollout itself is within 1% of x^2 P,
        // so a loose band on top of that shows the regression captured
        // the curve.
        let probes = [-4.5, -2.5, -0.8, 1.2, 3.0, 4.5];
        let report: Vec<String> = probes
            .iter()
            .map(|&x| {
                let exact = p * x * x;
                let got = fitted.eval(&[x]).expect("evaluates");
                format!("x={x}: fit {got} vs exact {exact}")
            })
            .collect();
        for &x in &probes {
            let exact = p * x * x;
            let got = fitted.eval(&[x]).expect("evaluates");
            assert!(
                (got - exact).abs() <= 0.12 * exact.max(5.0),
                "fit strays at x = {x}:\n{}",
                report.join("\n")
            );
        }
        let again = fit_discounted_value(&cl, 0.7, &cfg, 42).expect("fits");
        assert_eq!(again, fitted, "fitting must be bit-deterministic in the seed");
    }

    #[test]
    fn grad_params_handles_empty_batches_and_rejects_bad_compositions() {
        let mut rng = Rng::new(3);
        let mut net = Mlp::new(&[2, 4, 1], Head::Scalar).expect("valid widths");
        net.init_kaiming(&mut rng);
        let (loss, grad) =
            grad_params(&net, &LossExpr::SumSq(Box::new(LossExpr::Output)), &[]).expect("empty");
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));

        // Non-scalar root is an unsupported composition.
        let wide = Mlp::new(&[2, 4, 3], Head::SoftmaxScaled).expect("valid widths");
        let err = grad_params(&wide, &LossExpr::Output, &[vec![0.1, 0.2]]).unwrap_err();
        assert!(matches!(err, NetError::UnsupportedPrimitive(_)), "got {err:?}");

        // Width mismatch inside the tree is reported, not silently broadcast.
        let expr = LossExpr::Dot(Box::new(LossExpr::Output), vec![1.0, 2.0]);
        let err = grad_params(&wide, &expr, &[vec![0.1, 0.2]]).unwrap_err();
        assert!(matches!(err, NetError::UnsupportedPrimitive(_)), "got {err:?}");
    }

    use crate::dynamics::rollout;
    use crate::net::Head;

    fn pendulum_dataset(m: usize, count: usize) -> (ClosedLoopEnv, Vec<Trajectory>) {
        let cl = ClosedLoopEnv::new(OpenLoopEnv::pendulum_appendix(), Policy::Zero);
        let mut rng = Rng::new(11);
        let data = (0..count)
            .map(|_| {
                let x = cl.env.sample_state(&mut rng);
                rollout(&cl, &x, m).expect("rollout").0
            })
            .collect();
        (cl, data)
    }

    fn small_cfg(m: usize) -> TrainConfig {
        TrainConfig {
            m,
            epochs: 12,
            batch_size: 16,
            hidden_widths: vec![8],
            dataset_size: 32,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn empty_dataset_yields_zero_loss_and_a_deterministic_untouched_certificate() {
        let (cl, _) = pendulum_dataset(2, 0);
        let base = ValueFn::Quadratic(crate::matlib::Matrix::identity(2));
        let cfg = small_cfg(2);
        let a = train_certificate(&cl, &base, &cfg, &[]).expect("train");
        assert_eq!(a.history.len(), 1);
        assert_eq!(a.history[0].loss, 0.0);
        let b = train_certificate(&cl, &base, &cfg, &[]).expect("train");
        assert_eq!(
            a.certificate.residual_fn.params().expect("net"),
            b.certificate.residual_fn.params().expect("net"),
            "initialization must be seed-deterministic"
        );
    }

    #[test]
    fn certificate_training_is_bit_deterministic() {
        let (cl, data) = pendulum_dataset(2, 24);
        let base = ValueFn::Quadratic(crate::matlib::Matrix::identity(2));
        let cfg = small_cfg(2);
        let a = train_certificate(&cl, &base, &cfg, &data).expect("train");
        let b = train_certificate(&cl, &base, &cfg, &data).expect("train");
        assert_eq!(
            a.certificate.residual_fn.params().expect("net"),
            b.certificate.residual_fn.params().expect("net")
        );
        assert_eq!(a.history.len(), b.history.len());
        for (sa, sb) in a.history.iter().zip(&b.history) {
            assert_eq!(sa.loss, sb.loss);
        }
        assert!(a.history.iter().all(|s| s.loss.is_finite()));
    }

    #[test]
    fn non_finite_loss_aborts_certificate_training_with_a_diagnostic() {
        let (cl, _) = pendulum_dataset(2, 0);
        let base = ValueFn::Quadratic(crate::matlib::Matrix::identity(2));
        let data = vec![Trajectory {
            states: vec![vec![0.1, 0.0], vec![1e300, 0.0], vec![1e300, 0.0]],
            controls: vec![vec![0.0], vec![0.0]],
        }];
        let err = train_certificate(&cl, &base, &small_cfg(2), &data).unwrap_err();
        assert!(matches!(err, NetError::NonFiniteLoss { epoch: 0, .. }), "got {err:?}");
    }

    #[test]
    fn too_short_trajectories_are_rejected() {
        let (cl, data) = pendulum_dataset(1, 3);
        let base = ValueFn::Zero;
        let err = train_certificate(&cl, &base, &small_cfg(2), &data).unwrap_err();
        assert!(matches!(err, NetError::InvalidConfig(_)), "got {err:?}");
    }

    #[test]
    fn weight_concentration_bins_sum_to_one_and_handle_uniform_heads() {
        // Zero-weight softmax head: every step weight is exactly 1.
        let sigma = Mlp::new(&[2, 4, 15], Head::SoftmaxScaled).expect("widths");
        let cert = GeneralizedCertificate {
            base_value: ValueFn::Zero,
            residual_fn: ValueFn::Zero,
            weight_fn: WeightFn::Net(sigma),
            alpha_bar: 0.0,
            beta: 0.0,
            delta: 0.0,
            m: 15,
        };
        let samples = vec![vec![0.3, -0.8], vec![-1.0, 2.0]];
        let fractions = weight_concentration(&cert, &samples, 5).expect("fractions");
        assert_eq!(fractions.len(), 5);
        for f in &fractions {
            assert!((f - 0.2).abs() < 1e-12, "uniform head must give 0.2 per bin, got {f}");
        }
        assert!((fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let one = weight_concentration(&cert, &samples, 1).expect("single bin");
        assert_eq!(one, vec![1.0]);

        assert!(weight_concentration(&cert, &samples, 0).is_err());
        assert!(weight_concentration(&cert, &samples, 16).is_err());
        assert!(weight_concentration(&cert, &[], 5).is_err());

        // Constant weights follow the same path.
        let cert = GeneralizedCertificate {
            weight_fn: WeightFn::Constant(
                StepWeights::new(vec![3.0, 1.0]).expect("weights"),
            ),
            m: 2,
            ..cert
        };
        let fractions = weight_concentration(&cert, &samples, 2).expect("fractions");
        assert!((fractions[0] - 0.75).abs() < 1e-12);
        assert!((fractions[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn synthesis_runs_end_to_end_on_the_scalar_linear_benchmark() {
        let sys = crate::lqr::LinearSystem::scalar(2.0, 1.0, 1.0, 1.0).expect("system");
        let env = OpenLoopEnv::linear(sys);
        let cfg = TrainConfig {
            m: 1,
            epochs: 10,
            batch_size: 32,
            dataset_size: 48,
            delta: 0.0,
            ..TrainConfig::default()
        };
        let out =
            train_synthesis(&env, &cfg, &StepWeights::one_step()).expect("synthesis");
        assert_eq!(out.rho, cfg.rho);
        assert!(!out.history.is_empty());
        assert!(out.history.iter().all(|s| s.loss.is_finite()));
        assert!(matches!(out.certificate.residual_fn, ValueFn::FactoredQuadratic(_)));
        // The policy wrapper centers the controller: zero at the origin.
        let policy = Policy::Net { net: out.controller.clone() };
        let u0 = policy.control(&[0.0]).expect("control");
        assert_eq!(u0, vec![0.0]);

        // Bit-determinism of the whole loop, falsification included.
        let again =
            train_synthesis(&env, &cfg, &StepWeights::one_step()).expect("synthesis");
        assert_eq!(out.controller.params(), again.controller.params());
        assert_eq!(
            out.certificate.residual_fn.params().expect("factor"),
            again.certificate.residual_fn.params().expect("factor")
        );
    }

    #[test]
    fn synthesis_rejects_mismatched_window_lengths() {
        let sys = crate::lqr::LinearSystem::scalar(2.0, 1.0, 1.0, 1.0).expect("system");
        let env = OpenLoopEnv::linear(sys);
        let cfg = TrainConfig { m: 2, ..small_cfg(2) };
        let err = train_synthesis(&env, &cfg, &StepWeights::one_step()).unwrap_err();
        assert!(matches!(err, NetError::InvalidConfig(_)), "got {err:?}");
    }

    #[test]
    fn gradient_matches_central_differences_on_a_composed_loss() {
        let mut rng = Rng::new(9);
        let mut net = Mlp::new(&[2, 5, 3], Head::SoftmaxScaled).expect("valid widths");
        net.init_kaiming(&mut rng);
        let expr = LossExpr::Add(
            Box::new(LossExpr::SumSq(Box::new(LossExpr::Sub(
                Box::new(LossExpr::Output),
                Box::new(LossExpr::Const(vec![1.0, 0.5, 1.5])),
            )))),
            Box::new(LossExpr::Hinge(Box::new(LossExpr::Dot(
                Box::new(LossExpr::Output),
                vec![0.3, -0.2, 0.1],
            )))),
        );
        let inputs = vec![vec![0.4, -0.9], vec![1.3, 0.2], vec![-0.5, -0.1]];
        let (_, grad) = grad_params(&net, &expr, &inputs).expect("gradient");
        let h = 1e-5;
        for i in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let (lp, _) = grad_params(&plus, &expr, &inputs).expect("plus");
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let (lm, _) = grad_params(&minus, &expr, &inputs).expect("minus");
            let fd = (lp - lm) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-8);
            assert!(
                ((grad[i] - fd) / denom).abs() < 1e-4,
                "param {i}: analytic {} vs central difference {fd}",
                grad[i]
            );
        }
    }
}
