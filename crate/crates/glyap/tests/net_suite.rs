//! Contract tests for the network engine and the training loops.
//!
//! Gradients are checked against central finite differences, the
//! initializer against its target variance, and certificate training
//! against the scalar linear benchmark where a valid certificate is
//! known to exist, so zero training loss is reachable.

use glyap::dynamics::{rollout, ClosedLoopEnv, OpenLoopEnv, Policy};
use glyap::glf::{residual_f, Trajectory, ValueFn};
use glyap::lqr::{solve_discounted_are, LinearSystem};
use glyap::net::{
    clip_global_norm, grad_params, train_certificate, Head, LossExpr, Mlp, Tape, TrainConfig,
};
use glyap::rng::Rng;
use proptest::prelude::*;

// ── gradient correctness over random networks and losses ───────────────

/// Draws a random architecture: 1–3 inputs, one or two hidden layers,
/// 1–3 outputs, any head (the saturation box spans the output width).
fn random_net(rng: &mut Rng) -> Mlp {
    let n_in = 1 + rng.index(3);
    let kind = rng.index(3);
    // A scalar head requires output width 1.
    let n_out = if kind == 0 { 1 } else { 1 + rng.index(3) };
    let mut widths = vec![n_in];
    for _ in 0..(1 + rng.index(2)) {
        widths.push(2 + rng.index(6));
    }
    widths.push(n_out);
    let head = match kind {
        0 => Head::Scalar,
        1 => Head::SoftmaxScaled,
        _ => Head::SaturatedControl { lo: vec![-2.0; n_out], hi: vec![3.0; n_out] },
    };
    let mut net = Mlp::new(&widths, head).expect("widths are valid");
    net.init_kaiming(rng);
    net
}

/// Draws a random supported loss over an output of width `w`.
fn random_loss(rng: &mut Rng, w: usize) -> LossExpr {
    let rand_vec = |rng: &mut Rng, len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.range(-1.5, 1.5)).collect()
    };
    let out = Box::new(LossExpr::Output);
    match rng.index(5) {
        0 => LossExpr::SumSq(Box::new(LossExpr::Sub(
            out,
            Box::new(LossExpr::Const(rand_vec(rng, w))),
        ))),
        1 => LossExpr::Hinge(Box::new(LossExpr::Dot(out, rand_vec(rng, w)))),
        2 => LossExpr::Add(
            Box::new(LossExpr::SumSq(out.clone())),
            Box::new(LossExpr::Scale(
                Box::new(LossExpr::Sum(Box::new(LossExpr::Abs(out)))),
                0.3,
            )),
        ),
        3 => LossExpr::Min(
            Box::new(LossExpr::Dot(out.clone(), rand_vec(rng, w))),
            Box::new(LossExpr::Dot(out, rand_vec(rng, w))),
        ),
        _ => LossExpr::Mul(
            Box::new(LossExpr::Sum(out.clone())),
            Box::new(LossExpr::Sum(Box::new(LossExpr::Abs(out)))),
        ),
    }
}

#[test]
fn gradients_match_central_differences_for_fifty_random_pairs() {
    let mut rng = Rng::new(0x6E65_7473);
    for pair in 0..50 {
        let net = random_net(&mut rng);
        let loss = random_loss(&mut rng, net.output_width());
        let inputs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..net.input_width()).map(|_| rng.range(-2.0, 2.0)).collect())
            .collect();
        let (base_loss, grad) = grad_params(&net, &loss, &inputs).expect("gradient");
        let h = 1e-5;
        // Central differences carry ~eps·|loss|/(2h) of cancellation noise,
        // so the relative-error denominator is floored proportionally to keep
        // the check meaningful where the true gradient vanishes.
        let noise_floor = 1e-6 * base_loss.abs().max(1.0);
        for i in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let (lp, _) = grad_params(&plus, &loss, &inputs).expect("plus");
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let (lm, _) = grad_params(&minus, &loss, &inputs).expect("minus");
            let fd = (lp - lm) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(noise_floor);
            assert!(
                ((grad[i] - fd) / denom).abs() < 1e-4,
                "pair {pair}, param {i}: analytic {} vs central difference {fd}",
                grad[i]
            );
        }
    }
}

// ── initializer and clipping statistics ─────────────────────────────────

#[test]
fn kaiming_initialization_hits_its_variance_target_and_zeroes_biases() {
    let widths = [4usize, 16, 8, 1];
    let mut rng = Rng::new(77);
    let mut sums = vec![0.0; widths.len() - 1];
    let mut sq_sums = vec![0.0; widths.len() - 1];
    let mut counts = vec![0usize; widths.len() - 1];
    for _ in 0..1000 {
        let mut net = Mlp::new(&widths, Head::Scalar).expect("widths");
        net.init_kaiming(&mut rng);
        // Flat layout per layer: row-major weight block, then biases.
        let mut off = 0;
        for layer in 0..widths.len() - 1 {
            let (rows, cols) = (widths[layer + 1], widths[layer]);
            for k in 0..rows * cols {
                let v = net.params()[off + k];
                sums[layer] += v;
                sq_sums[layer] += v * v;
                counts[layer] += 1;
            }
            for k in 0..rows {
                assert_eq!(
                    net.params()[off + rows * cols + k],
                    0.0,
                    "biases must start at exactly zero"
                );
            }
            off += rows * cols + rows;
        }
        assert_eq!(off, net.params().len());
    }
    for layer in 0..widths.len() - 1 {
        let n = counts[layer] as f64;
        let mean = sums[layer] / n;
        let var = sq_sums[layer] / n - mean * mean;
        let target = 2.0 / widths[layer] as f64;
        assert!(
            (var - target).abs() < 0.2 * target,
            "layer {layer}: variance {var} vs target {target}"
        );
    }
}

#[test]
fn clipping_caps_the_global_norm_only_when_it_is_exceeded() {
    let mut a = vec![3.0, 4.0];
    let mut b = vec![12.0];
    let pre = clip_global_norm(&mut [&mut a, &mut b], 5.0);
    assert!((pre - 13.0).abs() < 1e-12);
    let post = (a.iter().chain(b.iter()).map(|v| v * v).sum::<f64>()).sqrt();
    assert!(post <= 5.0 + 1e-9);

    let mut c = vec![0.3, 0.4];
    let pre = clip_global_norm(&mut [&mut c], 5.0);
    assert!((pre - 0.5).abs() < 1e-12);
    assert_eq!(c, vec![0.3, 0.4], "small gradients pass through unchanged");
}

// ── exact L1 term ───────────────────────────────────────────────────────

#[test]
fn parameter_l1_on_the_tape_equals_the_hand_computed_sum() {
    let mut rng = Rng::new(5);
    let mut net = Mlp::new(&[2, 3, 1], Head::Scalar).expect("widths");
    net.init_kaiming(&mut rng);
    let params = net.params().to_vec();
    let mut tape = Tape::new();
    let src = tape.add_source(&params);
    let vec = tape.param_vec(src, 0, params.len());
    let abs = tape.abs(vec);
    let l1 = tape.sum(abs);
    let expected: f64 = params.iter().map(|v| v.abs()).sum();
    assert_eq!(tape.value(l1)[0], expected);
    tape.backward(l1);
    for (g, p) in tape.source_grads[src].iter().zip(&params) {
        assert_eq!(*g, p.signum() * f64::from(*p != 0.0));
    }
}

// ── head invariants under random inputs ─────────────────────────────────

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_heads_always_emit_positive_weights_summing_to_m(
        seed in 0u64..1000,
        x0 in -10.0f64..10.0,
        x1 in -10.0f64..10.0,
        m in 1usize..12,
    ) {
        let mut rng = Rng::new(seed);
        let mut net = Mlp::new(&[2, 6, m], Head::SoftmaxScaled).expect("widths");
        net.init_kaiming(&mut rng);
        let out = net.forward(&[x0, x1]).expect("forward");
        let total: f64 = out.iter().sum();
        prop_assert!((total - m as f64).abs() < 1e-9 * m as f64);
        for v in out {
            prop_assert!(v >= 0.0);
        }
    }

    #[test]
    fn saturated_heads_stay_inside_their_box(
        seed in 0u64..1000,
        x0 in -50.0f64..50.0,
        x1 in -50.0f64..50.0,
    ) {
        let lo = [-2.0, -0.5];
        let hi = [3.0, 1.5];
        let mut rng = Rng::new(seed);
        let mut net =
            Mlp::new(&[2, 6, 2], Head::SaturatedControl { lo: lo.to_vec(), hi: hi.to_vec() })
                .expect("widths");
        net.init_kaiming(&mut rng);
        let out = net.forward(&[x0, x1]).expect("forward");
        for (i, v) in out.iter().enumerate() {
            prop_assert!(lo[i] <= *v && *v <= hi[i]);
        }
    }
}

// ── certificate training on the scalar linear benchmark ────────────────

/// Samples a domain state at least `delta` away from the origin.
fn sample_outside(env: &OpenLoopEnv, delta: f64, rng: &mut Rng) -> Vec<f64> {
    loop {
        let x = env.sample_state(rng);
        if x.iter().map(|v| v * v).sum::<f64>().sqrt() >= delta {
            return x;
        }
    }
}

#[test]
fn training_reaches_zero_loss_on_the_scalar_benchmark_and_generalizes() {
    let sys = LinearSystem::scalar(2.0, 1.0, 1.0, 1.0).expect("system");
    let sol = solve_discounted_are(&sys, 0.7).expect("solution");
    let cl = ClosedLoopEnv::new(OpenLoopEnv::linear(sys), Policy::Linear { k: sol.k.clone() });
    let cfg = TrainConfig {
        m: 2,
        epochs: 800,
        hidden_widths: vec![16, 16],
        delta: 0.05,
        ..TrainConfig::default()
    };
    let mut rng = Rng::new(1234);
    let data: Vec<Trajectory> = (0..256)
        .map(|_| {
            let x = sample_outside(&cl.env, cfg.delta, &mut rng);
            rollout(&cl, &x, cfg.m).expect("rollout").0
        })
        .collect();
    let base = ValueFn::Quadratic(sol.p.clone());
    let trained = train_certificate(&cl, &base, &cfg, &data).expect("training");
    let final_loss = trained.history.last().expect("history").loss;
    assert!(final_loss <= 1e-6, "final training loss {final_loss} exceeds 1e-6");

    // Every held-out start must satisfy the averaged decrease.
    let mut held_out_rng = Rng::new(99);
    for _ in 0..500 {
        let x = sample_outside(&cl.env, cfg.delta, &mut held_out_rng);
        let (traj, _) = rollout(&cl, &x, cfg.m).expect("rollout");
        let f = residual_f(&trained.certificate, &traj).expect("residual");
        assert!(f <= 0.0, "held-out violation at {x:?}: F = {f}");
    }
}
