//! First-order optimization utilities: Adam with bias correction, a
//! reduce-on-plateau learning-rate schedule, and joint gradient clipping
//! by global norm.

/// Adam optimizer state for one flat parameter buffer.
///
/// Uses the standard moment estimates with bias correction
/// (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`). The learning rate is
/// passed per step so an external schedule can drive it.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    /// State for a buffer of `n` parameters.
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Applies one update of size `lr` to `params` given `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed under Adam");
        assert_eq!(grad.len(), self.m.len(), "gradient count changed under Adam");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Reduce-on-plateau learning-rate schedule: when the observed loss has
/// not improved for `patience` consecutive observations, the rate is
/// multiplied by `factor`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    /// Schedule starting at `lr`.
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, best: f64::INFINITY, stale: 0 }
    }

    /// Current learning rate.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one loss observation; returns `true` if the rate was
    /// reduced on this call.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr *= self.factor;
            self.stale = 0;
            return true;
        }
        false
    }
}

/// Scales the gradient groups jointly so their global Euclidean norm is
/// at most `max_norm`; returns the pre-clip norm. Groups below the
/// threshold are left bitwise unchanged.
pub fn clip_global_norm(groups: &mut [&mut [f64]], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let mut sq = 0.0;
    for g in groups.iter() {
        for v in g.iter() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in groups.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = vec![5.0, -3.0];
        let mut adam = Adam::new(2);
        for _ in 0..2000 {
            let grad: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
            adam.step(&mut params, &grad, 1e-2);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-3), "did not converge: {params:?}");
    }

    #[test]
    fn plateau_halves_after_patience_without_improvement() {
        let mut sched = PlateauScheduler::new(1.0, 0.5, 3);
        assert!(!sched.observe(1.0));
        assert!(!sched.observe(1.0));
        assert!(!sched.observe(1.0));
        assert!(sched.observe(1.0));
        assert!((sched.lr() - 0.5).abs() < 1e-15);
        // An improvement resets the stale counter; the next reduction
        // then needs three fresh non-improving observations.
        assert!(!sched.observe(0.5));
        assert!(!sched.observe(0.9));
        assert!(!sched.observe(0.9));
        assert!(sched.observe(0.9));
        assert!((sched.lr() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn global_clip_is_joint_across_groups() {
        let mut a = vec![3.0, 0.0];
        let mut b = vec![0.0, 4.0];
        let norm = {
            let mut groups: Vec<&mut [f64]> = vec![&mut a, &mut b];
            clip_global_norm(&mut groups, 2.5)
        };
        assert!((norm - 5.0).abs() < 1e-12);
        let after = (a.iter().chain(b.iter()).map(|v| v * v).sum::<f64>()).sqrt();
        assert!((after - 2.5).abs() < 1e-12);
        // Below the threshold nothing moves.
        let mut c = vec![0.3, 0.4];
        let before = c.clone();
        let mut groups: Vec<&mut [f64]> = vec![&mut c];
        clip_global_norm(&mut groups, 2.5);
        assert_eq!(c, before);
    }
}
