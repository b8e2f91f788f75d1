//! Certified discount-factor lower bounds for linear-quadratic regulators.
//!
//! A discounted LQR loop can be exponentially stable even when the
//! discounted value function fails the classical one-step Lyapunov
//! decrease test. This module certifies stability over a range of
//! discount factors by checking a weighted multi-step decrease
//! condition instead: the value must shrink *on average* over an
//! `M`-step window, with nonnegative per-step weights `sigma` that sum
//! to at least `M`. The classical test is the special case
//! `sigma = (M, 0, …, 0)`.
//!
//! The condition is decided through a small structured semidefinite
//! feasibility problem over auxiliary matrices `S_0 .. S_M`:
//!
//! * `M` quadratic-form blocks in `(x, u)` couple the auxiliary
//!   matrices to the plant and the stage cost ([`assemble_blocks`]);
//! * discount-dependent decay bounds force `S_1` and the tail matrices
//!   `S_2 .. S_M` to dominate scaled copies of the undiscounted value
//!   matrix `P`;
//! * each tail matrix is additionally capped above by `(P − Q)/M`, the
//!   one-step decrement of the undiscounted value function along the
//!   optimal loop. Without an upper cap the tail conditions would be
//!   satisfiable by arbitrarily large matrices and the test would pass
//!   vacuously for tail-heavy weight vectors.
//!
//! Feasibility at a fixed discount is decided by penalty descent over
//! Cholesky factors ([`feasible_at_gamma`]), the smallest certifiable
//! discount is located by bisection ([`certified_gamma_bound`]), and
//! the weight vector itself is optimized by exhaustive grid or
//! randomized search ([`search_weights`]). Dimensions are tiny (a
//! handful of states), so no general-purpose semidefinite solver is
//! needed; all eigenvalue work goes through [`crate::matlib`].

use crate::lqr::{solve_discounted_are, LinearSystem, LqrError};
use crate::matlib::{cholesky, forward_solve, norm2, sym_extreme_eigs, MatError, Matrix};
use crate::rng::Rng;
use crate::tol::DEFAULT;
use serde::Serialize;

/// Errors from weight validation and certificate construction.
#[derive(Debug, thiserror::Error)]
pub enum LmiError {
    /// The weight vector violates its defining constraints.
    #[error("invalid step weights: {0}")]
    InvalidWeights(String),
    /// Discount factor outside `(0, 1]`.
    #[error("discount factor must lie in (0, 1], got {0}")]
    InvalidGamma(f64),
    /// The stage-cost normalization must be a positive scalar.
    #[error("stage-cost normalization must be positive, got {0}")]
    InvalidVarpi(f64),
    /// Mismatched matrix-list shape.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// Underlying Riccati solve failed.
    #[error(transparent)]
    Lqr(#[from] LqrError),
    /// Underlying matrix factorization failed.
    #[error(transparent)]
    Mat(#[from] MatError),
}

/// Nonnegative per-step weights for an `M`-step average decrease test.
///
/// Invariants enforced at construction: every weight is finite and
/// nonnegative, and the weights sum to at least `M` (up to a small
/// slack). Vectors with some zero entries are allowed; steps with zero
/// weight simply drop out of the average.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(try_from = "StepWeightsJson")]
pub struct StepWeights {
    #[serde(rename = "M")]
    m: usize,
    sigma: Vec<f64>,
}

/// Interchange form of [`StepWeights`]; deserialization revalidates
/// through [`StepWeights::new`] so hand-edited files cannot smuggle in
/// invalid weights. The `M` field is accepted for symmetry with the
/// serialized form but must match the weight count when present.
#[derive(serde::Deserialize)]
struct StepWeightsJson {
    #[serde(rename = "M", default)]
    m: Option<usize>,
    sigma: Vec<f64>,
}

impl TryFrom<StepWeightsJson> for StepWeights {
    type Error = LmiError;

    fn try_from(json: StepWeightsJson) -> Result<Self, LmiError> {
        if let Some(m) = json.m {
            if m != json.sigma.len() {
                return Err(LmiError::InvalidWeights(format!(
                    "declared window length {m} does not match {} weights",
                    json.sigma.len()
                )));
            }
        }
        StepWeights::new(json.sigma)
    }
}

impl StepWeights {
    /// Validate and wrap a weight vector; the window length is its length.
    pub fn new(sigma: Vec<f64>) -> Result<Self, LmiError> {
        if sigma.is_empty() {
            return Err(LmiError::InvalidWeights("empty weight vector".into()));
        }
        if sigma.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LmiError::InvalidWeights(format!(
                "weights must be finite and nonnegative, got {sigma:?}"
            )));
        }
        let m = sigma.len();
        let sum: f64 = sigma.iter().sum();
        if sum < m as f64 - DEFAULT.weight_sum_slack {
            return Err(LmiError::InvalidWeights(format!(
                "weights sum to {sum}, need at least the window length {m}"
            )));
        }
        Ok(Self { m, sigma })
    }

    /// The one-step window `sigma = (1)`.
    pub fn one_step() -> Self {
        Self {
            m: 1,
            sigma: vec![1.0],
        }
    }

    /// The classical specialization `sigma = (M, 0, …, 0)`.
    pub fn classical(m: usize) -> Self {
        assert!(m >= 1, "window length must be at least 1");
        let mut sigma = vec![0.0; m];
        sigma[0] = m as f64;
        Self { m, sigma }
    }

    /// Window length `M`.
    pub fn horizon(&self) -> usize {
        self.m
    }

    /// The weight vector `sigma_1 .. sigma_M`.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }
}

/// Knobs for the penalty-descent feasibility search.
#[derive(Debug, Clone)]
pub struct SolverOpts {
    /// Independent starts; the first two are structured, the rest random.
    pub restarts: usize,
    /// Hard iteration cap per start.
    pub max_iters: usize,
    /// Consecutive non-improving iterations tolerated before a start is
    /// abandoned.
    pub patience: usize,
    /// Seed for the randomized starts.
    pub seed: u64,
    /// A candidate is feasible when every residual is at most this.
    pub residual_tol: f64,
    /// Descent aims residuals at `-aim_margin` to leave slack under
    /// `residual_tol`; boundary cases are reported infeasible.
    pub aim_margin: f64,
}

impl Default for SolverOpts {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iters: 400,
            patience: 30,
            seed: 0,
            residual_tol: DEFAULT.lmi_residual_tol,
            aim_margin: 1e-6,
        }
    }
}

/// Outcome of a feasibility search at one discount factor.
#[derive(Debug, Clone, Serialize)]
pub struct LmiCertificate {
    /// The weight vector the certificate refers to.
    pub weights: StepWeights,
    /// Auxiliary matrices `S_0 .. S_M` (a witness when `feasible`).
    pub s: Vec<Matrix>,
    /// Stage-cost normalization; fixed to 1 because the constraint
    /// system is jointly homogeneous in `(S_0..S_M, varpi)`.
    pub varpi: f64,
    /// For `i = 1..M`, the largest `alpha_i` with `alpha_i·P ⪯ S_i`
    /// (`P` the undiscounted value matrix), recovered from the witness.
    pub alpha: Vec<f64>,
    /// Discount lower bound reconstructed from `(sigma, varpi, alpha)`.
    pub certified_gamma: f64,
    /// Whether every residual met the tolerance.
    pub feasible: bool,
    /// Largest eigenvalue of each assembled block, in order.
    pub residuals: Vec<f64>,
}

/// Assemble the `M` quadratic-form blocks of the multi-step decrease test.
///
/// `s` must hold the `M + 1` auxiliary matrices `S_0 .. S_M`. Block 1
/// couples `S_0` and `S_1` to the plant; block `j ≥ 2` couples `S_0`
/// and `S_j`. Every block is `(n + m) × (n + m)` over stacked `(x, u)`
/// and must be negative semidefinite for the test to pass:
///
/// ```text
/// block 1:  [ (σ₁/M)·AᵀS₀A − S₀ + S₁ − ϖQ   (σ₁/M)·AᵀS₀B      ]
///           [ (σ₁/M)·BᵀS₀A                  (σ₁/M)·BᵀS₀B − ϖR ]
///
/// block j:  [ (σⱼ/M)·AᵀS₀A − Sⱼ − ϖQ        (σⱼ/M)·AᵀS₀B      ]
///           [ (σⱼ/M)·BᵀS₀A                  (σⱼ/M)·BᵀS₀B − ϖR ]
/// ```
pub fn assemble_blocks(
    sys: &LinearSystem,
    w: &StepWeights,
    s: &[Matrix],
    varpi: f64,
) -> Result<Vec<Matrix>, LmiError> {
    if !(varpi > 0.0) || !varpi.is_finite() {
        return Err(LmiError::InvalidVarpi(varpi));
    }
    let n = sys.state_dim();
    if s.len() != w.m + 1 {
        return Err(LmiError::DimensionMismatch {
            context: "auxiliary matrix count",
            expected: w.m + 1,
            got: s.len(),
        });
    }
    for si in s {
        if si.rows() != n || si.cols() != n {
            return Err(LmiError::DimensionMismatch {
                context: "auxiliary matrix shape",
                expected: n,
                got: si.rows(),
            });
        }
    }

    let mm = w.m as f64;
    let at_s0 = sys.a.t().matmul(&s[0]);
    let asa = at_s0.matmul(&sys.a);
    let asb = at_s0.matmul(&sys.b);
    let bsb = sys.b.t().matmul(&s[0]).matmul(&sys.b);
    let wq = sys.q.scale(varpi);
    let wr = sys.r.scale(varpi);

    let mut blocks = Vec::with_capacity(w.m);
    for j in 1..=w.m {
        let c = w.sigma[j - 1] / mm;
        let tl = if j == 1 {
            asa.scale(c).sub(&s[0]).add(&s[1]).sub(&wq)
        } else {
            asa.scale(c).sub(&s[j]).sub(&wq)
        };
        let tr = asb.scale(c);
        let br = bsb.scale(c).sub(&wr);
        blocks.push(pack_block(&tl, &tr, &br));
    }
    Ok(blocks)
}

/// Stack `[[tl, tr], [trᵀ, br]]` into one symmetric matrix.
fn pack_block(tl: &Matrix, tr: &Matrix, br: &Matrix) -> Matrix {
    let n = tl.rows();
    let m = br.rows();
    let mut out = Matrix::zeros(n + m, n + m);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = tl[(i, j)];
        }
        for j in 0..m {
            out[(i, n + j)] = tr[(i, j)];
            out[(n + j, i)] = tr[(i, j)];
        }
    }
    for i in 0..m {
        for j in 0..m {
            out[(n + i, n + j)] = br[(i, j)];
        }
    }
    out.symmetrized()
}

/// Largest `alpha` with `alpha·P ⪯ S`, i.e. the smallest eigenvalue of
/// the pencil of `S` against symmetric positive definite `P`, computed
/// by Cholesky whitening.
fn pencil_min_eig(p: &Matrix, s: &Matrix) -> Result<f64, MatError> {
    let l = cholesky(p, 0.0)?;
    let n = p.rows();
    // y = L⁻¹ S, column by column.
    let mut y = Matrix::zeros(n, n);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| s[(i, j)]).collect();
        let sol = forward_solve(&l, &col);
        for i in 0..n {
            y[(i, j)] = sol[i];
        }
    }
    // w = y L⁻ᵀ  ⇔  L wᵀ = yᵀ, again column by column.
    let mut w = Matrix::zeros(n, n);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| y[(j, i)]).collect();
        let sol = forward_solve(&l, &col);
        for i in 0..n {
            w[(j, i)] = sol[i];
        }
    }
    let (lo, _) = sym_extreme_eigs(&w.symmetrized())?;
    Ok(lo)
}

/// Discount lower bound implied by a witness: the largest of
/// `σ₁ϖ / (M(ϖ + α₁))` and `σᵢϖ / (M αᵢ)` over the tail steps.
fn gamma_from_alpha(w: &StepWeights, varpi: f64, alpha: &[f64]) -> f64 {
    let mm = w.m as f64;
    let mut g = w.sigma[0] * varpi / (mm * (varpi + alpha[0]));
    for i in 2..=w.m {
        if w.sigma[i - 1] > 0.0 {
            g = g.max(w.sigma[i - 1] * varpi / (mm * alpha[i - 1]));
        }
    }
    g
}

/// Constraint data for one feasibility query, shared across restarts.
struct FeasProblem<'a> {
    sys: &'a LinearSystem,
    w: &'a StepWeights,
    varpi: f64,
    /// Undiscounted value matrix.
    p: &'a Matrix,
    /// Upper cap `(ϖ/M)(P − Q)` for the tail matrices.
    cap: Matrix,
    /// Lower bound on `S_1` when the head coefficient is positive.
    head_lower: Option<Matrix>,
    /// Lower bounds on `S_i`, `i = 2..M`, present when `σ_i > 0`.
    tail_lower: Vec<Option<Matrix>>,
    /// Which of `S_0 .. S_M` are free variables (the rest are inert
    /// placeholders for zero-weight steps).
    active: Vec<bool>,
    n: usize,
    /// Entries per lower-triangular factor.
    tri: usize,
}

impl<'a> FeasProblem<'a> {
    fn new(
        sys: &'a LinearSystem,
        w: &'a StepWeights,
        gamma: f64,
        p: &'a Matrix,
        varpi: f64,
    ) -> Self {
        let n = sys.state_dim();
        let mm = w.m as f64;
        let cap = p.sub(&sys.q).scale(varpi / mm);
        let c_head = (w.sigma[0] / (mm * gamma) - 1.0) * varpi;
        let head_lower = (c_head > 0.0).then(|| p.scale(c_head));
        let tail_lower: Vec<Option<Matrix>> = (2..=w.m)
            .map(|i| {
                let si = w.sigma[i - 1];
                (si > 0.0).then(|| p.scale(si * varpi / (mm * gamma)))
            })
            .collect();
        let active: Vec<bool> = (0..=w.m)
            .map(|i| i <= 1 || w.sigma[i - 1] > 0.0)
            .collect();
        Self {
            sys,
            w,
            varpi,
            p,
            cap,
            head_lower,
            tail_lower,
            active,
            n,
            tri: n * (n + 1) / 2,
        }
    }

    fn param_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count() * self.tri
    }

    /// Expand packed lower-triangular factors into the full `S_0..S_M`
    /// list; inactive slots get a small positive definite placeholder.
    fn unpack(&self, x: &[f64]) -> Vec<Matrix> {
        let mut s = Vec::with_capacity(self.w.m + 1);
        let mut off = 0;
        for i in 0..=self.w.m {
            if self.active[i] {
                let mut l = Matrix::zeros(self.n, self.n);
                let mut k = off;
                for r in 0..self.n {
                    for c in 0..=r {
                        l[(r, c)] = x[k];
                        k += 1;
                    }
                }
                off += self.tri;
                let mut si = l.matmul(&l.t());
                for d in 0..self.n {
                    si[(d, d)] += DEFAULT.lmi_psd_shift;
                }
                s.push(si);
            } else {
                s.push(Matrix::identity(self.n).scale(1e-6));
            }
        }
        s
    }

    /// Penalty (hinged residual sum) and worst residual of a candidate.
    ///
    /// Blocks for zero-weight tail steps are constant in the free
    /// variables and always satisfied, so they are skipped here and
    /// only reported in the final certificate.
    fn eval(&self, s: &[Matrix]) -> (f64, f64) {
        let aim = 1e-6;
        let mut pen = 0.0;
        let mut worst = f64::NEG_INFINITY;
        let absorb = |r: f64, pen: &mut f64, worst: &mut f64| {
            *pen += (r + aim).max(0.0);
            if r > *worst {
                *worst = r;
            }
        };
        let blocks =
            assemble_blocks(self.sys, self.w, s, self.varpi).expect("validated dimensions");
        for (j, b) in blocks.iter().enumerate() {
            if j > 0 && self.w.sigma[j] == 0.0 {
                continue;
            }
            let (_, hi) = sym_extreme_eigs(b).expect("symmetric block");
            absorb(hi, &mut pen, &mut worst);
        }
        if let Some(hl) = &self.head_lower {
            let (_, hi) = sym_extreme_eigs(&hl.sub(&s[1])).expect("symmetric");
            absorb(hi, &mut pen, &mut worst);
        }
        for (idx, low) in self.tail_lower.iter().enumerate() {
            if let Some(low) = low {
                let si = &s[idx + 2];
                let (_, hi) = sym_extreme_eigs(&low.sub(si)).expect("symmetric");
                absorb(hi, &mut pen, &mut worst);
                let (_, hi) = sym_extreme_eigs(&si.sub(&self.cap)).expect("symmetric");
                absorb(hi, &mut pen, &mut worst);
            }
        }
        (pen, worst)
    }

    fn eval_params(&self, x: &[f64]) -> (f64, f64) {
        self.eval(&self.unpack(x))
    }

    /// Any tail window `lower ⪯ S_i ⪯ cap` that is empty makes the
    /// whole problem infeasible regardless of the search.
    fn tail_window_empty(&self) -> bool {
        self.tail_lower.iter().flatten().any(|low| {
            let (lo, _) = sym_extreme_eigs(&self.cap.sub(low)).expect("symmetric");
            lo < -1e-9
        })
    }

    /// Structured or random initial factor entries for restart `which`.
    fn seed_params(&self, which: usize, rng: &mut Rng) -> Vec<f64> {
        let n = self.n;
        let scale = (self.p.entries().iter().step_by(n + 1).sum::<f64>() / n as f64).max(1e-12);
        let chol_entries = |target: &Matrix, out: &mut Vec<f64>| {
            let mut t = target.clone();
            for d in 0..n {
                t[(d, d)] = (t[(d, d)] - DEFAULT.lmi_psd_shift).max(1e-10);
            }
            let l = cholesky(&t, 0.0)
                .or_else(|_| cholesky(&t, 1e-8 * (1.0 + t.norm_max())))
                .unwrap_or_else(|_| Matrix::identity(n).scale((1e-6 * scale).sqrt()));
            for r in 0..n {
                for c in 0..=r {
                    out.push(l[(r, c)]);
                }
            }
        };
        let mut x = Vec::with_capacity(self.param_count());
        match which {
            0 | 1 => {
                // Small S_0 keeps the blocks dominated by the stage
                // cost; S_1 hugs its lower bound; tail matrices sit in
                // (or near the middle of) their windows.
                let s0_scale = if which == 0 { 1e-4 } else { 1e-7 };
                chol_entries(&Matrix::identity(n).scale(s0_scale * scale), &mut x);
                let margin = Matrix::identity(n).scale(1e-6 * scale.max(1.0));
                let s1 = match &self.head_lower {
                    Some(hl) => hl.add(&margin),
                    None => margin.clone(),
                };
                chol_entries(&s1, &mut x);
                for (idx, low) in self.tail_lower.iter().enumerate() {
                    if self.active[idx + 2] {
                        let low = low.as_ref().expect("active tail has a lower bound");
                        let mid = if which == 0 {
                            low.add(&self.cap).scale(0.5)
                        } else {
                            low.scale(0.9).add(&self.cap.scale(0.1))
                        };
                        chol_entries(&mid, &mut x);
                    }
                }
            }
            _ => {
                let mag = scale.sqrt() * 10f64.powf(rng.range(-2.5, 0.0));
                for i in 0..=self.w.m {
                    if !self.active[i] {
                        continue;
                    }
                    for r in 0..n {
                        for c in 0..=r {
                            let v = if r == c {
                                rng.normal().abs() * mag + 1e-8
                            } else {
                                rng.normal() * 0.3 * mag
                            };
                            x.push(v);
                        }
                    }
                }
            }
        }
        debug_assert_eq!(x.len(), self.param_count());
        x
    }
}

/// Penalty descent with central-difference gradients and backtracking
/// line search. Returns the parameters together with their penalty and
/// worst residual; exits early as soon as the candidate is feasible.
fn descend(prob: &FeasProblem, mut x: Vec<f64>, opts: &SolverOpts) -> (Vec<f64>, f64, f64) {
    let (mut pen, mut worst) = prob.eval_params(&x);
    if worst <= opts.residual_tol {
        return (x, pen, worst);
    }
    let npar = x.len();
    let mut g = vec![0.0; npar];
    let mut step = 0.1;
    let mut stall = 0usize;
    for _ in 0..opts.max_iters {
        if pen == 0.0 {
            break;
        }
        for k in 0..npar {
            let h = 1e-6 * (1.0 + x[k].abs());
            let orig = x[k];
            x[k] = orig + h;
            let (pp, _) = prob.eval_params(&x);
            x[k] = orig - h;
            let (pm, _) = prob.eval_params(&x);
            x[k] = orig;
            g[k] = (pp - pm) / (2.0 * h);
        }
        let gn = norm2(&g);
        if gn < 1e-14 {
            break;
        }
        let mut t = step;
        let mut improved = false;
        for _ in 0..30 {
            let xt: Vec<f64> = x
                .iter()
                .zip(&g)
                .map(|(xi, gi)| xi - t * gi / gn)
                .collect();
            let (pt, rt) = prob.eval_params(&xt);
            if rt <= opts.residual_tol {
                return (xt, pt, rt);
            }
            if pt < pen {
                let gain = pen - pt;
                x = xt;
                pen = pt;
                worst = rt;
                step = (t * 1.8).min(10.0);
                improved = true;
                stall = if gain < 1e-12 { stall + 1 } else { 0 };
                break;
            }
            t *= 0.5;
        }
        if !improved {
            step *= 0.5;
            stall += 1;
        }
        if stall >= opts.patience {
            break;
        }
    }
    (x, pen, worst)
}

/// Decide feasibility of the multi-step decrease test at a fixed
/// discount factor `gamma ∈ (0, 1]`.
///
/// Searches for auxiliary matrices making every assembled block
/// negative semidefinite while the discount-dependent decay bounds and
/// tail caps hold. Returns a certificate with `feasible = true` and a
/// witness, or `feasible = false` with the best residuals found; a
/// stagnating search is reported as infeasible rather than an error.
pub fn feasible_at_gamma(
    sys: &LinearSystem,
    w: &StepWeights,
    gamma: f64,
    opts: &SolverOpts,
) -> Result<LmiCertificate, LmiError> {
    if !gamma.is_finite() || gamma <= 0.0 || gamma > 1.0 {
        return Err(LmiError::InvalidGamma(gamma));
    }
    let p = solve_discounted_are(sys, 1.0)?.p;
    solve_feasibility(sys, w, gamma, opts, &p)
}

fn solve_feasibility(
    sys: &LinearSystem,
    w: &StepWeights,
    gamma: f64,
    opts: &SolverOpts,
    p: &Matrix,
) -> Result<LmiCertificate, LmiError> {
    let varpi = 1.0;
    let prob = FeasProblem::new(sys, w, gamma, p, varpi);
    let mut rng = Rng::new(opts.seed).split(0x4C4D49);

    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    if !prob.tail_window_empty() {
        for r in 0..opts.restarts.max(1) {
            let x0 = prob.seed_params(r, &mut rng);
            let (x, pen, worst) = descend(&prob, x0, opts);
            let feasible = worst <= opts.residual_tol;
            if best.as_ref().map_or(true, |(_, _, bw)| worst < *bw) {
                best = Some((x, pen, worst));
            }
            if feasible {
                break;
            }
        }
    }
    let x = match &best {
        Some((x, _, _)) => x.clone(),
        None => prob.seed_params(0, &mut rng),
    };
    let s = prob.unpack(&x);

    // Decoupled verification: re-assemble everything and measure.
    let blocks = assemble_blocks(sys, w, &s, varpi)?;
    let mut residuals = Vec::with_capacity(w.horizon());
    let mut overall = f64::NEG_INFINITY;
    for b in &blocks {
        let (_, hi) = sym_extreme_eigs(b)?;
        residuals.push(hi);
    }
    for (j, r) in residuals.iter().enumerate() {
        if j == 0 || w.sigma()[j] > 0.0 {
            overall = overall.max(*r);
        }
    }
    if let Some(hl) = &prob.head_lower {
        overall = overall.max(sym_extreme_eigs(&hl.sub(&s[1]))?.1);
    }
    for (idx, low) in prob.tail_lower.iter().enumerate() {
        if let Some(low) = low {
            overall = overall.max(sym_extreme_eigs(&low.sub(&s[idx + 2]))?.1);
            overall = overall.max(sym_extreme_eigs(&s[idx + 2].sub(&prob.cap))?.1);
        }
    }
    let feasible = overall <= opts.residual_tol;

    let mut alpha = Vec::with_capacity(w.horizon());
    for si in s.iter().skip(1) {
        alpha.push(pencil_min_eig(p, si)?);
    }
    let certified_gamma = gamma_from_alpha(w, varpi, &alpha);

    Ok(LmiCertificate {
        weights: w.clone(),
        s,
        varpi,
        alpha,
        certified_gamma,
        feasible,
        residuals,
    })
}

/// Shared data for repeated bound evaluations against one system.
struct BoundContext<'a> {
    sys: &'a LinearSystem,
    p: Matrix,
    /// Largest `mu` with `mu·P ⪯ P − Q`; tail step `i` can only be
    /// certified at discounts of at least `sigma_i / mu`.
    mu_tail: f64,
    opts: SolverOpts,
}

impl<'a> BoundContext<'a> {
    fn new(sys: &'a LinearSystem, opts: SolverOpts) -> Result<Self, LmiError> {
        let p = solve_discounted_are(sys, 1.0)?.p;
        let mu_tail = pencil_min_eig(&p, &p.sub(&sys.q))?;
        Ok(Self {
            sys,
            p,
            mu_tail,
            opts,
        })
    }

    fn feasible(&self, w: &StepWeights, gamma: f64) -> Option<LmiCertificate> {
        solve_feasibility(self.sys, w, gamma, &self.opts, &self.p)
            .ok()
            .filter(|c| c.feasible)
    }

    /// Bisect to the smallest certifiable discount (within `tol`).
    fn bound(&self, w: &StepWeights, tol: f64) -> (f64, Option<LmiCertificate>) {
        let tol = if tol.is_finite() && tol > 0.0 { tol } else { 1e-3 };
        // Exact bracket from the tail windows: below `sigma_i / mu`
        // the window for `S_i` is empty.
        let mut lo = DEFAULT.gamma_lower_bracket;
        let mut lo_known_infeasible = false;
        for &si in w.sigma().iter().skip(1) {
            if si > 0.0 {
                if self.mu_tail <= 1e-12 {
                    return (1.0, None);
                }
                let need = si / self.mu_tail;
                if need - tol > lo {
                    lo = need - tol;
                    lo_known_infeasible = true;
                }
            }
        }
        if lo >= 1.0 {
            return (1.0, None);
        }
        let Some(top) = self.feasible(w, 1.0) else {
            return (1.0, None);
        };
        let mut witness = top;
        let mut hi = 1.0;
        if !lo_known_infeasible {
            if let Some(c) = self.feasible(w, lo) {
                return (lo, Some(c));
            }
        }
        while hi - lo > tol {
            let mid = 0.5 * (hi + lo);
            match self.feasible(w, mid) {
                Some(c) => {
                    hi = mid;
                    witness = c;
                }
                None => lo = mid,
            }
        }
        (hi, Some(witness))
    }
}

/// Smallest discount factor (within `tol`) at which the multi-step
/// decrease test passes for the given weights; `1.0` when no discount
/// below one can be certified.
pub fn certified_gamma_bound(sys: &LinearSystem, w: &StepWeights, tol: f64) -> f64 {
    certified_gamma_bound_with_witness(sys, w, tol).0
}

/// Like [`certified_gamma_bound`], additionally returning the witness
/// certificate found at the feasible end of the bisection.
pub fn certified_gamma_bound_with_witness(
    sys: &LinearSystem,
    w: &StepWeights,
    tol: f64,
) -> (f64, Option<LmiCertificate>) {
    match BoundContext::new(sys, SolverOpts::default()) {
        Ok(ctx) => ctx.bound(w, tol),
        Err(_) => (1.0, None),
    }
}

/// Search the weight simplex `{sigma ≥ 0, Σ sigma = M}` for the vector
/// with the smallest certifiable discount bound.
///
/// For `M ≤ 3` the simplex is scanned exhaustively at resolution
/// `0.02·M`; for larger windows a structured one-dominant family is
/// line-searched, random samples are drawn, and the best point is
/// refined by pairwise-transfer coordinate descent, all within
/// `budget` bound evaluations. Ties break to the lexicographically
/// smallest vector; results are deterministic for a fixed seed.
pub fn search_weights(
    sys: &LinearSystem,
    m: usize,
    budget: usize,
    seed: u64,
) -> (StepWeights, f64) {
    assert!(m >= 1, "window length must be at least 1");
    const TOL: f64 = 1e-3;
    let ctx = match BoundContext::new(sys, SolverOpts::default()) {
        Ok(ctx) => ctx,
        Err(_) => return (StepWeights::classical(m), 1.0),
    };

    let mut best: Option<(StepWeights, f64)> = None;
    let consider = |sigma: Vec<f64>, best: &mut Option<(StepWeights, f64)>| -> f64 {
        let Ok(w) = StepWeights::new(sigma) else {
            return 1.0;
        };
        let (b, _) = ctx.bound(&w, TOL);
        let better = match best {
            None => true,
            Some((bw, bb)) => b < *bb || (b == *bb && w.sigma() < bw.sigma()),
        };
        if better {
            *best = Some((w, b));
        }
        b
    };

    if m == 1 {
        consider(vec![1.0], &mut best);
    } else if m <= 3 {
        // Exhaustive simplex grid: compositions of `steps` parts of
        // size M/steps, enumerated in lexicographically ascending
        // order so the first minimizer is the lex-smallest.
        let steps = 50usize; // M / (0.02·M)
        let unit = m as f64 / steps as f64;
        if m == 2 {
            for k1 in 0..=steps {
                consider(vec![k1 as f64 * unit, (steps - k1) as f64 * unit], &mut best);
            }
        } else {
            for k1 in 0..=steps {
                for k2 in 0..=(steps - k1) {
                    let k3 = steps - k1 - k2;
                    consider(
                        vec![k1 as f64 * unit, k2 as f64 * unit, k3 as f64 * unit],
                        &mut best,
                    );
                }
            }
        }
    } else {
        let budget = budget.max(12);
        let mut used = 0usize;
        let spend = |sigma: Vec<f64>,
                         best: &mut Option<(StepWeights, f64)>,
                         used: &mut usize|
         -> Option<f64> {
            if *used >= budget {
                return None;
            }
            *used += 1;
            Some(consider(sigma, best))
        };
        // One-dominant family: first weight t, remaining mass split
        // evenly over the tail. The bound is unimodal in t, so a
        // coarse scan plus golden-section refinement nails it.
        let tail_sigma = |t: f64| -> Vec<f64> {
            let mut v = vec![(m as f64 - t) / (m as f64 - 1.0); m];
            v[0] = t;
            v
        };
        let mf = m as f64;
        let mut coarse: Vec<(f64, f64)> = Vec::new();
        for frac in [0.45, 0.55, 0.6, 0.65, 0.7, 0.75, 0.85] {
            let t = frac * mf;
            if let Some(b) = spend(tail_sigma(t), &mut best, &mut used) {
                coarse.push((t, b));
            }
        }
        if let Some(min_idx) = coarse
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .map(|(i, _)| i)
        {
            let lo_t = coarse[min_idx.saturating_sub(1)].0;
            let hi_t = coarse[(min_idx + 1).min(coarse.len() - 1)].0;
            if hi_t > lo_t {
                // Golden-section refinement on the bracket.
                let phi = 0.5 * (5f64.sqrt() - 1.0);
                let (mut a, mut b) = (lo_t, hi_t);
                let mut c = b - phi * (b - a);
                let mut d = a + phi * (b - a);
                let mut fc = spend(tail_sigma(c), &mut best, &mut used);
                let mut fd = spend(tail_sigma(d), &mut best, &mut used);
                for _ in 0..14 {
                    match (fc, fd) {
                        (Some(vc), Some(vd)) => {
                            if vc <= vd {
                                b = d;
                                d = c;
                                fd = Some(vc);
                                c = b - phi * (b - a);
                                fc = spend(tail_sigma(c), &mut best, &mut used);
                            } else {
                                a = c;
                                c = d;
                                fc = Some(vd);
                                d = a + phi * (b - a);
                                fd = spend(tail_sigma(d), &mut best, &mut used);
                            }
                        }
                        _ => break,
                    }
                }
            }
        }
        // Random simplex samples.
        let mut rng = Rng::new(seed).split(0x5753);
        let n_rand = budget.saturating_sub(used).min(15);
        for _ in 0..n_rand {
            let mut g: Vec<f64> = (0..m).map(|_| -rng.next_f64().max(1e-12).ln()).collect();
            let total: f64 = g.iter().sum();
            for v in &mut g {
                *v *= mf / total;
            }
            spend(g, &mut best, &mut used);
        }
        // Pairwise-transfer coordinate descent from the incumbent.
        for delta_frac in [0.05, 0.01] {
            let delta = delta_frac * mf;
            loop {
                let Some((bw, _)) = &best else { break };
                let base = bw.sigma().to_vec();
                let mut improved = false;
                'outer: for i in 0..m {
                    for j in 0..m {
                        if i == j || base[i] < delta {
                            continue;
                        }
                        let mut cand = base.clone();
                        cand[i] -= delta;
                        cand[j] += delta;
                        let before = best.as_ref().map(|(_, b)| *b).unwrap_or(1.0);
                        match spend(cand, &mut best, &mut used) {
                            Some(b) if b < before => {
                                improved = true;
                                break 'outer;
                            }
                            Some(_) => {}
                            None => break 'outer,
                        }
                    }
                }
                if !improved || used >= budget {
                    break;
                }
            }
        }
    }
    best.expect("at least one candidate is always evaluated")
}
