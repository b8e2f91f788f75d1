//! Command-line front end: reproducible experiment drivers over the
//! certification, training, synthesis, and verification modules.
//!
//! Subcommands: `lqr-bound`, `certify-linear`, `train-certificate`,
//! `synthesize`, `verify`, `roa-volume`. Every run reads an optional
//! `--config FILE` (JSON; omitted fields take documented defaults),
//! derives all randomness from one root seed (`--seed` overrides the
//! config's), and echoes the fully resolved configuration to
//! `<out>/config.json`, so re-running with that file alone reproduces
//! every artifact bit for bit. All outputs are UTF-8 CSV (headers
//! always present) or JSON.
//!
//! CSV schemas:
//! - `weight_sweep.csv`: `sigma1,certified_gamma_bound`
//! - `horizon_sweep.csv` / `m_sweep.csv`: `m,certified_gamma_bound,weights`
//!   (weights semicolon-separated)
//! - `training_history.csv`: `epoch,loss,learning_rate`
//! - `weight_concentration.csv`: `bin,fraction`
//! - `seeds.csv`: `seed,status,rho,final_loss,pass_fraction,volume,volume_stderr`
//! - `counterexamples.csv`: `x0..x{n-1},f_value,v_value`

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{rollout, ClosedLoopEnv, DynError, OpenLoopEnv, Policy};
use crate::glf::{GeneralizedCertificate, GlfError, ValueFn};
use crate::lmi::{
    certified_gamma_bound_with_witness, search_weights, LmiError, StepWeights,
};
use crate::lqr::{solve_discounted_are, true_gamma_threshold, LinearSystem, LqrError};
use crate::matlib::Matrix;
use crate::net::{
    fit_discounted_value, train_certificate, train_synthesis, weight_concentration, FitConfig,
    Mlp, NetError, TrainConfig,
};
use crate::rng::Rng;
use crate::synthverify::{pgd_falsify, roa_volume, verify_sampled, Counterexample, VerifyError};

/// Errors surfaced by the command-line front end.
#[derive(Debug, Error)]
pub enum CliError {
    /// Reading or writing a file failed.
    #[error("{path}: {source}")]
    Io {
        /// Offending path.
        path: String,
        /// Underlying I/O error.
        source: std::io::Error,
    },
    /// An invalid or inconsistent configuration value.
    #[error("configuration: {0}")]
    Config(String),
    /// Linear-quadratic solver failure.
    #[error(transparent)]
    Lqr(#[from] LqrError),
    /// Weight or feasibility-certificate failure.
    #[error(transparent)]
    Lmi(#[from] LmiError),
    /// Certificate evaluation failure.
    #[error(transparent)]
    Glf(#[from] GlfError),
    /// Network or training failure.
    #[error(transparent)]
    Net(#[from] NetError),
    /// Simulation failure.
    #[error(transparent)]
    Dyn(#[from] DynError),
    /// Sampled verification failure.
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

#[derive(Parser)]
#[command(
    name = "glyap",
    version,
    about = "Stability certification via weighted multi-step Lyapunov conditions"
)]
struct Cli {
    /// Root seed for all randomness in the run (overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving all artifacts (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON configuration file; omitted fields take documented defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certified discount bounds for a linear system: a weight sweep at
    /// fixed window length or a best-bound-per-window table.
    LqrBound,
    /// One feasibility certificate (weights, witness, certified
    /// discount) for a linear system.
    CertifyLinear,
    /// Train a certificate for a fixed policy, then verify it by
    /// sampling and summarize the learned step weights.
    TrainCertificate,
    /// Jointly train controllers and certificates over several seeds
    /// and tabulate certified-region volumes.
    Synthesize,
    /// Check a stored certificate by sampling plus gradient-ascent
    /// falsification; the exit status signals pass or fail.
    Verify,
    /// Monte Carlo volume of a certificate's sublevel set.
    RoaVolume,
}

/// Binary entry point: parses arguments, dispatches, and maps errors to
/// exit code 2 (code 1 is reserved for a failed `verify`).
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, CliError> {
    fs::create_dir_all(&cli.out).map_err(|e| CliError::Io {
        path: cli.out.display().to_string(),
        source: e,
    })?;
    match cli.command {
        Command::LqrBound => cmd_lqr_bound(cli),
        Command::CertifyLinear => cmd_certify_linear(cli),
        Command::TrainCertificate => cmd_train_certificate(cli),
        Command::Synthesize => cmd_synthesize(cli),
        Command::Verify => cmd_verify(cli),
        Command::RoaVolume => cmd_roa_volume(cli),
    }
}

// ── shared plumbing ──────────────────────────────────────────────────────

/// Derives the seed of one pipeline stage from the run's root seed, so
/// every random choice in a command flows from `--seed` alone.
fn stage_seed(root: u64, stage: u64) -> u64 {
    Rng::new(root).split(stage).next_u64()
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("serializing {name}: {e}")))?;
    write_file(dir, name, &format!("{text}\n"))
}

/// Loads the command's configuration, falling back to defaults when no
/// file was given, and lets `--seed` override the config's root seed.
fn load_config<T: DeserializeOwned + Default>(cli: &Cli) -> Result<T, CliError> {
    match &cli.config {
        None => Ok(T::default()),
        Some(path) => serde_json::from_str(&read_file(path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display()))),
    }
}

/// Echoes the resolved configuration (with a `command` tag) into the
/// output directory; the file parses back as the same configuration.
fn echo_config<T: Serialize>(cli: &Cli, command: &str, cfg: &T) -> Result<(), CliError> {
    let mut value = serde_json::to_value(cfg)
        .map_err(|e| CliError::Config(format!("config echo: {e}")))?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("command".to_string(), serde_json::Value::String(command.to_string()));
    }
    write_json(&cli.out, "config.json", &value)
}

/// Shortest round-tripping decimal rendering, shared by all CSV output.
fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn default_system() -> serde_json::Value {
    serde_json::json!({"A": [[2.0]], "B": [[1.0]], "Q": [[1.0]], "R": [[1.0]]})
}

fn parse_system(value: &serde_json::Value) -> Result<LinearSystem, CliError> {
    Ok(LinearSystem::from_json(&value.to_string())?)
}

/// Environment selector: a benchmark name, or `{"linear": {A,B,Q,R}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSpec {
    /// One of the named benchmark environments.
    Named(String),
    /// A linear plant given inline.
    Linear {
        /// System matrices `{A, B, Q, R}` as nested row arrays.
        linear: serde_json::Value,
    },
}

impl EnvSpec {
    fn build(&self) -> Result<OpenLoopEnv, CliError> {
        match self {
            EnvSpec::Named(name) => Ok(OpenLoopEnv::by_name(name)?),
            EnvSpec::Linear { linear } => Ok(OpenLoopEnv::linear(parse_system(linear)?)),
        }
    }

    fn system(&self) -> Result<LinearSystem, CliError> {
        match self {
            EnvSpec::Linear { linear } => parse_system(linear),
            EnvSpec::Named(name) => Err(CliError::Config(format!(
                "this option needs an inline linear system, not the named environment {name:?}"
            ))),
        }
    }
}

/// Policy selector: `"zero"`, `"swing-up"`, `{"lqr": gamma}` (linear
/// plants only), `{"gain": rows}`, or `{"file": path}` holding a stored
/// controller network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicySpec {
    /// `"zero"` or `"swing-up"`.
    Named(String),
    /// Optimal discounted state feedback for the inline linear plant.
    Lqr {
        /// Discount factor of the feedback design.
        lqr: f64,
    },
    /// Explicit linear gain rows (`control_dim x state_dim`).
    Gain {
        /// Gain matrix rows.
        gain: Vec<Vec<f64>>,
    },
    /// Stored controller network (JSON).
    File {
        /// Path of the controller file.
        file: PathBuf,
    },
}

impl PolicySpec {
    fn build(&self, env: &EnvSpec) -> Result<Policy, CliError> {
        match self {
            PolicySpec::Named(name) if name == "zero" => Ok(Policy::Zero),
            PolicySpec::Named(name) if name == "swing-up" => Ok(Policy::swing_up()?),
            PolicySpec::Named(name) => Err(CliError::Config(format!(
                "unknown policy {name:?}; expected \"zero\", \"swing-up\", {{\"lqr\": gamma}}, {{\"gain\": rows}}, or {{\"file\": path}}"
            ))),
            PolicySpec::Lqr { lqr } => {
                let sol = solve_discounted_are(&env.system()?, *lqr)?;
                Ok(Policy::Linear { k: sol.k })
            }
            PolicySpec::Gain { gain } => {
                let cols = gain.first().map(Vec::len).unwrap_or(0);
                if gain.is_empty() || cols == 0 || gain.iter().any(|r| r.len() != cols) {
                    return Err(CliError::Config("gain rows must be non-empty and equal-length".into()));
                }
                let rows: Vec<&[f64]> = gain.iter().map(Vec::as_slice).collect();
                Ok(Policy::Linear { k: Matrix::from_rows(&rows) })
            }
            PolicySpec::File { file } => {
                let net: Mlp = serde_json::from_str(&read_file(file)?)
                    .map_err(|e| CliError::Config(format!("{}: {e}", file.display())))?;
                Ok(Policy::Net { net })
            }
        }
    }
}

/// Base-value selector for certificate training: `"zero"`, `"fit"`
/// (regression onto simulated discounted cost), `"are"` (the discounted
/// quadratic value of an inline linear plant), or `{"file": path}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaseSpec {
    /// `"zero"`, `"fit"`, or `"are"`.
    Named(String),
    /// Stored value function (JSON).
    File {
        /// Path of the value-function file.
        file: PathBuf,
    },
}

// ── lqr-bound ────────────────────────────────────────────────────────────

/// Sweep axis for [`cmd_lqr_bound`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Bound as a function of the first weight at fixed window length.
    WeightSweep,
    /// Best bound per window length `1..=m_max`.
    HorizonSweep,
}

/// Configuration of `lqr-bound`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LqrBoundConfig {
    /// Linear plant `{A, B, Q, R}`.
    pub system: serde_json::Value,
    /// Which curve to emit.
    pub mode: SweepMode,
    /// Window length for the weight sweep.
    pub m: usize,
    /// Largest window length in the horizon sweep.
    pub m_max: usize,
    /// Grid points of the weight sweep.
    pub sweep_points: usize,
    /// Absolute bisection tolerance on every bound.
    pub tol: f64,
    /// Bound evaluations granted to the weight search per window.
    pub budget: usize,
    /// Root seed.
    pub seed: u64,
}

impl Default for LqrBoundConfig {
    fn default() -> Self {
        Self {
            system: default_system(),
            mode: SweepMode::HorizonSweep,
            m: 2,
            m_max: 6,
            sweep_points: 81,
            tol: 1e-3,
            budget: 60,
            seed: 0,
        }
    }
}

fn cmd_lqr_bound(cli: &Cli) -> Result<ExitCode, CliError> {
    let mut cfg: LqrBoundConfig = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    echo_config(cli, "lqr-bound", &cfg)?;
    let sys = parse_system(&cfg.system)?;
    let true_threshold = true_gamma_threshold(&sys, cfg.tol).ok();

    match cfg.mode {
        SweepMode::WeightSweep => {
            if cfg.m == 0 || cfg.sweep_points < 2 {
                return Err(CliError::Config(
                    "weight sweep needs m >= 1 and at least two grid points".into(),
                ));
            }
            let m = cfg.m as f64;
            let mut csv = String::from("sigma1,certified_gamma_bound\n");
            let mut best = (f64::INFINITY, 0.0);
            for i in 0..cfg.sweep_points {
                let sigma1 = m * i as f64 / (cfg.sweep_points - 1) as f64;
                // Remaining mass split equally over the later steps; for
                // the two-step window this is exactly (sigma1, M - sigma1).
                let mut sigma = vec![sigma1];
                if cfg.m > 1 {
                    sigma.extend(vec![(m - sigma1) / (cfg.m - 1) as f64; cfg.m - 1]);
                }
                let bound = match StepWeights::new(sigma) {
                    Ok(w) => certified_gamma_bound_with_witness(&sys, &w, cfg.tol).0,
                    Err(_) => 1.0,
                };
                if bound < best.0 {
                    best = (bound, sigma1);
                }
                csv.push_str(&format!("{},{}\n", fmt_f(sigma1), fmt_f(bound)));
            }
            write_file(&cli.out, "weight_sweep.csv", &csv)?;
            write_json(
                &cli.out,
                "summary.json",
                &serde_json::json!({
                    "mode": "weight-sweep",
                    "m": cfg.m,
                    "min_bound": best.0,
                    "argmin_sigma1": best.1,
                    "true_threshold": true_threshold,
                }),
            )?;
            println!("minimum certified bound {} at sigma1 = {}", fmt_f(best.0), fmt_f(best.1));
        }
        SweepMode::HorizonSweep => {
            if cfg.m_max == 0 {
                return Err(CliError::Config("horizon sweep needs m_max >= 1".into()));
            }
            let mut csv = String::from("m,certified_gamma_bound,weights\n");
            let mut rows = Vec::new();
            for m in 1..=cfg.m_max {
                let (w, bound) = search_weights(&sys, m, cfg.budget, cfg.seed);
                let weights: Vec<String> = w.sigma().iter().map(|v| fmt_f(*v)).collect();
                println!("M={m}: bound {} with weights ({})", fmt_f(bound), weights.join(", "));
                csv.push_str(&format!("{m},{},{}\n", fmt_f(bound), weights.join(";")));
                rows.push(serde_json::json!({
                    "m": m,
                    "bound": bound,
                    "weights": w.sigma(),
                }));
            }
            write_file(&cli.out, "horizon_sweep.csv", &csv)?;
            write_json(
                &cli.out,
                "summary.json",
                &serde_json::json!({
                    "mode": "horizon-sweep",
                    "rows": rows,
                    "true_threshold": true_threshold,
                }),
            )?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

// ── certify-linear ───────────────────────────────────────────────────────

/// Weight selector: `"search"` or an explicit vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightsSpec {
    /// `"search"`: optimize the weights over the simplex.
    Named(String),
    /// Fixed weight vector (must sum to at least its length).
    Explicit(Vec<f64>),
}

/// Configuration of `certify-linear`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyLinearConfig {
    /// Linear plant `{A, B, Q, R}`.
    pub system: serde_json::Value,
    /// Weight vector or `"search"`.
    pub weights: WeightsSpec,
    /// Window length used when searching.
    pub m: usize,
    /// Absolute bisection tolerance.
    pub tol: f64,
    /// Bound evaluations granted to the weight search.
    pub budget: usize,
    /// When positive, also emit the best bound for every window length
    /// `1..=sweep_m`.
    pub sweep_m: usize,
    /// Root seed.
    pub seed: u64,
}

impl Default for CertifyLinearConfig {
    fn default() -> Self {
        Self {
            system: default_system(),
            weights: WeightsSpec::Named("search".to_string()),
            m: 2,
            tol: 1e-3,
            budget: 60,
            sweep_m: 0,
            seed: 0,
        }
    }
}

fn cmd_certify_linear(cli: &Cli) -> Result<ExitCode, CliError> {
    let mut cfg: CertifyLinearConfig = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    echo_config(cli, "certify-linear", &cfg)?;
    let sys = parse_system(&cfg.system)?;

    let weights = match &cfg.weights {
        WeightsSpec::Explicit(sigma) => StepWeights::new(sigma.clone())?,
        WeightsSpec::Named(name) if name == "search" => {
            if cfg.m == 0 {
                return Err(CliError::Config("searching weights needs m >= 1".into()));
            }
            search_weights(&sys, cfg.m, cfg.budget, cfg.seed).0
        }
        WeightsSpec::Named(name) => {
            return Err(CliError::Config(format!(
                "unknown weights {name:?}; expected \"search\" or an explicit vector"
            )));
        }
    };
    let (bound, witness) = certified_gamma_bound_with_witness(&sys, &weights, cfg.tol);
    let feasible = witness.as_ref().map(|c| c.feasible).unwrap_or(false);
    println!(
        "certified discount bound {} with weights ({}) [feasible: {feasible}]",
        fmt_f(bound),
        weights.sigma().iter().map(|v| fmt_f(*v)).collect::<Vec<_>>().join(", ")
    );
    write_json(
        &cli.out,
        "certificate.json",
        &serde_json::json!({
            "certified_gamma": bound,
            "weights": weights.sigma(),
            "witness": witness,
        }),
    )?;

    if cfg.sweep_m > 0 {
        let mut csv = String::from("m,certified_gamma_bound,weights\n");
        for m in 1..=cfg.sweep_m {
            let (w, b) = search_weights(&sys, m, cfg.budget, cfg.seed);
            let cols: Vec<String> = w.sigma().iter().map(|v| fmt_f(*v)).collect();
            csv.push_str(&format!("{m},{},{}\n", fmt_f(b), cols.join(";")));
        }
        write_file(&cli.out, "m_sweep.csv", &csv)?;
    }
    Ok(ExitCode::SUCCESS)
}

// ── train-certificate ────────────────────────────────────────────────────

/// Configuration of `train-certificate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCertificateConfig {
    /// Environment (benchmark name or inline linear plant).
    pub env: EnvSpec,
    /// Fixed policy to certify.
    pub policy: PolicySpec,
    /// Base value: `"zero"`, `"fit"`, `"are"`, or `{"file": path}`.
    pub base: BaseSpec,
    /// Discount used by `"fit"` and `"are"` bases.
    pub gamma: f64,
    /// Regression settings for the `"fit"` base.
    pub fit: FitConfig,
    /// Training hyper-parameters (`train.seed` is derived from `seed`).
    pub train: TrainConfig,
    /// Number of training trajectories to roll out.
    pub rollouts: usize,
    /// Sampled states in the post-training verification.
    pub n_verify: usize,
    /// Step bins in the weight-concentration summary (clamped to `M`).
    pub bins: usize,
    /// Samples behind the weight-concentration summary.
    pub concentration_samples: usize,
    /// Root seed.
    pub seed: u64,
}

impl Default for TrainCertificateConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::Named("pendulum-gym".to_string()),
            policy: PolicySpec::Named("swing-up".to_string()),
            base: BaseSpec::Named("fit".to_string()),
            gamma: 0.99,
            fit: FitConfig::default(),
            train: TrainConfig { m: 15, ..TrainConfig::default() },
            rollouts: 1000,
            n_verify: 10_000,
            bins: 5,
            concentration_samples: 1000,
            seed: 0,
        }
    }
}

/// Rejection-samples `count` states with norm above `delta`.
fn sample_outside(
    env: &OpenLoopEnv,
    delta: f64,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>, CliError> {
    let mut states = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while states.len() < count {
        attempts += 1;
        if attempts > 1000 * count.max(1) {
            return Err(CliError::Config(format!(
                "could not sample states with norm above delta = {delta}; is the exclusion ball larger than the domain?"
            )));
        }
        let x = env.sample_state(rng);
        if x.iter().map(|v| v * v).sum::<f64>().sqrt() > delta {
            states.push(x);
        }
    }
    Ok(states)
}

fn cmd_train_certificate(cli: &Cli) -> Result<ExitCode, CliError> {
    let mut cfg: TrainCertificateConfig = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = stage_seed(cfg.seed, 1);
    echo_config(cli, "train-certificate", &cfg)?;

    let env = cfg.env.build()?;
    let policy = cfg.policy.build(&cfg.env)?;
    let cl = ClosedLoopEnv::new(env, policy);

    let base = match &cfg.base {
        BaseSpec::Named(name) if name == "zero" => ValueFn::Zero,
        BaseSpec::Named(name) if name == "fit" => {
            println!("fitting the discounted-cost base over {} states", cfg.fit.states);
            fit_discounted_value(&cl, cfg.gamma, &cfg.fit, stage_seed(cfg.seed, 2))?
        }
        BaseSpec::Named(name) if name == "are" => {
            let sol = solve_discounted_are(&cfg.env.system()?, cfg.gamma)?;
            ValueFn::Quadratic(sol.p)
        }
        BaseSpec::Named(name) => {
            return Err(CliError::Config(format!(
                "unknown base {name:?}; expected \"zero\", \"fit\", \"are\", or {{\"file\": path}}"
            )));
        }
        BaseSpec::File { file } => serde_json::from_str(&read_file(file)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", file.display())))?,
    };

    let mut data_rng = Rng::new(stage_seed(cfg.seed, 3));
    let starts = sample_outside(&cl.env, cfg.train.delta, cfg.rollouts, &mut data_rng)?;
    let mut data = Vec::with_capacity(starts.len());
    for x0 in &starts {
        data.push(rollout(&cl, x0, cfg.train.m)?.0);
    }
    println!("dataset: {} trajectories of window {}", data.len(), cfg.train.m);

    let trained = train_certificate(&cl, &base, &cfg.train, &data)?;
    let last = trained.history.last().expect("history is never empty");
    println!("final loss {} after {} epochs", fmt_f(last.loss), trained.history.len());

    let mut history = String::from("epoch,loss,learning_rate\n");
    for row in &trained.history {
        history.push_str(&format!("{},{},{}\n", row.epoch, fmt_f(row.loss), fmt_f(row.lr)));
    }
    write_file(&cli.out, "training_history.csv", &history)?;
    write_file(&cli.out, "certificate.json", &format!("{}\n", trained.certificate.to_json()))?;

    let report = verify_sampled(
        &trained.certificate,
        &cl,
        f64::INFINITY,
        cfg.n_verify,
        stage_seed(cfg.seed, 4),
    )?;
    println!(
        "verification pass fraction {} over {} samples",
        fmt_f(report.pass_fraction),
        report.samples_checked
    );
    write_json(
        &cli.out,
        "verification.json",
        &serde_json::json!({
            "samples_checked": report.samples_checked,
            "pass_fraction": report.pass_fraction,
            "counterexamples": report.counterexamples,
        }),
    )?;

    let mut conc_rng = Rng::new(stage_seed(cfg.seed, 5));
    let samples =
        sample_outside(&cl.env, cfg.train.delta, cfg.concentration_samples, &mut conc_rng)?;
    let bins = cfg.bins.clamp(1, cfg.train.m);
    let fractions = weight_concentration(&trained.certificate, &samples, bins)?;
    let mut conc = String::from("bin,fraction\n");
    for (b, frac) in fractions.iter().enumerate() {
        conc.push_str(&format!("{b},{}\n", fmt_f(*frac)));
    }
    write_file(&cli.out, "weight_concentration.csv", &conc)?;

    Ok(ExitCode::SUCCESS)
}

// ── synthesize ───────────────────────────────────────────────────────────

/// Configuration of `synthesize`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesizeConfig {
    /// Benchmark name (`pendulum-appendix`, `path-tracking`, or
    /// `quadrotor2d`).
    pub env: String,
    /// Constant step weights of the synthesis condition (length must
    /// equal `train.m`).
    pub weights: Vec<f64>,
    /// Training hyper-parameters; the per-seed runs override
    /// `train.seed` with `seed + i`.
    pub train: TrainConfig,
    /// Number of independent seeds.
    pub seeds: usize,
    /// Sampled states in each seed's verification.
    pub n_verify: usize,
    /// Monte Carlo samples in each seed's volume estimate.
    pub volume_samples: usize,
    /// Root seed; seed `i` trains with `seed + i`.
    pub seed: u64,
}

impl Default for SynthesizeConfig {
    fn default() -> Self {
        Self {
            env: "pendulum-appendix".to_string(),
            weights: vec![0.4, 1.6],
            train: TrainConfig { m: 2, ..TrainConfig::default() },
            seeds: 10,
            n_verify: 10_000,
            volume_samples: 100_000,
            seed: 0,
        }
    }
}

const SYNTHESIS_ENVS: [&str; 3] = ["pendulum-appendix", "path-tracking", "quadrotor2d"];

fn cmd_synthesize(cli: &Cli) -> Result<ExitCode, CliError> {
    let mut cfg: SynthesizeConfig = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    echo_config(cli, "synthesize", &cfg)?;
    if !SYNTHESIS_ENVS.contains(&cfg.env.as_str()) {
        return Err(CliError::Config(format!(
            "synthesis supports {SYNTHESIS_ENVS:?}, got {:?}",
            cfg.env
        )));
    }
    if cfg.seeds == 0 {
        return Err(CliError::Config("seeds must be at least 1".into()));
    }
    let env = OpenLoopEnv::by_name(&cfg.env)?;
    let weights = StepWeights::new(cfg.weights.clone())?;

    #[derive(Serialize)]
    struct SeedRow {
        seed: u64,
        status: String,
        rho: Option<f64>,
        final_loss: Option<f64>,
        pass_fraction: Option<f64>,
        volume: Option<f64>,
        volume_stderr: Option<f64>,
    }

    let mut rows: Vec<SeedRow> = Vec::with_capacity(cfg.seeds);
    let mut best: Option<(f64, Mlp, GeneralizedCertificate)> = None;
    for i in 0..cfg.seeds {
        let seed = cfg.seed + i as u64;
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = seed;
        match train_synthesis(&env, &train_cfg, &weights) {
            Err(e) => {
                println!("seed {seed}: failed: {e}");
                rows.push(SeedRow {
                    seed,
                    status: format!("failed: {e}"),
                    rho: None,
                    final_loss: None,
                    pass_fraction: None,
                    volume: None,
                    volume_stderr: None,
                });
            }
            Ok(result) => {
                let cl = ClosedLoopEnv::new(
                    env.clone(),
                    Policy::Net { net: result.controller.clone() },
                );
                let report = verify_sampled(
                    &result.certificate,
                    &cl,
                    result.rho,
                    cfg.n_verify,
                    stage_seed(seed, 11),
                )?;
                let (lo, hi) = env.domain();
                let (volume, stderr) = roa_volume(
                    &result.certificate,
                    result.rho,
                    lo,
                    hi,
                    cfg.volume_samples,
                    stage_seed(seed, 12),
                )?;
                let final_loss = result.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
                println!(
                    "seed {seed}: volume {} +/- {} (pass fraction {})",
                    fmt_f(volume),
                    fmt_f(stderr),
                    fmt_f(report.pass_fraction)
                );
                if best.as_ref().map(|(v, _, _)| volume > *v).unwrap_or(true) {
                    best = Some((volume, result.controller.clone(), result.certificate.clone()));
                }
                rows.push(SeedRow {
                    seed,
                    status: "ok".to_string(),
                    rho: Some(result.rho),
                    final_loss: Some(final_loss),
                    pass_fraction: Some(report.pass_fraction),
                    volume: Some(volume),
                    volume_stderr: Some(stderr),
                });
            }
        }
    }

    let volumes: Vec<f64> = rows.iter().filter_map(|r| r.volume).collect();
    let mean = if volumes.is_empty() {
        f64::NAN
    } else {
        volumes.iter().sum::<f64>() / volumes.len() as f64
    };
    let std = if volumes.len() < 2 {
        0.0
    } else {
        (volumes.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (volumes.len() - 1) as f64)
            .sqrt()
    };
    println!("mean volume {} +/- {} over {} successful seeds", fmt_f(mean), fmt_f(std), volumes.len());

    let opt = |v: Option<f64>| v.map(fmt_f).unwrap_or_default();
    let mut csv =
        String::from("seed,status,rho,final_loss,pass_fraction,volume,volume_stderr\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.seed,
            r.status.replace(',', ";"),
            opt(r.rho),
            opt(r.final_loss),
            opt(r.pass_fraction),
            opt(r.volume),
            opt(r.volume_stderr),
        ));
    }
    write_file(&cli.out, "seeds.csv", &csv)?;
    write_json(
        &cli.out,
        "summary.json",
        &serde_json::json!({
            "env": cfg.env,
            "weights": weights.sigma(),
            "m": cfg.train.m,
            "seeds": cfg.seeds,
            "succeeded": volumes.len(),
            "mean_volume": mean,
            "std_volume": std,
            "per_seed": rows,
        }),
    )?;
    if let Some((_, controller, certificate)) = &best {
        write_json(&cli.out, "controller.json", controller)?;
        write_file(&cli.out, "certificate.json", &format!("{}\n", certificate.to_json()))?;
    }
    Ok(ExitCode::SUCCESS)
}

// ── verify ───────────────────────────────────────────────────────────────

/// Configuration of `verify`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// Environment (benchmark name or inline linear plant).
    pub env: EnvSpec,
    /// Policy closing the loop.
    pub policy: PolicySpec,
    /// Certificate file to check.
    pub certificate: PathBuf,
    /// Level of the certified region; omit for no level constraint.
    pub rho: Option<f64>,
    /// Sampled states to check.
    pub n_samples: usize,
    /// Ascent steps per falsification restart.
    pub pgd_steps: usize,
    /// Ascent step size (fraction of the domain width).
    pub pgd_step_size: f64,
    /// Falsification restarts (0 disables the ascent).
    pub pgd_restarts: usize,
    /// Root seed.
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::Named("pendulum-gym".to_string()),
            policy: PolicySpec::Named("swing-up".to_string()),
            certificate: PathBuf::from("certificate.json"),
            rho: None,
            n_samples: 10_000,
            pgd_steps: 30,
            pgd_step_size: 0.02,
            pgd_restarts: 8,
            seed: 0,
        }
    }
}

fn counterexample_csv(dim: usize, cexs: &[&Counterexample]) -> String {
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    header.push("f_value".to_string());
    header.push("v_value".to_string());
    let mut csv = header.join(",");
    csv.push('\n');
    for c in cexs {
        let mut cols: Vec<String> = c.state.iter().map(|v| fmt_f(*v)).collect();
        cols.push(fmt_f(c.f_value));
        cols.push(fmt_f(c.v_value));
        csv.push_str(&cols.join(","));
        csv.push('\n');
    }
    csv
}

fn cmd_verify(cli: &Cli) -> Result<ExitCode, CliError> {
    let mut cfg: VerifyConfig = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    echo_config(cli, "verify", &cfg)?;
    let cert = GeneralizedCertificate::from_json(&read_file(&cfg.certificate)?)?;
    let env = cfg.env.build()?;
    let policy = cfg.policy.build(&cfg.env)?;
    let cl = ClosedLoopEnv::new(env, policy);
    let rho = cfg.rho.unwrap_or(f64::INFINITY);

    let report = verify_sampled(&cert, &cl, rho, cfg.n_samples, stage_seed(cfg.seed, 1))?;
    let ascent = pgd_falsify(
        &cert,
        &cl,
        rho,
        cfg.pgd_steps,
        cfg.pgd_step_size,
        cfg.pgd_restarts,
        stage_seed(cfg.seed, 2),
    )?;
    let pass = report.pass_fraction == 1.0 && ascent.is_empty();
    let warning = (cfg.n_samples == 0)
        .then(|| "no states were sampled; the sampled check passed vacuously".to_string());

    let all: Vec<&Counterexample> =
        report.counterexamples.iter().chain(ascent.iter()).collect();
    write_file(
        &cli.out,
        "counterexamples.csv",
        &counterexample_csv(cl.env.state_dim(), &all),
    )?;
    write_json(
        &cli.out,
        "report.json",
        &serde_json::json!({
            "pass": pass,
            "samples_checked": report.samples_checked,
            "pass_fraction": report.pass_fraction,
            "ascent_counterexamples": ascent.len(),
            "rho": cfg.rho,
            "warning": warning,
        }),
    )?;
    if let Some(w) = &warning {
        println!("warning: {w}");
    }
    if pass {
        println!(
            "PASS: no counterexamples over {} samples and {} ascent restarts",
            report.samples_checked, cfg.pgd_restarts
        );
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "FAIL: pass fraction {} with {} recorded counterexamples",
            fmt_f(report.pass_fraction),
            all.len()
        );
        Ok(ExitCode::from(1))
    }
}

// ── roa-volume ───────────────────────────────────────────────────────────

/// Configuration of `roa-volume`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RoaVolumeConfig {
    /// Certificate file whose sublevel set is measured.
    pub certificate: PathBuf,
    /// Level of the sublevel set.
    pub rho: f64,
    /// Benchmark whose domain box bounds the integral (overrides
    /// `box_lo`/`box_hi` when set).
    pub env: Option<String>,
    /// Explicit box lower corner.
    pub box_lo: Vec<f64>,
    /// Explicit box upper corner.
    pub box_hi: Vec<f64>,
    /// Monte Carlo samples.
    pub n_samples: usize,
    /// Root seed.
    pub seed: u64,
}

impl Default for RoaVolumeConfig {
    fn default() -> Self {
        Self {
            certificate: PathBuf::from("certificate.json"),
            rho: 1.0,
            env: None,
            box_lo: vec![-1.0, -1.0],
            box_hi: vec![1.0, 1.0],
            n_samples: 1_000_000,
            seed: 0,
        }
    }
}

fn cmd_roa_volume(cli: &Cli) -> Result<ExitCode, CliError> {
    let mut cfg: RoaVolumeConfig = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    echo_config(cli, "roa-volume", &cfg)?;
    let cert = GeneralizedCertificate::from_json(&read_file(&cfg.certificate)?)?;
    let (lo, hi) = match &cfg.env {
        Some(name) => {
            let env = OpenLoopEnv::by_name(name)?;
            let (lo, hi) = env.domain();
            (lo.to_vec(), hi.to_vec())
        }
        None => (cfg.box_lo.clone(), cfg.box_hi.clone()),
    };
    let (volume, stderr) =
        roa_volume(&cert, cfg.rho, &lo, &hi, cfg.n_samples, stage_seed(cfg.seed, 1))?;
    println!(
        "volume {} +/- {} over {} samples at level {}",
        fmt_f(volume),
        fmt_f(stderr),
        cfg.n_samples,
        fmt_f(cfg.rho)
    );
    write_json(
        &cli.out,
        "volume.json",
        &serde_json::json!({
            "volume": volume,
            "stderr": stderr,
            "rho": cfg.rho,
            "box_lo": lo,
            "box_hi": hi,
            "n_samples": cfg.n_samples,
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}
