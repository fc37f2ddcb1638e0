//! Training loops: the constraint-aware agent and its ablations, plus the
//! expectile (IQL-style), conservative (CQL-style) and behavior-cloning
//! baselines.
//!
//! All loops share one mini-batch sampler, one optimizer (SGD with optional
//! momentum) and one seeded random stream, so two runs with the same
//! `(dataset, config)` produce bit-identical traces.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{
    dual_update, pava, penalty_grad, penalty_value, DualState, BIDS, N_ACTIONS,
};
use crate::critic::{
    batch_penalty, default_prox_step, layer_gradient, prox_solve, prox_step, to_rows, CgConfig,
    CriticLayer, CriticState, Row, RowCritic,
};
use crate::env::{default_eval_grid, expected_reward, features, Dataset, State, MONOTONICITY_TOL};
use crate::error::{Error, Result};
use crate::mlp::{Activation, MlpParams, Sgd};

pub const WEAK_LAMBDA: f64 = 0.01;
pub const STRONG_LAMBDA: f64 = 10.0;
/// Proximal-point applications in the fixed-lambda critic layer.
pub const FIXED_POINT_ITERS: usize = 50;
/// Iteration cap of the cold-started inner solver.
pub const COLD_START_MAX_ITERS: usize = 50;
const COLD_START_TOL: f64 = 1e-8;
/// Offset separating the evaluation-state stream from the training stream.
const EVAL_STREAM: u64 = 0x6576_616c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    FixedLambdaWeak,
    FixedLambdaStrong,
    SoftPenalty,
    NoWarmStart,
    Inner1,
    Inner5,
    NoSpectralNorm,
    ActorOnlyConstraint,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::FixedLambdaWeak,
        Variant::FixedLambdaStrong,
        Variant::SoftPenalty,
        Variant::NoWarmStart,
        Variant::Inner1,
        Variant::Inner5,
        Variant::NoSpectralNorm,
        Variant::ActorOnlyConstraint,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::FixedLambdaWeak => "FixedLambdaWeak",
            Variant::FixedLambdaStrong => "FixedLambdaStrong",
            Variant::SoftPenalty => "SoftPenalty",
            Variant::NoWarmStart => "NoWarmStart",
            Variant::Inner1 => "Inner1",
            Variant::Inner5 => "Inner5",
            Variant::NoSpectralNorm => "NoSpectralNorm",
            Variant::ActorOnlyConstraint => "ActorOnlyConstraint",
        }
    }

    /// Variants whose critic output passes through the exact cone projection.
    pub fn is_projection(&self) -> bool {
        matches!(
            self,
            Variant::Full
                | Variant::NoWarmStart
                | Variant::Inner1
                | Variant::Inner5
                | Variant::NoSpectralNorm
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Sum over the 5 actions.
    Exact,
    /// One sampled action per state with a value baseline.
    ScoreFunction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda0: f64,
    pub eta_theta: f64,
    pub eta_phi: f64,
    pub eta_lambda: f64,
    pub tau: f64,
    pub alpha_entropy: f64,
    pub inner_iters: usize,
    pub warm_start: bool,
    pub spectral_norm: bool,
    pub variant: Variant,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Hidden layer widths shared by every network.
    pub hidden: Vec<usize>,
    pub momentum: f64,
    pub estimator: Estimator,
    /// Evaluate every this many steps (and after the last step); 0 disables.
    pub eval_every: usize,
    pub eval_states: usize,
    pub power_iters: usize,
    pub cg_tol: f64,
    pub expectile: f64,
    pub cql_weight: f64,
    pub awr_beta: f64,
    pub awr_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.9,
            lambda0: 0.1,
            eta_theta: 1e-3,
            eta_phi: 1e-3,
            eta_lambda: 0.05,
            tau: 0.005,
            alpha_entropy: 0.01,
            inner_iters: 1,
            warm_start: true,
            spectral_norm: true,
            variant: Variant::Full,
            steps: 50_000,
            batch_size: 256,
            seed: 0,
            hidden: vec![64, 64],
            momentum: 0.0,
            estimator: Estimator::Exact,
            eval_every: 1000,
            eval_states: 10_000,
            power_iters: 1,
            cg_tol: 1e-8,
            expectile: 0.7,
            cql_weight: 1.0,
            awr_beta: 3.0,
            awr_clip: 100.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!(
                "gamma must be in (0,1), got {}",
                self.gamma
            )));
        }
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(Error::config("lambda0 must be >= 0"));
        }
        positive("eta_theta", self.eta_theta)?;
        positive("eta_phi", self.eta_phi)?;
        positive("eta_lambda", self.eta_lambda)?;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config(format!(
                "tau must be in (0,1], got {}",
                self.tau
            )));
        }
        if !(self.alpha_entropy >= 0.0 && self.alpha_entropy.is_finite()) {
            return Err(Error::config("alpha_entropy must be >= 0"));
        }
        if self.inner_iters == 0 {
            return Err(Error::config("inner_iters must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden widths must be >= 1"));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::config("momentum must be in [0,1)"));
        }
        if self.eval_states == 0 {
            return Err(Error::config("eval_states must be >= 1"));
        }
        positive("cg_tol", self.cg_tol)?;
        if !(self.expectile > 0.5 && self.expectile < 1.0) {
            return Err(Error::config("expectile must be in (0.5, 1)"));
        }
        positive("cql_weight", self.cql_weight)?;
        positive("awr_beta", self.awr_beta)?;
        positive("awr_clip", self.awr_clip)?;
        Ok(())
    }

    fn sizes(&self, n_out: usize) -> Vec<usize> {
        let mut s = vec![2];
        s.extend(&self.hidden);
        s.push(n_out);
        s
    }
}

/// Actor: an MLP producing 5 logits, read through a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub phi: MlpParams,
    pub temperature: f64,
}

pub fn softmax(logits: &[f64]) -> Row {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Row = std::array::from_fn(|a| (logits[a] - m).exp());
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

fn log_softmax(logits: &[f64]) -> Row {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    std::array::from_fn(|a| logits[a] - lse)
}

impl PolicyParams {
    pub fn new(sizes: &[usize], temperature: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(PolicyParams {
            phi: MlpParams::new(sizes, Activation::Tanh, rng)?,
            temperature,
        })
    }

    /// All-zero logits: the uniform policy.
    pub fn uniform(hidden: &[usize]) -> Result<Self> {
        let mut sizes = vec![2];
        sizes.extend(hidden);
        sizes.push(N_ACTIONS);
        Ok(PolicyParams {
            phi: MlpParams::zeros(&sizes, Activation::Tanh)?,
            temperature: 0.0,
        })
    }

    pub fn probs(&self, s: &State) -> Row {
        let l = self.phi.rows(&features(s), 1);
        softmax(&l[0])
    }

    pub fn probs_batch(&self, feats: &[f64], n: usize) -> Vec<Row> {
        self.phi.rows(feats, n).iter().map(|l| softmax(l)).collect()
    }
}

/// `sum_a pi(a|s) E[r | s, a]`.
pub fn policy_value(policy: &PolicyParams, s: &State) -> f64 {
    let p = policy.probs(s);
    (0..N_ACTIONS)
        .map(|a| p[a] * expected_reward(s, BIDS[a]))
        .sum()
}

/// Soft objective `sum_a pi_a (q_a - alpha log pi_a)` and its gradient with
/// respect to the logits, `pi_k (q_k - alpha log pi_k - J)`.
pub fn soft_objective_grad(logits: &Row, q: &Row, alpha: f64) -> (f64, Row) {
    let p = softmax(logits);
    let lp = log_softmax(logits);
    let inner: Row = std::array::from_fn(|a| q[a] - alpha * lp[a]);
    let j: f64 = (0..N_ACTIONS).map(|a| p[a] * inner[a]).sum();
    (j, std::array::from_fn(|k| p[k] * (inner[k] - j)))
}

/// Monotone-penalty weight on the actor's scores `z_a = pi_a q_a`: value of
/// `C(z)` and its gradient with respect to the logits.
fn score_penalty_grad(logits: &Row, q: &Row) -> (f64, Row) {
    let p = softmax(logits);
    let z: Row = std::array::from_fn(|a| p[a] * q[a]);
    let gz = penalty_grad(&z);
    let s: f64 = (0..N_ACTIONS).map(|a| gz[a] * q[a] * p[a]).sum();
    (
        penalty_value(&z),
        std::array::from_fn(|k| p[k] * (gz[k] * q[k] - s)),
    )
}

/// One ascent step on the soft policy objective for the states in `feats`,
/// using detached action values `q`. Returns the mean objective.
pub fn actor_update(
    policy: &mut PolicyParams,
    opt: &mut Sgd,
    feats: &[f64],
    q: &[Row],
    estimator: Estimator,
    rng: &mut impl Rng,
) -> f64 {
    actor_update_with_penalty(policy, opt, feats, q, estimator, 0.0, rng).0
}

/// As [`actor_update`], minus `lambda * mean C(pi * q)` when `lambda > 0`.
/// Returns (mean objective, mean score penalty).
fn actor_update_with_penalty(
    policy: &mut PolicyParams,
    opt: &mut Sgd,
    feats: &[f64],
    q: &[Row],
    estimator: Estimator,
    lambda: f64,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let n = q.len();
    let cache = policy.phi.forward_batch(feats, n);
    let logits = to_rows(cache.output());
    let alpha = policy.temperature;
    let inv_n = 1.0 / n as f64;
    let mut total_j = 0.0;
    let mut total_c = 0.0;
    let mut cot = vec![0.0; n * N_ACTIONS];
    for i in 0..n {
        let (j, gj) = soft_objective_grad(&logits[i], &q[i], alpha);
        total_j += j;
        let g = match estimator {
            Estimator::Exact => gj,
            Estimator::ScoreFunction => {
                let p = softmax(&logits[i]);
                let lp = log_softmax(&logits[i]);
                let a = sample_categorical(&p, rng);
                let adv = q[i][a] - alpha * lp[a] - j;
                std::array::from_fn(|k| ((k == a) as u8 as f64 - p[k]) * adv)
            }
        };
        let gc = if lambda > 0.0 {
            let (c, gc) = score_penalty_grad(&logits[i], &q[i]);
            total_c += c;
            gc
        } else {
            [0.0; N_ACTIONS]
        };
        for k in 0..N_ACTIONS {
            // descend on -J + lambda C
            cot[i * N_ACTIONS + k] = (-g[k] + lambda * gc[k]) * inv_n;
        }
    }
    let mut grad = vec![0.0; policy.phi.n_params()];
    policy.phi.backward_batch(&cache, &cot, &mut grad);
    opt.step(&mut policy.phi, &grad);
    (total_j * inv_n, total_c * inv_n)
}

fn sample_categorical(p: &Row, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, pa) in p.iter().enumerate() {
        acc += pa;
        if u < acc {
            return a;
        }
    }
    N_ACTIONS - 1
}

/// Which output map the critic uses and how its targets are formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CriticMode {
    /// Prox-step targets pulled back through a critic layer.
    Layer {
        layer: CriticLayer,
        /// Dual ascent on lambda; otherwise lambda stays at the initial value.
        adaptive: bool,
        /// Project the prox-step targets onto the cone.
        project_targets: bool,
    },
    /// Squared TD error plus `lambda * C(f)` with dual ascent on lambda.
    SoftPenalty,
    /// Squared TD error only.
    Plain,
}

/// Concrete pipeline selected by a variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub mode: CriticMode,
    pub lambda: f64,
    pub inner_iters: usize,
    pub warm_start: bool,
    pub spectral_norm: bool,
    /// Penalize non-monotone actor scores with the dual variable.
    pub actor_penalty: bool,
}

pub fn apply_variant(cfg: &TrainConfig) -> Result<Pipeline> {
    cfg.validate()?;
    let cone = CriticMode::Layer {
        layer: CriticLayer::Cone,
        adaptive: true,
        project_targets: true,
    };
    let fixed = |lambda| CriticMode::Layer {
        layer: CriticLayer::ProxFixedPoint {
            lambda,
            iters: FIXED_POINT_ITERS,
        },
        adaptive: false,
        project_targets: false,
    };
    let mut p = Pipeline {
        mode: cone,
        lambda: cfg.lambda0,
        inner_iters: cfg.inner_iters,
        warm_start: cfg.warm_start,
        spectral_norm: cfg.spectral_norm,
        actor_penalty: false,
    };
    match cfg.variant {
        Variant::Full => {}
        Variant::Inner1 => p.inner_iters = 1,
        Variant::Inner5 => p.inner_iters = 5,
        Variant::NoWarmStart => p.warm_start = false,
        Variant::NoSpectralNorm => p.spectral_norm = false,
        Variant::FixedLambdaWeak => {
            p.mode = fixed(WEAK_LAMBDA);
            p.lambda = WEAK_LAMBDA;
        }
        Variant::FixedLambdaStrong => {
            p.mode = fixed(STRONG_LAMBDA);
            p.lambda = STRONG_LAMBDA;
        }
        Variant::SoftPenalty => p.mode = CriticMode::SoftPenalty,
        Variant::ActorOnlyConstraint => {
            p.mode = CriticMode::Plain;
            p.actor_penalty = true;
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    /// Mean `|Q(s, a) - y|` over the batch before the update.
    pub bellman_residual: f64,
    /// Constraint value driving the dual update (0 when none applies).
    pub c_value: f64,
    pub lambda: f64,
    pub eval_return: Option<f64>,
    pub monotonicity_errors: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub const HEADER: &'static str =
        "step,bellman_residual,c_value,lambda,eval_return,monotonicity_errors";

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            let ret = r
                .eval_return
                .map(|v| format!("{v:.17e}"))
                .unwrap_or_default();
            let me = r
                .monotonicity_errors
                .map(|v| v.to_string())
                .unwrap_or_default();
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e},{},{}",
                r.step, r.bellman_residual, r.c_value, r.lambda, ret, me
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn last_eval(&self) -> Option<&TraceRow> {
        self.rows.iter().rev().find(|r| r.eval_return.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    #[serde(rename = "ours", alias = "constraint_aware")]
    ConstraintAware,
    Iql,
    Cql,
    Bc,
}

impl AgentKind {
    pub fn name(&self) -> &'static str {
        match self {
            AgentKind::ConstraintAware => "ours",
            AgentKind::Iql => "iql",
            AgentKind::Cql => "cql",
            AgentKind::Bc => "bc",
        }
    }
}

/// Everything a finished run exposes to evaluation.
#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub kind: AgentKind,
    /// For behavior cloning: an evaluation critic of the cloned policy.
    pub critic: CriticState,
    /// Output map applied to the online critic at evaluation time.
    pub layer: CriticLayer,
    /// State-value network of the expectile baseline.
    pub value_net: Option<MlpParams>,
    pub policy: PolicyParams,
    pub trace: Trace,
}

impl TrainedAgent {
    pub fn q_row(&self, s: &State) -> Row {
        let f = self.critic.theta.rows(&features(s), 1)[0];
        self.layer.apply(&f).unwrap_or(f)
    }

    pub fn q_rows(&self, states: &[State]) -> Vec<Row> {
        let feats: Vec<f64> = states.iter().flat_map(features).collect();
        self.critic
            .theta
            .rows(&feats, states.len())
            .iter()
            .map(|f| self.layer.apply(f).unwrap_or(*f))
            .collect()
    }

    /// Monotonicity errors of the evaluated critic on the standard grid.
    pub fn monotonicity_errors(&self) -> usize {
        monotonicity_errors_of(&self.q_rows(&default_eval_grid()))
    }

    /// Mean `|Q(s,a) - E[r|s,a] - gamma mean_{s'} max_a' Q(s',a')|` over `n`
    /// fresh states and all actions, with the expectation over `s'` taken on
    /// an independent set of `n` fresh states.
    pub fn residual_at_convergence(&self, gamma: f64, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states: Vec<State> = (0..n).map(|_| State::sample(&mut rng)).collect();
        let next: Vec<State> = (0..n).map(|_| State::sample(&mut rng)).collect();
        let q = self.q_rows(&states);
        let qn = self.q_rows(&next);
        let v_next = qn
            .iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / n as f64;
        let mut acc = 0.0;
        for (s, row) in states.iter().zip(&q) {
            for a in 0..N_ACTIONS {
                acc += (row[a] - expected_reward(s, BIDS[a]) - gamma * v_next).abs();
            }
        }
        acc / (n * N_ACTIONS) as f64
    }
}

pub fn monotonicity_errors_of(rows: &[Row]) -> usize {
    rows.iter()
        .map(|q| {
            q.windows(2)
                .filter(|w| w[0] > w[1] + MONOTONICITY_TOL)
                .count()
        })
        .sum()
}

/// A failed run together with the trace up to the failure.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub trace: Trace,
}

impl From<TrainAbort> for Error {
    fn from(a: TrainAbort) -> Self {
        a.error
    }
}

pub type TrainResult = std::result::Result<TrainedAgent, TrainAbort>;

/// Dataset columns prepared once per run.
struct Columns {
    s: Vec<[f64; 2]>,
    s_next: Vec<[f64; 2]>,
    a: Vec<usize>,
    r: Vec<f64>,
}

impl Columns {
    fn new(data: &Dataset) -> Result<Self> {
        if data.transitions.is_empty() {
            return Err(Error::domain("dataset is empty"));
        }
        Ok(Columns {
            s: data.transitions.iter().map(|t| features(&t.s)).collect(),
            s_next: data
                .transitions
                .iter()
                .map(|t| features(&t.s_next))
                .collect(),
            a: data.transitions.iter().map(|t| t.a).collect(),
            r: data.transitions.iter().map(|t| t.r).collect(),
        })
    }

    fn sample(&self, n: usize, rng: &mut impl Rng) -> MiniBatch {
        let len = self.a.len();
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..len)).collect();
        MiniBatch {
            s: idx.iter().flat_map(|&i| self.s[i]).collect(),
            s_next: idx.iter().flat_map(|&i| self.s_next[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            r: idx.iter().map(|&i| self.r[i]).collect(),
        }
    }
}

struct MiniBatch {
    s: Vec<f64>,
    s_next: Vec<f64>,
    a: Vec<usize>,
    r: Vec<f64>,
}

impl MiniBatch {
    fn len(&self) -> usize {
        self.a.len()
    }
}

/// Fixed evaluation states and grid for in-training evaluation.
struct Evaluator {
    states: Vec<State>,
    feats: Vec<f64>,
    grid_feats: Vec<f64>,
    grid_len: usize,
}

impl Evaluator {
    fn new(cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_STREAM);
        let states: Vec<State> = (0..cfg.eval_states)
            .map(|_| State::sample(&mut rng))
            .collect();
        let grid = default_eval_grid();
        Evaluator {
            feats: states.iter().flat_map(features).collect(),
            states,
            grid_feats: grid.iter().flat_map(features).collect(),
            grid_len: grid.len(),
        }
    }

    fn policy_return(&self, policy: &PolicyParams) -> f64 {
        let p = policy.probs_batch(&self.feats, self.states.len());
        let total: f64 = self
            .states
            .iter()
            .zip(&p)
            .map(|(s, pi)| {
                (0..N_ACTIONS)
                    .map(|a| pi[a] * expected_reward(s, BIDS[a]))
                    .sum::<f64>()
            })
            .sum();
        total / self.states.len() as f64
    }

    fn errors(&self, critic: &MlpParams, layer: &CriticLayer) -> usize {
        let rows: Vec<Row> = critic
            .rows(&self.grid_feats, self.grid_len)
            .iter()
            .map(|f| layer.apply(f).unwrap_or(*f))
            .collect();
        monotonicity_errors_of(&rows)
    }

    fn due(cfg: &TrainConfig, step: usize) -> bool {
        step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0)
    }
}

fn abort(step: usize, reason: impl Into<String>, trace: &Trace) -> TrainAbort {
    TrainAbort {
        error: Error::Training {
            step,
            reason: reason.into(),
        },
        trace: trace.clone(),
    }
}

fn retag(e: Error, step: usize, trace: &Trace) -> TrainAbort {
    let error = match e {
        Error::Training { reason, .. } => Error::Training { step, reason },
        Error::Solver { .. } | Error::Domain(_) => Error::Training {
            step,
            reason: e.to_string(),
        },
        other => other,
    };
    TrainAbort {
        error,
        trace: trace.clone(),
    }
}

fn max_row(r: &Row) -> f64 {
    r.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn check_rows(
    rows: &[Row],
    what: &str,
    step: usize,
    trace: &Trace,
) -> std::result::Result<(), TrainAbort> {
    if rows.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(abort(step, format!("non-finite {what}"), trace))
    }
}

/// Initial networks, drawn in a fixed order from the run's stream.
fn init_critic(cfg: &TrainConfig, rng: &mut ChaCha8Rng, lambda: f64) -> Result<CriticState> {
    let theta = MlpParams::new(&cfg.sizes(N_ACTIONS), Activation::Tanh, rng)?;
    Ok(CriticState::new(
        theta,
        DualState::new(lambda, cfg.eta_lambda)?,
    ))
}

fn init_policy(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<PolicyParams> {
    PolicyParams::new(&cfg.sizes(N_ACTIONS), cfg.alpha_entropy, rng)
}

fn start(
    cfg: &TrainConfig,
    data: &Dataset,
) -> std::result::Result<(Columns, Evaluator, ChaCha8Rng), TrainAbort> {
    let wrap = |e: Error| TrainAbort {
        error: e,
        trace: Trace::default(),
    };
    cfg.validate().map_err(wrap)?;
    let cols = Columns::new(data).map_err(wrap)?;
    Ok((
        cols,
        Evaluator::new(cfg),
        ChaCha8Rng::seed_from_u64(cfg.seed),
    ))
}

/// Algorithm loop for the constraint-aware agent under `cfg.variant`.
pub fn train_constraint_aware(data: &Dataset, cfg: &TrainConfig) -> TrainResult {
    let pipeline = apply_variant(cfg).map_err(|e| TrainAbort {
        error: e,
        trace: Trace::default(),
    })?;
    train_pipeline(data, cfg, &pipeline)
}

/// Runs a concrete pipeline. Exposed so custom pipelines (for example a
/// plain fitted-Q run) can reuse the loop.
pub fn train_pipeline(data: &Dataset, cfg: &TrainConfig, p: &Pipeline) -> TrainResult {
    let (cols, eval, mut rng) = start(cfg, data)?;
    let mut trace = Trace::default();
    let mut cs = init_critic(cfg, &mut rng, p.lambda).map_err(|e| retag(e, 0, &trace))?;
    let mut policy = init_policy(cfg, &mut rng).map_err(|e| retag(e, 0, &trace))?;
    let mut critic_opt = Sgd::new(cfg.eta_theta, cfg.momentum, cs.theta.n_params());
    let mut actor_opt = Sgd::new(cfg.eta_phi, cfg.momentum, policy.phi.n_params());
    let cg = CgConfig {
        tol: cfg.cg_tol,
        max_iter: None,
    };
    let eval_layer = match p.mode {
        CriticMode::Layer { layer, .. } => layer,
        _ => CriticLayer::Identity,
    };
    let mut actor_dual =
        DualState::new(p.lambda, cfg.eta_lambda).map_err(|e| retag(e, 0, &trace))?;

    for step in 1..=cfg.steps {
        let b = cols.sample(cfg.batch_size, &mut rng);
        let n = b.len();
        let inv_n = 1.0 / n as f64;

        // targets from the target critic
        let next = cs.theta_bar.rows(&b.s_next, n);
        let next: Vec<Row> = next
            .iter()
            .map(|f| eval_layer.apply(f))
            .collect::<Result<_>>()
            .map_err(|e| retag(e, step, &trace))?;
        check_rows(&next, "target critic output", step, &trace)?;
        let y: Vec<f64> = (0..n)
            .map(|i| b.r[i] + cfg.gamma * max_row(&next[i]))
            .collect();

        let f = cs.theta.rows(&b.s, n);
        check_rows(&f, "critic output", step, &trace)?;

        let (grad, residual, c_value, q_actor) = match p.mode {
            CriticMode::Layer {
                layer,
                adaptive: _,
                project_targets,
            } => {
                let u0: Vec<Row> = f
                    .iter()
                    .map(|r| layer.apply(r))
                    .collect::<Result<_>>()
                    .map_err(|e| retag(e, step, &trace))?;
                let residual = (0..n).map(|i| (u0[i][b.a[i]] - y[i]).abs()).sum::<f64>() * inv_n;
                let mut yhat = u0.clone();
                for i in 0..n {
                    yhat[i][b.a[i]] = y[i];
                }
                let dual = cs.dual;
                let step_size = default_prox_step(dual.lambda);
                let u = if p.warm_start {
                    prox_step(&u0, &yhat, &dual, step_size, p.inner_iters)
                } else {
                    prox_solve(
                        &yhat,
                        &yhat,
                        &dual,
                        step_size,
                        COLD_START_TOL,
                        COLD_START_MAX_ITERS,
                    )
                    .map(|(u, _)| u)
                }
                .map_err(|e| retag(e, step, &trace))?;
                let c_value = batch_penalty(&u);
                let targets: Vec<Row> = if project_targets {
                    u.iter().map(pava).collect()
                } else {
                    u
                };
                let (g, _) = layer_gradient(&cs.theta, &b.s, &targets, &layer, &cg)
                    .map_err(|e| retag(e, step, &trace))?;
                cs.u_prev = Some(targets);
                (g.0, residual, c_value, u0)
            }
            CriticMode::SoftPenalty | CriticMode::Plain => {
                let lambda = if p.mode == CriticMode::SoftPenalty {
                    cs.dual.lambda
                } else {
                    0.0
                };
                let mut cot = vec![0.0; n * N_ACTIONS];
                let mut residual = 0.0;
                for i in 0..n {
                    let a = b.a[i];
                    let d = f[i][a] - y[i];
                    residual += d.abs();
                    cot[i * N_ACTIONS + a] += d * inv_n;
                    if lambda > 0.0 {
                        let gc = penalty_grad(&f[i]);
                        for k in 0..N_ACTIONS {
                            cot[i * N_ACTIONS + k] += lambda * gc[k] * inv_n;
                        }
                    }
                }
                let cache = cs.theta.forward_batch(&b.s, n);
                let mut g = vec![0.0; cs.theta.n_params()];
                cs.theta.backward_batch(&cache, &cot, &mut g);
                let c_value = if p.mode == CriticMode::SoftPenalty {
                    batch_penalty(&f)
                } else {
                    0.0
                };
                (g, residual * inv_n, c_value, f.clone())
            }
        };
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(abort(step, "non-finite critic gradient", &trace));
        }
        critic_opt.step(&mut cs.theta, &grad);
        if p.spectral_norm {
            cs.theta.spectral_normalize_in_place(cfg.power_iters);
        }
        let adaptive = matches!(
            p.mode,
            CriticMode::Layer { adaptive: true, .. } | CriticMode::SoftPenalty
        );
        if adaptive {
            cs.dual = dual_update(cs.dual, c_value);
        }

        let (_, score_c) = actor_update_with_penalty(
            &mut policy,
            &mut actor_opt,
            &b.s,
            &q_actor,
            cfg.estimator,
            if p.actor_penalty {
                actor_dual.lambda
            } else {
                0.0
            },
            &mut rng,
        );
        let (c_trace, lambda_trace) = if p.actor_penalty {
            actor_dual = dual_update(actor_dual, score_c);
            (score_c, actor_dual.lambda)
        } else {
            (c_value, cs.dual.lambda)
        };
        cs.theta_bar.polyak_from(&cs.theta, cfg.tau);

        let mut row = TraceRow {
            step,
            bellman_residual: residual,
            c_value: c_trace,
            lambda: lambda_trace,
            eval_return: None,
            monotonicity_errors: None,
        };
        if Evaluator::due(cfg, step) {
            row.eval_return = Some(eval.policy_return(&policy));
            row.monotonicity_errors = Some(eval.errors(&cs.theta, &eval_layer));
        }
        if !(row.bellman_residual.is_finite() && row.c_value.is_finite() && row.lambda.is_finite())
        {
            trace.rows.push(row);
            return Err(abort(step, "non-finite loss", &trace));
        }
        trace.rows.push(row);
    }
    if p.actor_penalty {
        cs.dual = actor_dual;
    }
    Ok(TrainedAgent {
        kind: AgentKind::ConstraintAware,
        critic: cs,
        layer: eval_layer,
        value_net: None,
        policy,
        trace,
    })
}

/// Expectile loss `|tau - 1(u < 0)| u^2` and its derivative in `u`.
pub fn expectile_loss(u: f64, tau: f64) -> (f64, f64) {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    (w * u * u, 2.0 * w * u)
}

/// Expectile value baseline with advantage-weighted policy extraction.
pub fn train_iql(data: &Dataset, cfg: &TrainConfig, expectile: f64) -> TrainResult {
    if !(expectile > 0.5 && expectile < 1.0) {
        return Err(TrainAbort {
            error: Error::config("expectile must be in (0.5, 1)"),
            trace: Trace::default(),
        });
    }
    let (cols, eval, mut rng) = start(cfg, data)?;
    let mut trace = Trace::default();
    let mut cs = init_critic(cfg, &mut rng, 0.0).map_err(|e| retag(e, 0, &trace))?;
    let mut policy = init_policy(cfg, &mut rng).map_err(|e| retag(e, 0, &trace))?;
    let mut vnet = MlpParams::new(&cfg.sizes(1), Activation::Tanh, &mut rng)
        .map_err(|e| retag(e, 0, &trace))?;
    let mut q_opt = Sgd::new(cfg.eta_theta, cfg.momentum, cs.theta.n_params());
    let mut v_opt = Sgd::new(cfg.eta_theta, cfg.momentum, vnet.n_params());
    let mut pi_opt = Sgd::new(cfg.eta_phi, cfg.momentum, policy.phi.n_params());

    for step in 1..=cfg.steps {
        let b = cols.sample(cfg.batch_size, &mut rng);
        let n = b.len();
        let inv_n = 1.0 / n as f64;

        // value net toward the expectile of the target critic
        let qbar = cs.theta_bar.rows(&b.s, n);
        let vcache = vnet.forward_batch(&b.s, n);
        let v: Vec<f64> = vcache.output().to_vec();
        let mut vcot = vec![0.0; n];
        for i in 0..n {
            let (_, d) = expectile_loss(qbar[i][b.a[i]] - v[i], expectile);
            vcot[i] = -d * inv_n;
        }
        let mut vg = vec![0.0; vnet.n_params()];
        vnet.backward_batch(&vcache, &vcot, &mut vg);

        // critic toward r + gamma V(s')
        let v_next = vnet.forward_batch(&b.s_next, n);
        let y: Vec<f64> = (0..n)
            .map(|i| b.r[i] + cfg.gamma * v_next.output()[i])
            .collect();
        let qcache = cs.theta.forward_batch(&b.s, n);
        let q = to_rows(qcache.output());
        check_rows(&q, "critic output", step, &trace)?;
        let mut qcot = vec![0.0; n * N_ACTIONS];
        let mut residual = 0.0;
        for i in 0..n {
            let d = q[i][b.a[i]] - y[i];
            residual += d.abs();
            qcot[i * N_ACTIONS + b.a[i]] = d * inv_n;
        }
        let mut qg = vec![0.0; cs.theta.n_params()];
        cs.theta.backward_batch(&qcache, &qcot, &mut qg);

        // advantage-weighted regression on logged actions
        let pcache = policy.phi.forward_batch(&b.s, n);
        let logits = to_rows(pcache.output());
        let mut pcot = vec![0.0; n * N_ACTIONS];
        for i in 0..n {
            let adv = qbar[i][b.a[i]] - v[i];
            let w = (cfg.awr_beta * adv).exp().min(cfg.awr_clip);
            let p = softmax(&logits[i]);
            for k in 0..N_ACTIONS {
                let onehot = (k == b.a[i]) as u8 as f64;
                pcot[i * N_ACTIONS + k] = w * (p[k] - onehot) * inv_n;
            }
        }
        let mut pg = vec![0.0; policy.phi.n_params()];
        policy.phi.backward_batch(&pcache, &pcot, &mut pg);

        if !(vg.iter().chain(&qg).chain(&pg).all(|x| x.is_finite())) {
            return Err(abort(step, "non-finite gradient", &trace));
        }
        v_opt.step(&mut vnet, &vg);
        q_opt.step(&mut cs.theta, &qg);
        pi_opt.step(&mut policy.phi, &pg);
        cs.theta_bar.polyak_from(&cs.theta, cfg.tau);

        let mut row = TraceRow {
            step,
            bellman_residual: residual * inv_n,
            c_value: batch_penalty(&q),
            lambda: 0.0,
            eval_return: None,
            monotonicity_errors: None,
        };
        if Evaluator::due(cfg, step) {
            row.eval_return = Some(eval.policy_return(&policy));
            row.monotonicity_errors = Some(eval.errors(&cs.theta, &CriticLayer::Identity));
        }
        if !row.bellman_residual.is_finite() {
            trace.rows.push(row);
            return Err(abort(step, "non-finite loss", &trace));
        }
        trace.rows.push(row);
    }
    Ok(TrainedAgent {
        kind: AgentKind::Iql,
        critic: cs,
        layer: CriticLayer::Identity,
        value_net: Some(vnet),
        policy,
        trace,
    })
}

/// Conservative baseline: TD error plus
/// `cql_weight * mean(logsumexp_a Q(s,a) - Q(s, a_logged))`, soft actor on top.
pub fn train_cql(data: &Dataset, cfg: &TrainConfig, cql_weight: f64) -> TrainResult {
    if !(cql_weight > 0.0 && cql_weight.is_finite()) {
        return Err(TrainAbort {
            error: Error::config("cql_weight must be positive"),
            trace: Trace::default(),
        });
    }
    train_td(data, cfg, cql_weight, AgentKind::Cql)
}

/// Fitted Q-iteration with the soft actor and no constraint or regularizer.
pub fn train_fitted_q(data: &Dataset, cfg: &TrainConfig) -> TrainResult {
    train_td(data, cfg, 0.0, AgentKind::Cql)
}

/// `logsumexp_a q_a - q_logged` and its gradient in `q`.
pub fn conservative_penalty(q: &Row, logged: usize) -> (f64, Row) {
    let m = max_row(q);
    let lse = m + q.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let p = softmax(q);
    let g = std::array::from_fn(|k| p[k] - (k == logged) as u8 as f64);
    (lse - q[logged], g)
}

fn train_td(data: &Dataset, cfg: &TrainConfig, cql_weight: f64, kind: AgentKind) -> TrainResult {
    let (cols, eval, mut rng) = start(cfg, data)?;
    let mut trace = Trace::default();
    let mut cs = init_critic(cfg, &mut rng, 0.0).map_err(|e| retag(e, 0, &trace))?;
    let mut policy = init_policy(cfg, &mut rng).map_err(|e| retag(e, 0, &trace))?;
    let mut q_opt = Sgd::new(cfg.eta_theta, cfg.momentum, cs.theta.n_params());
    let mut pi_opt = Sgd::new(cfg.eta_phi, cfg.momentum, policy.phi.n_params());

    for step in 1..=cfg.steps {
        let b = cols.sample(cfg.batch_size, &mut rng);
        let n = b.len();
        let inv_n = 1.0 / n as f64;
        let next = cs.theta_bar.rows(&b.s_next, n);
        check_rows(&next, "target critic output", step, &trace)?;
        let y: Vec<f64> = (0..n)
            .map(|i| b.r[i] + cfg.gamma * max_row(&next[i]))
            .collect();
        let cache = cs.theta.forward_batch(&b.s, n);
        let q = to_rows(cache.output());
        check_rows(&q, "critic output", step, &trace)?;
        let mut cot = vec![0.0; n * N_ACTIONS];
        let mut residual = 0.0;
        for i in 0..n {
            let a = b.a[i];
            let d = q[i][a] - y[i];
            residual += d.abs();
            cot[i * N_ACTIONS + a] += d * inv_n;
            if cql_weight > 0.0 {
                let (_, g) = conservative_penalty(&q[i], a);
                for k in 0..N_ACTIONS {
                    cot[i * N_ACTIONS + k] += cql_weight * g[k] * inv_n;
                }
            }
        }
        let mut g = vec![0.0; cs.theta.n_params()];
        cs.theta.backward_batch(&cache, &cot, &mut g);
        if !g.iter().all(|v| v.is_finite()) {
            return Err(abort(step, "non-finite critic gradient", &trace));
        }
        q_opt.step(&mut cs.theta, &g);
        actor_update(&mut policy, &mut pi_opt, &b.s, &q, cfg.estimator, &mut rng);
        cs.theta_bar.polyak_from(&cs.theta, cfg.tau);

        let mut row = TraceRow {
            step,
            bellman_residual: residual * inv_n,
            c_value: batch_penalty(&q),
            lambda: 0.0,
            eval_return: None,
            monotonicity_errors: None,
        };
        if Evaluator::due(cfg, step) {
            row.eval_return = Some(eval.policy_return(&policy));
            row.monotonicity_errors = Some(eval.errors(&cs.theta, &CriticLayer::Identity));
        }
        if !row.bellman_residual.is_finite() {
            trace.rows.push(row);
            return Err(abort(step, "non-finite loss", &trace));
        }
        trace.rows.push(row);
    }
    Ok(TrainedAgent {
        kind,
        critic: cs,
        layer: CriticLayer::Identity,
        value_net: None,
        policy,
        trace,
    })
}

/// Cross-entropy behavior cloning. A critic of the cloned policy is fitted
/// alongside (expected SARSA on the logged data) so the run can report
/// monotonicity errors and a residual like the value-based agents.
pub fn train_bc(data: &Dataset, cfg: &TrainConfig) -> TrainResult {
    let (cols, eval, mut rng) = start(cfg, data)?;
    let mut trace = Trace::default();
    let mut cs = init_critic(cfg, &mut rng, 0.0).map_err(|e| retag(e, 0, &trace))?;
    let mut policy = init_policy(cfg, &mut rng).map_err(|e| retag(e, 0, &trace))?;
    let mut q_opt = Sgd::new(cfg.eta_theta, cfg.momentum, cs.theta.n_params());
    let mut pi_opt = Sgd::new(cfg.eta_phi, cfg.momentum, policy.phi.n_params());

    for step in 1..=cfg.steps {
        let b = cols.sample(cfg.batch_size, &mut rng);
        let n = b.len();
        let inv_n = 1.0 / n as f64;

        let pcache = policy.phi.forward_batch(&b.s, n);
        let logits = to_rows(pcache.output());
        let mut pcot = vec![0.0; n * N_ACTIONS];
        let mut xent = 0.0;
        for i in 0..n {
            let p = softmax(&logits[i]);
            xent -= log_softmax(&logits[i])[b.a[i]];
            for k in 0..N_ACTIONS {
                pcot[i * N_ACTIONS + k] = (p[k] - (k == b.a[i]) as u8 as f64) * inv_n;
            }
        }
        let mut pg = vec![0.0; policy.phi.n_params()];
        policy.phi.backward_batch(&pcache, &pcot, &mut pg);

        let next = cs.theta_bar.rows(&b.s_next, n);
        let pi_next = policy.probs_batch(&b.s_next, n);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                b.r[i]
                    + cfg.gamma
                        * (0..N_ACTIONS)
                            .map(|a| pi_next[i][a] * next[i][a])
                            .sum::<f64>()
            })
            .collect();
        let qcache = cs.theta.forward_batch(&b.s, n);
        let q = to_rows(qcache.output());
        check_rows(&q, "critic output", step, &trace)?;
        let mut qcot = vec![0.0; n * N_ACTIONS];
        let mut residual = 0.0;
        for i in 0..n {
            let d = q[i][b.a[i]] - y[i];
            residual += d.abs();
            qcot[i * N_ACTIONS + b.a[i]] = d * inv_n;
        }
        let mut qg = vec![0.0; cs.theta.n_params()];
        cs.theta.backward_batch(&qcache, &qcot, &mut qg);
        if !(pg.iter().chain(&qg).all(|v| v.is_finite()) && xent.is_finite()) {
            return Err(abort(step, "non-finite loss", &trace));
        }
        pi_opt.step(&mut policy.phi, &pg);
        q_opt.step(&mut cs.theta, &qg);
        cs.theta_bar.polyak_from(&cs.theta, cfg.tau);

        let mut row = TraceRow {
            step,
            bellman_residual: residual * inv_n,
            c_value: batch_penalty(&q),
            lambda: 0.0,
            eval_return: None,
            monotonicity_errors: None,
        };
        if Evaluator::due(cfg, step) {
            row.eval_return = Some(eval.policy_return(&policy));
            row.monotonicity_errors = Some(eval.errors(&cs.theta, &CriticLayer::Identity));
        }
        trace.rows.push(row);
    }
    Ok(TrainedAgent {
        kind: AgentKind::Bc,
        critic: cs,
        layer: CriticLayer::Identity,
        value_net: None,
        policy,
        trace,
    })
}

/// Dispatches on agent kind with the configured baseline hyperparameters.
pub fn train_agent(kind: AgentKind, data: &Dataset, cfg: &TrainConfig) -> TrainResult {
    match kind {
        AgentKind::ConstraintAware => train_constraint_aware(data, cfg),
        AgentKind::Iql => train_iql(data, cfg, cfg.expectile),
        AgentKind::Cql => train_cql(data, cfg, cfg.cql_weight),
        AgentKind::Bc => train_bc(data, cfg),
    }
}
