//! Exact discretized dynamic programming: the optimal Bellman operator, its
//! composition with a proximal constraint map, and their fixed points.
//!
//! Used as ground truth for the sample-based critic.

use serde::{Deserialize, Serialize};

use crate::constraint::{
    pava, prox_lipschitz_penalty, prox_penalty_raw, ConstraintKind, ConstraintSpec, N_ACTIONS,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridAxis {
    pub fn new(name: &str, lo: f64, hi: f64, points: usize) -> Self {
        GridAxis {
            name: name.to_string(),
            lo,
            hi,
            points,
        }
    }

    pub fn coord(&self, i: usize) -> f64 {
        if self.points <= 1 {
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * i as f64 / (self.points - 1) as f64
        }
    }

    pub fn spacing(&self) -> f64 {
        if self.points <= 1 {
            0.0
        } else {
            (self.hi - self.lo) / (self.points - 1) as f64
        }
    }
}

/// Row-major axis description; empty means an unstructured 1-D vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub axes: Vec<GridAxis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueGrid {
    pub values: Vec<f64>,
    pub meta: GridMeta,
}

impl ValueGrid {
    pub fn from_values(values: Vec<f64>) -> Self {
        ValueGrid {
            values,
            meta: GridMeta::default(),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::from_values(vec![0.0; n])
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sup_dist(&self, other: &ValueGrid) -> f64 {
        sup_dist(&self.values, &other.values)
    }
}

pub(crate) fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TransitionModel {
    /// `probs[(s * n_actions + a) * n_states + s']`.
    Dense(Vec<f64>),
    /// Next state drawn from one fixed distribution regardless of `(s, a)`.
    Iid(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `reward[s * n_actions + a]`.
    pub reward: Vec<f64>,
    pub transition: TransitionModel,
    pub gamma: f64,
    /// Grid layout of the state space, when it has one.
    pub meta: GridMeta,
}

impl DiscreteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        reward: Vec<f64>,
        transition: TransitionModel,
        gamma: f64,
    ) -> Result<Self> {
        let mdp = DiscreteMdp {
            n_states,
            n_actions,
            reward,
            transition,
            gamma,
            meta: GridMeta::default(),
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::domain("MDP needs at least one state and action"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::domain(format!(
                "gamma must be in (0,1), got {}",
                self.gamma
            )));
        }
        if self.reward.len() != self.n_states * self.n_actions {
            return Err(Error::domain("reward matrix has wrong size"));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::domain("reward matrix has non-finite entries"));
        }
        let check_row = |row: &[f64]| -> Result<()> {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::domain("negative transition probability"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::domain(format!("transition row sums to {s}")));
            }
            Ok(())
        };
        match &self.transition {
            TransitionModel::Dense(p) => {
                if p.len() != self.n_states * self.n_actions * self.n_states {
                    return Err(Error::domain("transition tensor has wrong size"));
                }
                for row in p.chunks(self.n_states) {
                    check_row(row)?;
                }
            }
            TransitionModel::Iid(p) => {
                if p.len() != self.n_states {
                    return Err(Error::domain("next-state distribution has wrong size"));
                }
                check_row(p)?;
            }
        }
        Ok(())
    }

    pub fn r_max(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// `Q(s, a) = r(s, a) + gamma sum_s' P(s'|s, a) v(s')`, flattened like `reward`.
    pub fn q_values(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n_states {
            return Err(Error::domain(format!(
                "value has {} entries, MDP has {} states",
                v.len(),
                self.n_states
            )));
        }
        let mut q = self.reward.clone();
        match &self.transition {
            TransitionModel::Dense(p) => {
                for (k, row) in p.chunks(self.n_states).enumerate() {
                    let ev: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
                    q[k] += self.gamma * ev;
                }
            }
            TransitionModel::Iid(p) => {
                let ev: f64 = p.iter().zip(v).map(|(a, b)| a * b).sum();
                q.iter_mut().for_each(|x| *x += self.gamma * ev);
            }
        }
        Ok(q)
    }

    /// Greedy action per state under `v` (first maximizer on ties).
    pub fn greedy(&self, v: &[f64]) -> Result<Vec<usize>> {
        let q = self.q_values(v)?;
        Ok(q.chunks(self.n_actions)
            .map(|row| {
                let mut best = 0;
                for a in 1..row.len() {
                    if row[a] > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect())
    }
}

/// `(T* v)(s) = max_a [r(s, a) + gamma E v(s')]`.
pub fn bellman_optimal(v: &ValueGrid, m: &DiscreteMdp) -> Result<ValueGrid> {
    let q = m.q_values(&v.values)?;
    let values = q
        .chunks(m.n_actions)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(ValueGrid {
        values,
        meta: v.meta.clone(),
    })
}

/// Q-rows after the per-state constraint map, flattened like `reward`.
///
/// For monotone constraints the prox acts on each state's row before the max;
/// other kinds leave rows untouched.
pub fn constrained_q_rows(
    v: &ValueGrid,
    m: &DiscreteMdp,
    spec: &ConstraintSpec,
    lambda: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    let mut q = m.q_values(&v.values)?;
    if !spec.is_monotone() || lambda == 0.0 {
        return Ok(q);
    }
    if m.n_actions != N_ACTIONS {
        return Err(Error::domain(format!(
            "monotone constraints need {N_ACTIONS} actions, MDP has {}",
            m.n_actions
        )));
    }
    for row in q.chunks_mut(N_ACTIONS) {
        let arr: [f64; N_ACTIONS] = (&*row).try_into().expect("chunk size");
        let out = match spec.kind {
            ConstraintKind::MonotoneCone => pava(&arr),
            _ => prox_penalty_raw(&arr, lambda, tol)?,
        };
        row.copy_from_slice(&out);
    }
    Ok(q)
}

/// `Psi_lambda = Phi_lambda o T*`.
///
/// Monotone kinds apply the prox to each Q-row and then take the max; the
/// Lipschitz kind applies the grid prox to `T* v`.
pub fn psi_lambda(
    v: &ValueGrid,
    m: &DiscreteMdp,
    spec: &ConstraintSpec,
    lambda: f64,
    tol: f64,
) -> Result<ValueGrid> {
    if !(lambda >= 0.0) {
        return Err(Error::domain(format!("lambda must be >= 0, got {lambda}")));
    }
    spec.validate()?;
    if lambda == 0.0 {
        return bellman_optimal(v, m);
    }
    match spec.kind {
        ConstraintKind::LipschitzPenalty => {
            let mut tv = bellman_optimal(v, m)?;
            if tv.meta.axes.is_empty() {
                tv.meta = m.meta.clone();
            }
            prox_lipschitz_penalty(&tv, spec, lambda, tol)
        }
        _ => {
            let q = constrained_q_rows(v, m, spec, lambda, tol)?;
            let values = q
                .chunks(m.n_actions)
                .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            Ok(ValueGrid {
                values,
                meta: v.meta.clone(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub value: ValueGrid,
    /// `|Psi(v) - v|_inf` at the returned iterate.
    pub residual: f64,
    pub iterations: usize,
}

/// Iteration cap for reaching `tol` from `v = 0`, plus a fixed margin.
pub fn default_iteration_cap(m: &DiscreteMdp, tol: f64) -> usize {
    let r_max = m.r_max().max(f64::MIN_POSITIVE);
    let needed = ((tol * (1.0 - m.gamma) / r_max).ln() / m.gamma.ln()).ceil();
    let needed = if needed.is_finite() && needed > 0.0 {
        needed as usize
    } else {
        0
    };
    needed + 100
}

pub fn fixed_point(
    m: &DiscreteMdp,
    spec: &ConstraintSpec,
    lambda: f64,
    tol: f64,
) -> Result<FixedPoint> {
    let mut init = ValueGrid::zeros(m.n_states);
    init.meta = m.meta.clone();
    fixed_point_from(m, spec, lambda, tol, init)
}

pub fn fixed_point_from(
    m: &DiscreteMdp,
    spec: &ConstraintSpec,
    lambda: f64,
    tol: f64,
    init: ValueGrid,
) -> Result<FixedPoint> {
    if !(tol > 0.0) {
        return Err(Error::domain("tol must be positive"));
    }
    m.validate()?;
    // A start far outside the value bound needs proportionally more sweeps.
    let extra = {
        let bound = m.r_max() / (1.0 - m.gamma);
        let excess = (init.sup_norm() + bound).max(1.0) / bound.max(f64::MIN_POSITIVE);
        (excess.ln() / -m.gamma.ln()).ceil().max(0.0) as usize
    };
    let cap = default_iteration_cap(m, tol) + extra;
    // inner prox solves are run well below the outer tolerance
    let inner_tol = (tol * 1e-3).max(1e-14);
    let mut v = init;
    let mut residual = f64::INFINITY;
    for it in 0..cap {
        let next = psi_lambda(&v, m, spec, lambda, inner_tol)?;
        residual = next.sup_dist(&v);
        v = next;
        if residual <= tol {
            return Ok(FixedPoint {
                value: v,
                residual,
                iterations: it + 1,
            });
        }
    }
    Err(Error::Solver {
        solver: "fixed_point",
        iterations: cap,
        residual,
    })
}

/// Distances `|v_lambda* - v_0*|_inf` for each `lambda`.
pub fn lambda_continuation(
    m: &DiscreteMdp,
    spec: &ConstraintSpec,
    lambdas: &[f64],
    tol: f64,
) -> Result<Vec<(f64, f64)>> {
    if lambdas.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::domain("lambdas must be nonnegative"));
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::domain("lambdas must be strictly descending"));
    }
    let base = fixed_point(m, spec, 0.0, tol)?;
    lambdas
        .iter()
        .map(|&l| {
            let fp = fixed_point(m, spec, l, tol)?;
            Ok((l, fp.value.sup_dist(&base.value)))
        })
        .collect()
}

/// Gradient of `1/2 |v - T* v|^2` with respect to a tabular `v`:
/// `(I - gamma P_greedy)^T (v - T* v)`.
///
/// This is the outer-objective gradient with a known transition model; the
/// sample-based critic has no access to `P` and uses detached targets instead.
pub fn bellman_residual_gradient(v: &ValueGrid, m: &DiscreteMdp) -> Result<Vec<f64>> {
    let tv = bellman_optimal(v, m)?;
    let resid: Vec<f64> = v
        .values
        .iter()
        .zip(&tv.values)
        .map(|(a, b)| a - b)
        .collect();
    let greedy = m.greedy(&v.values)?;
    let n = m.n_states;
    let mut grad = resid.clone();
    match &m.transition {
        TransitionModel::Dense(p) => {
            for s in 0..n {
                let row = &p[(s * m.n_actions + greedy[s]) * n..][..n];
                for (sp, &prob) in row.iter().enumerate() {
                    grad[sp] -= m.gamma * prob * resid[s];
                }
            }
        }
        TransitionModel::Iid(p) => {
            let total: f64 = resid.iter().sum();
            for (sp, &prob) in p.iter().enumerate() {
                grad[sp] -= m.gamma * prob * total;
            }
        }
    }
    Ok(grad)
}

/// Random MDP with `n_actions` actions, rewards uniform in `[-1, 1]` and
/// Dirichlet-like transition rows. Used by property tests and `verify`.
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    rng: &mut impl rand::Rng,
) -> DiscreteMdp {
    let reward = (0..n_states * n_actions)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let mut probs = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let raw: Vec<f64> = (0..n_states)
            .map(|_| -(rng.gen_range(f64::EPSILON..1.0f64)).ln())
            .collect();
        let s: f64 = raw.iter().sum();
        let mut row: Vec<f64> = raw.iter().map(|x| x / s).collect();
        // renormalize the last entry so rows sum to 1 within rounding
        let partial: f64 = row[..n_states - 1].iter().sum();
        row[n_states - 1] = (1.0 - partial).max(0.0);
        probs.extend(row);
    }
    DiscreteMdp {
        n_states,
        n_actions,
        reward,
        transition: TransitionModel::Dense(probs),
        gamma,
        meta: GridMeta::default(),
    }
}
