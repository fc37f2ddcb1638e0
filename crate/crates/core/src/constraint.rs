//! Convex constraint functionals on action-value rows and value grids.
//!
//! The monotone penalty acts on a [`QRow`], the five Q-values of one state
//! ordered by ascending bid. Its derivative in the action is discretized as
//! adjacent forward differences `q[i+1] - q[i]` without dividing by the action
//! spacing; the uniform spacing folds into the penalty weight.

use serde::{Deserialize, Serialize};

use crate::critic::cg_solve;
use crate::error::{Error, Result};
use crate::tabular::ValueGrid;

/// Number of discrete bid actions.
pub const N_ACTIONS: usize = 5;

/// Bid fractions, indexed by action.
pub const BIDS: [f64; N_ACTIONS] = [0.0, 0.25, 0.5, 0.75, 1.0];

const NEWTON_MAX_ITER: usize = 50;
pub const DEFAULT_PROX_TOL: f64 = 1e-10;

/// Q-values of one state for the five bid actions, ascending in the bid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QRow(pub [f64; N_ACTIONS]);

impl QRow {
    pub fn new(values: [f64; N_ACTIONS]) -> Result<Self> {
        let row = QRow(values);
        row.check_finite()?;
        Ok(row)
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; N_ACTIONS] = values.try_into().map_err(|_| {
            Error::domain(format!(
                "QRow needs {N_ACTIONS} values, got {}",
                values.len()
            ))
        })?;
        Self::new(arr)
    }

    pub fn values(&self) -> &[f64; N_ACTIONS] {
        &self.0
    }

    fn check_finite(&self) -> Result<()> {
        if self.0.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::domain(format!("non-finite QRow {:?}", self.0)))
        }
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.0.windows(2).all(|w| w[0] <= w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Squared hinge on decreasing adjacent action pairs.
    MonotonePenalty,
    /// Indicator of the nondecreasing cone; its prox is the Euclidean projection.
    MonotoneCone,
    /// Squared violation of a slope bound on adjacent grid points.
    LipschitzPenalty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    /// Slope bound `L`, used only by [`ConstraintKind::LipschitzPenalty`].
    pub lipschitz_bound: f64,
    /// Distance between adjacent grid points for Lipschitz finite differences.
    pub grid_spacing: f64,
}

impl ConstraintSpec {
    pub fn monotone_penalty() -> Self {
        ConstraintSpec {
            kind: ConstraintKind::MonotonePenalty,
            lipschitz_bound: 0.0,
            grid_spacing: 1.0,
        }
    }

    pub fn monotone_cone() -> Self {
        ConstraintSpec {
            kind: ConstraintKind::MonotoneCone,
            ..Self::monotone_penalty()
        }
    }

    pub fn lipschitz(bound: f64, grid_spacing: f64) -> Result<Self> {
        let spec = ConstraintSpec {
            kind: ConstraintKind::LipschitzPenalty,
            lipschitz_bound: bound,
            grid_spacing,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grid_spacing > 0.0 && self.grid_spacing.is_finite()) {
            return Err(Error::domain("grid_spacing must be positive"));
        }
        if self.kind == ConstraintKind::LipschitzPenalty
            && !(self.lipschitz_bound >= 0.0 && self.lipschitz_bound.is_finite())
        {
            return Err(Error::domain("lipschitz_bound must be nonnegative"));
        }
        Ok(())
    }

    pub fn is_monotone(&self) -> bool {
        matches!(
            self.kind,
            ConstraintKind::MonotonePenalty | ConstraintKind::MonotoneCone
        )
    }
}

/// Penalty weight and its dual step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: f64,
    pub eta_lambda: f64,
}

impl DualState {
    pub fn new(lambda: f64, eta_lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::domain(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(eta_lambda > 0.0 && eta_lambda.is_finite()) {
            return Err(Error::domain(format!(
                "eta_lambda must be > 0, got {eta_lambda}"
            )));
        }
        Ok(DualState { lambda, eta_lambda })
    }
}

/// Projected dual ascent `lambda <- max(0, lambda + eta * C)`.
pub fn dual_update(d: DualState, c_value: f64) -> DualState {
    DualState {
        lambda: (d.lambda + d.eta_lambda * c_value).max(0.0),
        ..d
    }
}

#[inline]
pub(crate) fn penalty_value(q: &[f64; N_ACTIONS]) -> f64 {
    q.windows(2)
        .map(|w| {
            let v = (w[0] - w[1]).max(0.0);
            v * v
        })
        .sum()
}

#[inline]
pub(crate) fn penalty_grad(q: &[f64; N_ACTIONS]) -> [f64; N_ACTIONS] {
    let mut g = [0.0; N_ACTIONS];
    for i in 0..N_ACTIONS - 1 {
        let m = (q[i] - q[i + 1]).max(0.0);
        g[i] += 2.0 * m;
        g[i + 1] -= 2.0 * m;
    }
    g
}

/// Hessian-vector product of the monotone penalty at `q`.
///
/// Each active hinge (strictly decreasing pair) contributes `2 d d^T` with
/// `d = e_{i+1} - e_i`; inactive and tied pairs contribute nothing.
#[inline]
pub fn penalty_hvp(q: &[f64; N_ACTIONS], w: &[f64; N_ACTIONS]) -> [f64; N_ACTIONS] {
    let mut out = [0.0; N_ACTIONS];
    for i in 0..N_ACTIONS - 1 {
        if q[i + 1] < q[i] {
            let t = 2.0 * (w[i + 1] - w[i]);
            out[i + 1] += t;
            out[i] -= t;
        }
    }
    out
}

/// `C(q) = sum_i max(0, -(q[i+1] - q[i]))^2`.
pub fn monotone_penalty(q: &QRow) -> Result<f64> {
    q.check_finite()?;
    Ok(penalty_value(&q.0))
}

pub fn monotone_penalty_grad(q: &QRow) -> Result<[f64; N_ACTIONS]> {
    q.check_finite()?;
    Ok(penalty_grad(&q.0))
}

/// Euclidean projection onto nondecreasing rows by pool-adjacent-violators.
///
/// A value pools into the previous block only when it is strictly below the
/// block mean, so feasible rows pass through bit-for-bit.
pub fn project_monotone_cone(q: &QRow) -> QRow {
    QRow(pava(&q.0))
}

pub(crate) fn pava(q: &[f64; N_ACTIONS]) -> [f64; N_ACTIONS] {
    let (means, sizes, nblocks) = pava_blocks(q);
    let mut out = [0.0; N_ACTIONS];
    let mut k = 0;
    for b in 0..nblocks {
        for _ in 0..sizes[b] {
            out[k] = means[b];
            k += 1;
        }
    }
    out
}

/// Block means and sizes of the isotonic fit, in order.
pub(crate) fn pava_blocks(q: &[f64; N_ACTIONS]) -> ([f64; N_ACTIONS], [usize; N_ACTIONS], usize) {
    let mut means = [0.0; N_ACTIONS];
    let mut sizes = [0usize; N_ACTIONS];
    let mut n = 0;
    for &v in q {
        means[n] = v;
        sizes[n] = 1;
        n += 1;
        while n > 1 && means[n - 1] < means[n - 2] {
            let (m2, s2) = (means[n - 1], sizes[n - 1]);
            let (m1, s1) = (means[n - 2], sizes[n - 2]);
            let s = s1 + s2;
            means[n - 2] = (m1 * s1 as f64 + m2 * s2 as f64) / s as f64;
            sizes[n - 2] = s;
            n -= 1;
        }
    }
    (means, sizes, n)
}

/// Jacobian of the cone projection at `q` applied to `w`: the block average of
/// `w` over each pooled block. The Jacobian is symmetric, so this is also its
/// transpose product.
pub fn projection_jacobian_apply(q: &[f64; N_ACTIONS], w: &[f64; N_ACTIONS]) -> [f64; N_ACTIONS] {
    let (_, sizes, n) = pava_blocks(q);
    let mut out = [0.0; N_ACTIONS];
    let mut start = 0;
    for &size in &sizes[..n] {
        let avg = w[start..start + size].iter().sum::<f64>() / size as f64;
        out[start..start + size].fill(avg);
        start += size;
    }
    out
}

/// Solves the 5x5 symmetric tridiagonal system `(I + lambda H(u)) z = rhs`.
fn solve_newton_system(
    u: &[f64; N_ACTIONS],
    lambda: f64,
    rhs: &[f64; N_ACTIONS],
) -> [f64; N_ACTIONS] {
    let mut diag = [1.0; N_ACTIONS];
    let mut off = [0.0; N_ACTIONS - 1];
    for i in 0..N_ACTIONS - 1 {
        if u[i + 1] < u[i] {
            let h = 2.0 * lambda;
            diag[i] += h;
            diag[i + 1] += h;
            off[i] = -h;
        }
    }
    // Thomas algorithm; the matrix is SPD so no pivoting is needed.
    let mut c = [0.0; N_ACTIONS];
    let mut d = [0.0; N_ACTIONS];
    c[0] = if N_ACTIONS > 1 { off[0] / diag[0] } else { 0.0 };
    d[0] = rhs[0] / diag[0];
    for i in 1..N_ACTIONS {
        let denom = diag[i] - off[i - 1] * c[i - 1];
        if i < N_ACTIONS - 1 {
            c[i] = off[i] / denom;
        }
        d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / denom;
    }
    let mut z = [0.0; N_ACTIONS];
    z[N_ACTIONS - 1] = d[N_ACTIONS - 1];
    for i in (0..N_ACTIONS - 1).rev() {
        z[i] = d[i] - c[i] * z[i + 1];
    }
    z
}

fn prox_objective(u: &[f64; N_ACTIONS], y: &[f64; N_ACTIONS], lambda: f64) -> f64 {
    let fit: f64 = u.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * fit + lambda * penalty_value(u)
}

/// `argmin_u 1/2 |u - y|^2 + lambda C(u)` for the monotone penalty, by damped
/// Newton on the piecewise-quadratic objective.
///
/// Stops when the first-order residual `u - y + lambda grad C(u)` is below
/// `tol` in the max norm (raised to the rounding floor `~eps * lambda * |y|`
/// when that is larger), or when a Newton step no longer changes `u` at
/// machine precision.
pub fn prox_monotone_penalty(y: &QRow, lambda: f64, tol: f64) -> Result<QRow> {
    y.check_finite()?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::domain(format!("lambda must be >= 0, got {lambda}")));
    }
    if !(tol > 0.0) {
        return Err(Error::domain("tol must be positive"));
    }
    prox_penalty_raw(&y.0, lambda, tol).map(QRow)
}

pub(crate) fn prox_penalty_raw(
    y: &[f64; N_ACTIONS],
    lambda: f64,
    tol: f64,
) -> Result<[f64; N_ACTIONS]> {
    if lambda == 0.0 {
        return Ok(*y);
    }
    let mut u = *y;
    let mut residual = f64::INFINITY;
    // The residual cannot drop below rounding in `lambda * grad C(u)`.
    let y_scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = tol.max(16.0 * f64::EPSILON * (1.0 + lambda) * y_scale);
    for _ in 0..NEWTON_MAX_ITER {
        let gc = penalty_grad(&u);
        let mut g = [0.0; N_ACTIONS];
        for i in 0..N_ACTIONS {
            g[i] = u[i] - y[i] + lambda * gc[i];
        }
        residual = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if residual <= tol {
            return Ok(u);
        }
        let step = solve_newton_system(&u, lambda, &g);
        let f0 = prox_objective(&u, y, lambda);
        let slope: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let mut next = u;
        let mut accepted = false;
        for _ in 0..30 {
            for i in 0..N_ACTIONS {
                next[i] = u[i] - t * step[i];
            }
            if prox_objective(&next, y, lambda) <= f0 - 1e-4 * t * slope {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let scale = u.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let moved = next
            .iter()
            .zip(&u)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if !accepted || moved <= 4.0 * f64::EPSILON * scale {
            // Objective is piecewise quadratic: once the Newton step stalls at
            // machine precision the active set is final and `u` is the minimizer.
            if moved <= 1e-9 * scale {
                return Ok(if accepted { next } else { u });
            }
            break;
        }
        u = next;
    }
    Err(Error::Solver {
        solver: "prox_monotone_penalty",
        iterations: NEWTON_MAX_ITER,
        residual,
    })
}

/// Shape of a value grid as axis lengths; a grid without axis metadata is 1-D.
fn grid_dims(v: &ValueGrid) -> Vec<usize> {
    if v.meta.axes.is_empty() {
        vec![v.values.len()]
    } else {
        v.meta.axes.iter().map(|a| a.points).collect()
    }
}

/// Visits every adjacent pair `(i, j)` of flat indices along every axis (row-major).
fn for_each_adjacent(dims: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = dims.iter().product();
    let mut stride = 1;
    for axis in (0..dims.len()).rev() {
        let n = dims[axis];
        for idx in 0..total {
            let coord = (idx / stride) % n;
            if coord + 1 < n {
                f(idx, idx + stride);
            }
        }
        stride *= n;
    }
}

fn check_lipschitz_grid(v: &ValueGrid, spec: &ConstraintSpec) -> Result<Vec<usize>> {
    if spec.kind != ConstraintKind::LipschitzPenalty {
        return Err(Error::domain(
            "lipschitz_penalty needs a LipschitzPenalty spec",
        ));
    }
    spec.validate()?;
    let dims = grid_dims(v);
    if dims.iter().any(|&n| n < 2) {
        return Err(Error::domain(format!(
            "Lipschitz penalty needs >= 2 points per axis, got {dims:?}"
        )));
    }
    if dims.iter().product::<usize>() != v.values.len() {
        return Err(Error::domain("grid metadata does not match value count"));
    }
    Ok(dims)
}

/// `sum over adjacent grid pairs of max(0, |v(s) - v(s')| / h - L)^2`.
pub fn lipschitz_penalty(v: &ValueGrid, spec: &ConstraintSpec) -> Result<f64> {
    let dims = check_lipschitz_grid(v, spec)?;
    let (h, l) = (spec.grid_spacing, spec.lipschitz_bound);
    let mut total = 0.0;
    for_each_adjacent(&dims, |i, j| {
        let m = ((v.values[i] - v.values[j]).abs() / h - l).max(0.0);
        total += m * m;
    });
    Ok(total)
}

pub fn lipschitz_penalty_grad(v: &ValueGrid, spec: &ConstraintSpec) -> Result<Vec<f64>> {
    let dims = check_lipschitz_grid(v, spec)?;
    Ok(lipschitz_grad_raw(&v.values, &dims, spec))
}

fn lipschitz_grad_raw(values: &[f64], dims: &[usize], spec: &ConstraintSpec) -> Vec<f64> {
    let (h, l) = (spec.grid_spacing, spec.lipschitz_bound);
    let mut g = vec![0.0; values.len()];
    for_each_adjacent(dims, |i, j| {
        let d = values[i] - values[j];
        let m = (d.abs() / h - l).max(0.0);
        if m > 0.0 {
            let t = 2.0 * m * d.signum() / h;
            g[i] += t;
            g[j] -= t;
        }
    });
    g
}

fn lipschitz_hvp_raw(values: &[f64], dims: &[usize], spec: &ConstraintSpec, w: &[f64]) -> Vec<f64> {
    let (h, l) = (spec.grid_spacing, spec.lipschitz_bound);
    let mut out = vec![0.0; values.len()];
    for_each_adjacent(dims, |i, j| {
        if (values[i] - values[j]).abs() / h > l {
            let t = 2.0 * (w[i] - w[j]) / (h * h);
            out[i] += t;
            out[j] -= t;
        }
    });
    out
}

/// Prox of `lambda * lipschitz_penalty` over a whole grid, by Newton-CG.
pub fn prox_lipschitz_penalty(
    y: &ValueGrid,
    spec: &ConstraintSpec,
    lambda: f64,
    tol: f64,
) -> Result<ValueGrid> {
    let dims = check_lipschitz_grid(y, spec)?;
    if lambda == 0.0 {
        return Ok(y.clone());
    }
    let n = y.values.len();
    let objective = |u: &[f64]| -> f64 {
        let fit: f64 = u
            .iter()
            .zip(&y.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let grid = ValueGrid {
            values: u.to_vec(),
            meta: y.meta.clone(),
        };
        0.5 * fit + lambda * lipschitz_penalty(&grid, spec).unwrap_or(f64::INFINITY)
    };
    let mut u = y.values.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITER {
        let gc = lipschitz_grad_raw(&u, &dims, spec);
        let g: Vec<f64> = (0..n)
            .map(|i| u[i] - y.values[i] + lambda * gc[i])
            .collect();
        residual = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if residual <= tol {
            return Ok(ValueGrid {
                values: u,
                meta: y.meta.clone(),
            });
        }
        let uu = u.clone();
        let step = cg_solve(
            |w: &[f64]| {
                let hw = lipschitz_hvp_raw(&uu, &dims, spec, w);
                w.iter().zip(hw).map(|(a, b)| a + lambda * b).collect()
            },
            &g,
            1e-12,
            4 * n,
        )
        .or_else(|e| match e {
            // Accept a slightly inexact direction; the line search guards progress.
            Error::Solver { .. } => Ok(g.clone()),
            other => Err(other),
        })?;
        let f0 = objective(&u);
        let slope: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let next: Vec<f64> = (0..n).map(|i| u[i] - t * step[i]).collect();
            if objective(&next) <= f0 - 1e-4 * t * slope {
                accepted = Some(next);
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(next) => {
                let moved = next
                    .iter()
                    .zip(&u)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                u = next;
                let scale = u.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                if moved <= 1e-14 * scale {
                    return Ok(ValueGrid {
                        values: u,
                        meta: y.meta.clone(),
                    });
                }
            }
            None => break,
        }
    }
    Err(Error::Solver {
        solver: "prox_lipschitz_penalty",
        iterations: NEWTON_MAX_ITER,
        residual,
    })
}
