//! Bid–Click: a single-slot auction with 5 bid fractions.
//!
//! A state `(x, c)` holds a query descriptor `x ~ U[0,1]` and a per-click cost
//! `c ~ U[0.2, 0.4]`. Bidding fraction `a` yields a click with probability
//! `sigmoid(2a + 0.5x)` and pays `c * a`. The next state is a fresh draw from
//! the state distribution.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::constraint::{BIDS, N_ACTIONS};
use crate::error::{Error, Result};
use crate::tabular::{DiscreteMdp, GridAxis, GridMeta, TransitionModel};

pub const GENERATOR_VERSION: &str = "bidclick-1";
pub const X_RANGE: (f64, f64) = (0.0, 1.0);
pub const C_RANGE: (f64, f64) = (0.2, 0.4);
pub const BEHAVIOR_MEAN: f64 = 0.4;
pub const BEHAVIOR_STD: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub c: f64,
}

impl State {
    pub fn new(x: f64, c: f64) -> Result<Self> {
        if !(x >= X_RANGE.0 && x <= X_RANGE.1) {
            return Err(Error::domain(format!("x = {x} outside [0, 1]")));
        }
        if !(c >= C_RANGE.0 && c <= C_RANGE.1) {
            return Err(Error::domain(format!("c = {c} outside [0.2, 0.4]")));
        }
        Ok(State { x, c })
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        State {
            x: rng.gen_range(X_RANGE.0..=X_RANGE.1),
            c: rng.gen_range(C_RANGE.0..=C_RANGE.1),
        }
    }
}

/// Network input for a state: both coordinates mapped onto `[-1, 1]`.
pub fn features(s: &State) -> [f64; 2] {
    [2.0 * s.x - 1.0, (s.c - 0.3) / 0.1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: State,
    /// Index into [`BIDS`].
    pub a: usize,
    pub r: f64,
    pub s_next: State,
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        State::new(self.s.x, self.s.c)?;
        State::new(self.s_next.x, self.s_next.c)?;
        if self.a >= N_ACTIONS {
            return Err(Error::domain(format!(
                "action index {} out of range",
                self.a
            )));
        }
        if !(self.r >= -0.4 - 1e-12 && self.r <= 1.0) {
            return Err(Error::domain(format!(
                "reward {} outside [-0.4, 1]",
                self.r
            )));
        }
        Ok(())
    }

    pub fn bid(&self) -> f64 {
        BIDS[self.a]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub seed: u64,
    pub generator_version: String,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn click_prob(s: &State, bid: f64) -> f64 {
    sigmoid(2.0 * bid + 0.5 * s.x)
}

/// `E[r | s, a]` for a bid fraction.
pub fn expected_reward(s: &State, bid: f64) -> f64 {
    click_prob(s, bid) - s.c * bid
}

/// True action values of the one-step problem, one per bid.
pub fn true_q_row(s: &State) -> [f64; N_ACTIONS] {
    std::array::from_fn(|a| expected_reward(s, BIDS[a]))
}

pub fn step(s: &State, bid: f64, rng: &mut impl Rng) -> (f64, State) {
    let click = rng.gen::<f64>() < click_prob(s, bid);
    let r = if click { 1.0 } else { 0.0 } - s.c * bid;
    (r, State::sample(rng))
}

/// Snaps a raw behavior draw: clip to `[0, 1]`, then nearest bid, ties upward.
pub fn snap_bid(g: f64) -> usize {
    let g = g.clamp(0.0, 1.0);
    let mut best = 0;
    for (i, b) in BIDS.iter().enumerate() {
        if (g - b).abs() <= (g - BIDS[best]).abs() {
            best = i;
        }
    }
    best
}

pub fn behavior_action(rng: &mut impl Rng) -> usize {
    let n = Normal::new(BEHAVIOR_MEAN, BEHAVIOR_STD).expect("valid normal");
    snap_bid(n.sample(rng))
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Analytic probabilities of each snapped behavior action.
pub fn behavior_marginal() -> [f64; N_ACTIONS] {
    let cut = |b: f64| normal_cdf((b - BEHAVIOR_MEAN) / BEHAVIOR_STD);
    let edges = [0.125, 0.375, 0.625, 0.875];
    let mut out = [0.0; N_ACTIONS];
    let mut prev = 0.0;
    for (i, e) in edges.iter().enumerate() {
        let c = cut(*e);
        out[i] = c - prev;
        prev = c;
    }
    out[N_ACTIONS - 1] = 1.0 - prev;
    out
}

pub fn generate_dataset(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::domain("dataset size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n);
    for _ in 0..n {
        let s = State::sample(&mut rng);
        let a = behavior_action(&mut rng);
        let (r, s_next) = step(&s, BIDS[a], &mut rng);
        transitions.push(Transition { s, a, r, s_next });
    }
    Ok(Dataset {
        transitions,
        seed,
        generator_version: GENERATOR_VERSION.to_string(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n: usize,
    seed: u64,
    generator_version: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    x: f64,
    c: f64,
    a: usize,
    bid: f64,
    r: f64,
    x_next: f64,
    c_next: f64,
}

fn f17(v: f64) -> String {
    format!("{v:.16e}")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            n: self.transitions.len(),
            seed: self.seed,
            generator_version: self.generator_version.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for t in &self.transitions {
            writeln!(
                w,
                "{{\"x\":{},\"c\":{},\"a\":{},\"bid\":{},\"r\":{},\"x_next\":{},\"c_next\":{}}}",
                f17(t.s.x),
                f17(t.s.c),
                t.a,
                f17(t.bid()),
                f17(t.r),
                f17(t.s_next.x),
                f17(t.s_next.c)
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header: Header = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(Error::Format("empty dataset file".into())),
        };
        let mut transitions = Vec::with_capacity(header.n);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(&line)?;
            if l.a >= N_ACTIONS || BIDS[l.a] != l.bid {
                return Err(Error::Format(format!(
                    "line {}: action {} does not match bid {}",
                    i + 2,
                    l.a,
                    l.bid
                )));
            }
            let t = Transition {
                s: State { x: l.x, c: l.c },
                a: l.a,
                r: l.r,
                s_next: State {
                    x: l.x_next,
                    c: l.c_next,
                },
            };
            t.validate()
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))?;
            transitions.push(t);
        }
        if transitions.len() != header.n {
            return Err(Error::Format(format!(
                "header says {} transitions, found {}",
                header.n,
                transitions.len()
            )));
        }
        if transitions.is_empty() {
            return Err(Error::Format("dataset has no transitions".into()));
        }
        Ok(Dataset {
            transitions,
            seed: header.seed,
            generator_version: header.generator_version,
        })
    }

    /// First `round(fraction * n)` transitions of a seeded permutation; smaller
    /// fractions of the same seed are prefixes of larger ones.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::domain(format!("fraction {fraction} outside (0, 1]")));
        }
        let n = self.transitions.len();
        let k = ((fraction * n as f64).round() as usize).clamp(1, n);
        if k == n && fraction == 1.0 {
            return Ok(self.clone());
        }
        let order = subsample_order(n, seed);
        let mut idx: Vec<usize> = order[..k].to_vec();
        idx.sort_unstable();
        Ok(Dataset {
            transitions: idx.iter().map(|&i| self.transitions[i]).collect(),
            seed: self.seed,
            generator_version: self.generator_version.clone(),
        })
    }
}

pub(crate) fn subsample_order(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    // separate stream from dataset generation under the same seed
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SUBSAMPLE_STREAM);
    order.shuffle(&mut rng);
    order
}

const SUBSAMPLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// `max_a E[r | s, a]` over the 5 bids.
pub fn optimal_value(s: &State) -> f64 {
    true_q_row(s)
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn optimal_action(s: &State) -> usize {
    let q = true_q_row(s);
    let mut best = 0;
    for a in 1..N_ACTIONS {
        if q[a] > q[best] {
            best = a;
        }
    }
    best
}

/// Number of adjacent pairs with `q[i] > q[i + 1] + tol` over `states`.
pub fn count_monotonicity_errors<F>(q_fn: F, eval_states: &[State], tol: f64) -> Result<usize>
where
    F: Fn(&State) -> [f64; N_ACTIONS],
{
    if !(tol > 0.0) {
        return Err(Error::domain("tol must be > 0"));
    }
    Ok(eval_states
        .iter()
        .map(|s| {
            let q = q_fn(s);
            q.windows(2).filter(|w| w[0] > w[1] + tol).count()
        })
        .sum())
}

pub const EVAL_GRID_X: usize = 50;
pub const EVAL_GRID_C: usize = 20;
pub const MONOTONICITY_TOL: f64 = 1e-6;

/// Cartesian evaluation grid, x-major, endpoints included.
pub fn eval_grid(nx: usize, nc: usize) -> Vec<State> {
    let xs = GridAxis::new("x", X_RANGE.0, X_RANGE.1, nx);
    let cs = GridAxis::new("c", C_RANGE.0, C_RANGE.1, nc);
    let mut out = Vec::with_capacity(nx * nc);
    for i in 0..nx {
        for j in 0..nc {
            out.push(State {
                x: xs.coord(i),
                c: cs.coord(j).clamp(C_RANGE.0, C_RANGE.1),
            });
        }
    }
    out
}

pub fn default_eval_grid() -> Vec<State> {
    eval_grid(EVAL_GRID_X, EVAL_GRID_C)
}

/// The environment discretized on an `nx * nc` state grid with uniform i.i.d.
/// next states; used to cross-check the tabular operators on Bid–Click.
pub fn bidclick_mdp(nx: usize, nc: usize, gamma: f64) -> Result<DiscreteMdp> {
    let states = eval_grid(nx, nc);
    let n = states.len();
    let reward = states.iter().flat_map(true_q_row).collect();
    let mut mdp = DiscreteMdp::new(
        n,
        N_ACTIONS,
        reward,
        TransitionModel::Iid(vec![1.0 / n as f64; n]),
        gamma,
    )?;
    mdp.meta = GridMeta {
        axes: vec![
            GridAxis::new("x", X_RANGE.0, X_RANGE.1, nx),
            GridAxis::new("c", C_RANGE.0, C_RANGE.1, nc),
        ],
    };
    Ok(mdp)
}

/// Share of adjacent action pairs on `states` where the true expected reward
/// decreases with the bid.
pub fn true_monotonicity_violation_rate(states: &[State]) -> f64 {
    let bad = count_monotonicity_errors(true_q_row, states, MONOTONICITY_TOL).unwrap_or(0);
    bad as f64 / (states.len() * (N_ACTIONS - 1)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn click_prob_examples() {
        let s0 = State::new(0.0, 0.3).unwrap();
        assert_eq!(click_prob(&s0, 0.0), 0.5);
        let s1 = State::new(1.0, 0.3).unwrap();
        assert!((click_prob(&s1, 1.0) - 0.924_141_819_978_756_6).abs() < 1e-12);
        let sh = State::new(0.5, 0.3).unwrap();
        assert!((click_prob(&sh, 0.25) - 0.679_178_699_175_393).abs() < 1e-12);
        for s in default_eval_grid() {
            for w in BIDS.windows(2) {
                assert!(click_prob(&s, w[1]) > click_prob(&s, w[0]));
            }
        }
    }

    #[test]
    fn state_bounds() {
        assert!(State::new(-0.01, 0.3).is_err());
        assert!(State::new(0.5, 0.41).is_err());
        assert!(State::new(1.0, 0.2).is_ok());
    }

    #[test]
    fn reward_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = State::new(0.3, 0.25).unwrap();
        for _ in 0..1000 {
            let (r, _) = step(&s, 0.75, &mut rng);
            assert!(r == -0.25 * 0.75 || r == 1.0 - 0.25 * 0.75);
            let (r0, _) = step(&s, 0.0, &mut rng);
            assert!(r0 == 0.0 || r0 == 1.0);
        }
    }

    #[test]
    fn snap_examples() {
        assert_eq!(snap_bid(0.4), 2);
        assert_eq!(snap_bid(-1.3), 0);
        assert_eq!(snap_bid(7.0), 4);
        assert_eq!(snap_bid(0.125), 1);
        assert_eq!(snap_bid(0.875), 4);
        assert_eq!(snap_bid(0.1249), 0);
    }

    #[test]
    fn behavior_marginal_matches_normal_cdf() {
        let m = behavior_marginal();
        assert!((m[0] - 0.245_883_85).abs() < 1e-7, "{m:?}");
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn optimal_value_examples() {
        let s = State::new(0.0, 0.4).unwrap();
        assert!((optimal_value(&s) - (sigmoid(1.0) - 0.2)).abs() < 1e-15);
        assert_eq!(optimal_action(&s), 2);
        let s = State::new(0.0, 0.2).unwrap();
        assert!((optimal_value(&s) - (sigmoid(2.0) - 0.2)).abs() < 1e-15);
        assert_eq!(optimal_action(&s), 4);
        for s in default_eval_grid() {
            assert!(optimal_value(&s) >= 0.5);
        }
    }

    #[test]
    fn discrete_max_is_close_to_continuous_max() {
        for s in eval_grid(11, 5) {
            let cont = (0..=10_000)
                .map(|i| expected_reward(&s, i as f64 / 10_000.0))
                .fold(f64::NEG_INFINITY, f64::max);
            let disc = optimal_value(&s);
            assert!(disc <= cont + 1e-15);
            // the bid grid has spacing 0.25; the objective is smooth with slope <= 0.5
            assert!(cont - disc < 0.02, "{s:?}: {cont} vs {disc}");
        }
    }

    #[test]
    fn monotonicity_error_examples() {
        let states = eval_grid(10, 10);
        let mono = |_: &State| [0.0, 0.1, 0.2, 0.3, 0.4];
        assert_eq!(count_monotonicity_errors(mono, &states, 1e-6).unwrap(), 0);
        let flat = |_: &State| [0.3; 5];
        assert_eq!(count_monotonicity_errors(flat, &states, 1e-6).unwrap(), 0);
        let one = |_: &State| [0.0, 0.1, 0.05, 0.3, 0.4];
        assert_eq!(count_monotonicity_errors(one, &states, 1e-6).unwrap(), 100);
        assert!(count_monotonicity_errors(one, &states, 0.0).is_err());
    }

    #[test]
    fn eval_grid_shape() {
        let g = default_eval_grid();
        assert_eq!(g.len(), 1000);
        assert_eq!(g[0], State { x: 0.0, c: 0.2 });
        assert_eq!(g[999], State { x: 1.0, c: 0.4 });
    }

    #[test]
    fn dataset_is_deterministic_and_round_trips() {
        let a = generate_dataset(200, 9).unwrap();
        let b = generate_dataset(200, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(200, 10).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        a.save(&p).unwrap();
        let back = Dataset::load(&p).unwrap();
        assert_eq!(a, back);
        let first = std::fs::read_to_string(&p).unwrap();
        assert!(first.starts_with("{\"n\":200,\"seed\":9,\"generator_version\":\"bidclick-1\"}\n"));
    }

    #[test]
    fn load_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"n\":1,\"seed\":0,\"generator_version\":\"x\"}\n").unwrap();
        assert!(Dataset::load(&p).is_err());
        std::fs::write(
            &p,
            "{\"n\":1,\"seed\":0,\"generator_version\":\"x\"}\n{\"x\":0.5,\"c\":0.3,\"a\":1,\"bid\":0.5,\"r\":0.0,\"x_next\":0.1,\"c_next\":0.3}\n",
        )
        .unwrap();
        assert!(Dataset::load(&p).is_err());
    }

    #[test]
    fn subsample_prefix_stability() {
        let d = generate_dataset(400, 3).unwrap();
        let full = d.subsample(1.0, 7).unwrap();
        assert_eq!(full, d);
        let quarter = d.subsample(0.25, 7).unwrap();
        let sixteenth = d.subsample(0.0625, 7).unwrap();
        assert_eq!(quarter.len(), 100);
        assert_eq!(sixteenth.len(), 25);
        for t in &sixteenth.transitions {
            assert!(quarter.transitions.contains(t));
        }
    }

    #[test]
    fn bidclick_mdp_is_valid() {
        let m = bidclick_mdp(5, 3, 0.9).unwrap();
        assert_eq!(m.n_states, 15);
        m.validate().unwrap();
    }
}
