//! Self-checks behind `proxq verify`: operator properties, oracle
//! comparisons and gradient checks, each reported as a named pass/fail.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constraint::{
    project_monotone_cone, prox_monotone_penalty, ConstraintSpec, QRow, N_ACTIONS,
};
use crate::critic::{cg_solve, implicit_gradient, layer_loss, CgConfig, CriticLayer, Row};
use crate::env::{
    behavior_action, behavior_marginal, click_prob, expected_reward, generate_dataset, step, State,
};
use crate::error::Result;
use crate::mlp::{Activation, MlpParams};
use crate::tabular::{
    bellman_optimal, fixed_point, fixed_point_from, lambda_continuation, psi_lambda, random_mdp,
    ValueGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Props,
    Oracle,
    Grad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Check {
        Check {
            name,
            passed,
            detail,
        }
    }

    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Check {
        match r {
            Ok((passed, detail)) => Check::new(name, passed, detail),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Vec<Check> {
    match suite {
        Suite::Props => vec![
            Check::from_result(
                "contraction",
                contraction(1000, &[0.0, 0.01, 0.1, 1.0, 10.0], seed),
            ),
            Check::from_result("firm_nonexpansive", firm_nonexpansive(10_000, seed)),
            Check::from_result("fixed_point_unique", fixed_point_uniqueness(1e-8, seed)),
            Check::from_result("lambda_continuation", continuation(10, seed)),
        ],
        Suite::Oracle => vec![
            Check::from_result("pava_exhaustive", pava_vs_exhaustive()),
            Check::from_result("prox_large_lambda", prox_large_lambda(1000, seed)),
            Check::from_result("click_prob_spots", click_prob_spots()),
            Check::from_result("reward_monte_carlo", reward_monte_carlo(1_000_000, seed)),
            Check::from_result("behavior_marginal", behavior_marginal_mc(1_000_000, seed)),
            Check::from_result("dataset_determinism", dataset_determinism(10_000, seed)),
        ],
        Suite::Grad => vec![
            Check::from_result("implicit_gradient_fd", implicit_gradient_fd(100, seed)),
            Check::from_result("cg_random_spd", cg_random_spd(50, seed)),
            Check::from_result("mlp_vjp_fd", mlp_vjp_fd(20, seed)),
        ],
    }
}

/// `|Psi(v1) - Psi(v2)|_inf <= gamma |v1 - v2|_inf` on random MDPs, for the
/// plain optimality operator (`lambda = 0`) and the penalized one.
pub fn contraction(pairs: usize, lambdas: &[f64], seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConstraintSpec::monotone_penalty();
    let mut worst = f64::NEG_INFINITY;
    for &lambda in lambdas {
        let mut m = random_mdp(8, N_ACTIONS, 0.9, &mut rng);
        for i in 0..pairs {
            // fresh MDP every 100 pairs
            if i > 0 && i % 100 == 0 {
                m = random_mdp(8, N_ACTIONS, 0.9, &mut rng);
            }
            let v1 = ValueGrid::from_values((0..8).map(|_| rng.gen_range(-10.0..10.0)).collect());
            let v2 = ValueGrid::from_values((0..8).map(|_| rng.gen_range(-10.0..10.0)).collect());
            let (p1, p2) = if lambda == 0.0 {
                (bellman_optimal(&v1, &m)?, bellman_optimal(&v2, &m)?)
            } else {
                (
                    psi_lambda(&v1, &m, &spec, lambda, 1e-12)?,
                    psi_lambda(&v2, &m, &spec, lambda, 1e-12)?,
                )
            };
            let ratio_gap = p1.sup_dist(&p2) - m.gamma * v1.sup_dist(&v2);
            worst = worst.max(ratio_gap);
        }
    }
    Ok((
        worst <= 1e-9,
        format!("max(|Ψv1-Ψv2| - γ|v1-v2|) = {worst:.3e}"),
    ))
}

/// `|P x - P y|^2 <= <P x - P y, x - y>` for the cone projection.
pub fn firm_nonexpansive(pairs: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let x: Row = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
        let y: Row = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
        let px = project_monotone_cone(&QRow::new(x)?).0;
        let py = project_monotone_cone(&QRow::new(y)?).0;
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for a in 0..N_ACTIONS {
            let d = px[a] - py[a];
            lhs += d * d;
            rhs += d * (x[a] - y[a]);
        }
        worst = worst.max(lhs - rhs);
    }
    Ok((
        worst <= 1e-12,
        format!("max(|Px-Py|² - <Px-Py,x-y>) = {worst:.3e}"),
    ))
}

/// Fixed points from zero and from a far-away start agree within
/// `2 tol / (1 - gamma)`.
pub fn fixed_point_uniqueness(tol: f64, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConstraintSpec::monotone_penalty();
    let mut worst_ratio: f64 = 0.0;
    for lambda in [0.0, 0.1, 1.0, 10.0] {
        let m = random_mdp(12, N_ACTIONS, 0.9, &mut rng);
        let a = fixed_point(&m, &spec, lambda, tol)?;
        let init = ValueGrid::from_values((0..12).map(|_| rng.gen_range(-50.0..50.0)).collect());
        let b = fixed_point_from(&m, &spec, lambda, tol, init)?;
        let bound = 2.0 * tol / (1.0 - m.gamma);
        worst_ratio = worst_ratio.max(a.value.sup_dist(&b.value) / bound);
    }
    Ok((
        worst_ratio <= 1.0,
        format!("max distance / bound = {worst_ratio:.3e}"),
    ))
}

/// `|v_lambda* - v_0*|_inf` is nonincreasing as `lambda` decreases.
pub fn continuation(mdps: usize, seed: u64) -> Result<(bool, String)> {
    let spec = ConstraintSpec::monotone_penalty();
    let lambdas = [1.0, 0.1, 0.01, 0.001];
    let mut bad = 0;
    let mut last = Vec::new();
    for k in 0..mdps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let m = random_mdp(20, N_ACTIONS, 0.9, &mut rng);
        let d = lambda_continuation(&m, &spec, &lambdas, 1e-10)?;
        if d.windows(2).any(|w| w[1].1 > w[0].1 + 1e-9) {
            bad += 1;
        }
        last = d;
    }
    let dists: Vec<String> = last.iter().map(|(_, d)| format!("{d:.3e}")).collect();
    Ok((
        bad == 0,
        format!(
            "{bad} of {mdps} MDPs not monotone; last: [{}]",
            dists.join(", ")
        ),
    ))
}

/// Projection by enumerating every split of the 5 entries into contiguous
/// blocks, averaging each block and keeping the nearest nondecreasing result.
pub fn exhaustive_projection(y: &Row) -> Row {
    let mut best = [0.0; N_ACTIONS];
    let mut best_d = f64::INFINITY;
    for mask in 0u32..(1 << (N_ACTIONS - 1)) {
        let mut u = [0.0; N_ACTIONS];
        let mut start = 0;
        for end in 1..=N_ACTIONS {
            let cut = end == N_ACTIONS || mask & (1 << (end - 1)) != 0;
            if cut {
                let mean = y[start..end].iter().sum::<f64>() / (end - start) as f64;
                u[start..end].iter_mut().for_each(|v| *v = mean);
                start = end;
            }
        }
        if u.windows(2).all(|w| w[0] <= w[1]) {
            let d: f64 = u.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = u;
            }
        }
    }
    best
}

/// Pool-adjacent-violators against [`exhaustive_projection`] on every vector
/// with entries in {-2, ..., 2}.
pub fn pava_vs_exhaustive() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for code in 0..5usize.pow(N_ACTIONS as u32) {
        let mut c = code;
        let y: Row = std::array::from_fn(|_| {
            let v = (c % 5) as f64 - 2.0;
            c /= 5;
            v
        });
        let p = project_monotone_cone(&QRow::new(y)?).0;
        let e = exhaustive_projection(&y);
        for a in 0..N_ACTIONS {
            worst = worst.max((p[a] - e[a]).abs());
        }
        count += 1;
    }
    Ok((
        worst <= 1e-9,
        format!("{count} vectors, max deviation {worst:.3e}"),
    ))
}

pub fn prox_large_lambda(n: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let y = QRow::new(std::array::from_fn(|_| rng.gen_range(-2.0..2.0)))?;
        let p = prox_monotone_penalty(&y, 1e6, 1e-10)?;
        let q = project_monotone_cone(&y);
        for a in 0..N_ACTIONS {
            worst = worst.max((p.0[a] - q.0[a]).abs());
        }
    }
    Ok((
        worst <= 1e-3,
        format!("max |prox_1e6 - proj| = {worst:.3e}"),
    ))
}

pub fn click_prob_spots() -> Result<(bool, String)> {
    let s0 = State::new(0.0, 0.3)?;
    let s1 = State::new(1.0, 0.3)?;
    let p0 = click_prob(&s0, 0.0);
    let p1 = click_prob(&s1, 1.0);
    let ok = (p0 - 0.5).abs() < 1e-15 && (p1 - 0.924_141_819_978_756_7).abs() < 1e-12;
    Ok((ok, format!("σ(0) = {p0}, σ(2.5) = {p1:.10}")))
}

/// Monte Carlo reward means against `click_prob - c a` at a few (s, a).
pub fn reward_monte_carlo(samples: usize, seed: u64) -> Result<(bool, String)> {
    let cases = [
        (0.0, 0.2, 0.0),
        (0.5, 0.3, 0.5),
        (1.0, 0.4, 1.0),
        (0.25, 0.35, 0.75),
    ];
    let mut worst_z: f64 = 0.0;
    for (k, &(x, c, bid)) in cases.iter().enumerate() {
        let s = State::new(x, c)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(k as u64));
        let mut sum = 0.0;
        for _ in 0..samples {
            sum += step(&s, bid, &mut rng).0;
        }
        let mean = sum / samples as f64;
        let p = click_prob(&s, bid);
        let se = (p * (1.0 - p) / samples as f64).sqrt();
        worst_z = worst_z.max((mean - expected_reward(&s, bid)).abs() / se);
    }
    Ok((worst_z <= 3.0, format!("max |z| = {worst_z:.3}")))
}

pub fn behavior_marginal_mc(samples: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0usize; N_ACTIONS];
    for _ in 0..samples {
        counts[behavior_action(&mut rng)] += 1;
    }
    let p = behavior_marginal();
    let mut worst_z: f64 = 0.0;
    for a in 0..N_ACTIONS {
        let freq = counts[a] as f64 / samples as f64;
        let se = (p[a] * (1.0 - p[a]) / samples as f64).sqrt();
        worst_z = worst_z.max((freq - p[a]).abs() / se);
    }
    Ok((worst_z <= 3.0, format!("max |z| = {worst_z:.3}")))
}

fn dataset_hash(n: usize, seed: u64) -> Result<String> {
    let mut buf = Vec::new();
    generate_dataset(n, seed)?.write_jsonl(&mut buf)?;
    Ok(format!("{:x}", Sha256::digest(&buf)))
}

pub fn dataset_determinism(n: usize, seed: u64) -> Result<(bool, String)> {
    let a = dataset_hash(n, seed)?;
    let b = dataset_hash(n, seed)?;
    let c = dataset_hash(n, seed.wrapping_add(1))?;
    Ok((a == b && a != c, format!("sha256 {}", &a[..16])))
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Implicit gradient through the penalty prox against central differences of
/// the fully re-solved layer loss, on small critics (37 parameters).
pub fn implicit_gradient_fd(instances: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cg = CgConfig {
        tol: 1e-12,
        max_iter: None,
    };
    let mut worst: f64 = 0.0;
    let mut n_params = 0;
    for _ in 0..instances {
        let critic = MlpParams::new(&[2, 4, N_ACTIONS], Activation::Tanh, &mut rng)?;
        n_params = critic.n_params();
        let batch = 6;
        let feats: Vec<f64> = (0..2 * batch).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets: Vec<Row> = (0..batch)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect();
        let lambda = 10f64.powf(rng.gen_range(-1.0..1.0));
        let layer = CriticLayer::Prox { lambda };
        let g = implicit_gradient(&critic, &feats, &targets, lambda, &cg)?;
        let base = critic.flatten().0;
        let h = 1e-6;
        let mut fd = vec![0.0; base.len()];
        let mut probe = critic.clone();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            probe.set_flat(&p)?;
            let up = layer_loss(&probe, &feats, &targets, &layer)?;
            p[i] = base[i] - h;
            probe.set_flat(&p)?;
            let down = layer_loss(&probe, &feats, &targets, &layer)?;
            fd[i] = (up - down) / (2.0 * h);
        }
        worst = worst.max(relative_error(&g.0, &fd));
    }
    Ok((
        worst <= 1e-3,
        format!("{instances} instances, {n_params} params, max relative error {worst:.3e}"),
    ))
}

/// CG on `A = M^T M + 0.1 I` for random `M`, dimensions 1..=64.
pub fn cg_random_spd(systems: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..systems {
        let n = rng.gen_range(1..=64);
        let m: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum();
                a[i * n + j] = s + if i == j { 0.1 } else { 0.0 };
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let matvec = |x: &[f64]| -> Vec<f64> {
            (0..n)
                .map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum())
                .collect()
        };
        let x = cg_solve(matvec, &b, 1e-10, 10 * n)?;
        let ax = matvec(&x);
        let res: f64 = ax
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        let bn: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(res / bn);
    }
    Ok((worst <= 1e-8, format!("max relative residual {worst:.3e}")))
}

/// Parameter vector-Jacobian products against central differences.
pub fn mlp_vjp_fd(instances: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let act = if k % 2 == 0 {
            Activation::Tanh
        } else {
            Activation::Relu
        };
        let net = MlpParams::new(&[2, 5, 3, N_ACTIONS], act, &mut rng)?;
        let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let cot: Vec<f64> = (0..N_ACTIONS).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = net.vjp(&x, &cot)?;
        let base = net.flatten().0;
        let mut probe = net.clone();
        let h = 1e-6;
        let mut fd = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            probe.set_flat(&p)?;
            let up: f64 = probe
                .forward(&x)?
                .iter()
                .zip(&cot)
                .map(|(a, b)| a * b)
                .sum();
            p[i] -= 2.0 * h;
            probe.set_flat(&p)?;
            let down: f64 = probe
                .forward(&x)?
                .iter()
                .zip(&cot)
                .map(|(a, b)| a * b)
                .sum();
            fd[i] = (up - down) / (2.0 * h);
        }
        worst = worst.max(relative_error(&g.0, &fd));
    }
    Ok((worst <= 1e-5, format!("max relative error {worst:.3e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_projection_examples() {
        assert_eq!(
            exhaustive_projection(&[0.0, 1.0, 2.0, 3.0, 4.0]),
            [0.0, 1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(exhaustive_projection(&[2.0, 0.0, 0.0, 0.0, 0.0]), [0.4; 5]);
        let p = exhaustive_projection(&[1.0, 0.0, 2.0, 1.0, 3.0]);
        assert_eq!(p, [0.5, 0.5, 1.5, 1.5, 3.0]);
    }

    #[test]
    fn quick_suites_pass() {
        for (name, r) in [
            ("contraction", contraction(30, &[0.0, 1.0], 1)),
            ("firm", firm_nonexpansive(500, 1)),
            ("pava", pava_vs_exhaustive()),
            ("spots", click_prob_spots()),
            ("igrad", implicit_gradient_fd(5, 1)),
            ("cg", cg_random_spd(5, 1)),
            ("vjp", mlp_vjp_fd(4, 1)),
        ] {
            let (ok, detail) = r.unwrap();
            assert!(ok, "{name}: {detail}");
        }
    }
}
