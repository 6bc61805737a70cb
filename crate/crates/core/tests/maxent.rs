use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajirl_core::adaptor::{RewardMaps, R_MIN};
use trajirl_core::irl::{
    demo_svf, enumerate_path_distribution, expected_svf, irl_gradient, log_likelihood, path_probability,
    soft_value_iteration, Mdp, Policy, SolveMode, END, VI_TOL,
};
use trajirl_core::scene::Demonstration;

const MOVES: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

fn reward(side: usize, seed: u64) -> RewardMaps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = side * side;
    RewardMaps {
        side,
        r: (0..n).map(|_| -R_MIN - rng.random_range(0.0..2.0)).collect(),
        r_g: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

fn neighbours(side: usize, s: usize) -> Vec<usize> {
    let (r, c) = ((s / side) as i64, (s % side) as i64);
    MOVES
        .iter()
        .map(|(dr, dc)| (r + dr, c + dc))
        .filter(|&(r, c)| r >= 0 && c >= 0 && r < side as i64 && c < side as i64)
        .map(|(r, c)| (r * side as i64 + c) as usize)
        .collect()
}

/// Every path of 1..=h states from `s0`, weighted by exp(Σ R + R_g(last)), normalised.
fn brute_force(rw: &RewardMaps, side: usize, h: usize, s0: usize) -> BTreeMap<Vec<usize>, f64> {
    let mut out = BTreeMap::new();
    let mut stack = vec![(vec![s0], rw.r[s0])];
    while let Some((path, acc)) = stack.pop() {
        let last = *path.last().unwrap();
        out.insert(path.clone(), acc + rw.r_g[last]);
        if path.len() < h {
            for n in neighbours(side, last) {
                let mut p = path.clone();
                p.push(n);
                stack.push((p, acc + rw.r[n]));
            }
        }
    }
    let m = out.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = out.values().map(|v| (v - m).exp()).sum();
    out.values_mut().for_each(|v| *v = (*v - m).exp() / z);
    out
}

/// Rollout probability straight from the policy table.
fn rollout_probability(policy: &Policy, side: usize, path: &[usize]) -> f64 {
    let mut p = 1.0;
    for (t, w) in path.windows(2).enumerate() {
        let d = (
            (w[1] / side) as i64 - (w[0] / side) as i64,
            (w[1] % side) as i64 - (w[0] % side) as i64,
        );
        let a = MOVES.iter().position(|&m| m == d).expect("path steps are king moves");
        p *= policy.at(t, w[0])[a];
    }
    p * policy.at(path.len() - 1, *path.last().unwrap())[END]
}

#[test]
fn finite_horizon_policy_reproduces_enumeration() {
    let (side, h) = (4, 5);
    let mdp = Mdp::new(side, h).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let rw = reward(side, seed);
        let s0 = (seed as usize * 7) % (side * side);
        let oracle = brute_force(&rw, side, h, s0);
        let (_, policy) = soft_value_iteration(&rw, &mdp, SolveMode::FiniteHorizon, 1).unwrap();
        let total: f64 = oracle.keys().map(|p| rollout_probability(&policy, side, p)).sum();
        assert!((total - 1.0).abs() < 1e-9);
        for (path, q) in &oracle {
            worst = worst.max((rollout_probability(&policy, side, path) - q).abs());
            worst = worst.max((path_probability(&policy, path) - q).abs());
        }
        let lib = enumerate_path_distribution(&rw, &mdp, s0).unwrap();
        assert_eq!(lib.len(), oracle.len());
        for (path, q) in &oracle {
            worst = worst.max((lib[path] - q).abs());
        }
    }
    assert!(worst <= 1e-9, "max abs error {worst}");
}

#[test]
fn svf_matches_enumerated_visits_and_conserves_mass() {
    let (side, h) = (4, 5);
    let mdp = Mdp::new(side, h).unwrap();
    for seed in 20..25 {
        let rw = reward(side, seed);
        let s0 = 5;
        let (_, policy) = soft_value_iteration(&rw, &mdp, SolveMode::FiniteHorizon, 1).unwrap();
        let svf = expected_svf(&policy, s0).unwrap();
        assert!(svf.conservation_error() <= 1e-12);
        let mut mu = vec![0.0; side * side];
        let mut end = vec![0.0; side * side];
        for (path, q) in brute_force(&rw, side, h, s0) {
            path.iter().for_each(|&s| mu[s] += q);
            end[*path.last().unwrap()] += q;
        }
        for s in 0..side * side {
            assert!((svf.mu[s] - mu[s]).abs() < 1e-12);
            assert!((svf.end_dist[s] - end[s]).abs() < 1e-12);
        }
    }
}

#[test]
fn svf_agrees_with_monte_carlo_rollouts() {
    let (side, h, n) = (25, 25, 100_000usize);
    let mdp = Mdp::new(side, h).unwrap();
    let rw = reward(side, 77);
    let (_, policy) = soft_value_iteration(&rw, &mdp, SolveMode::Stationary, 50).unwrap();
    let s0 = mdp.center();
    let svf = expected_svf(&policy, s0).unwrap();
    for t in 0..h {
        let ended: f64 = svf.end_mass[..t].iter().sum();
        let occ: f64 = svf.d[t].iter().sum();
        assert!((occ + ended - 1.0).abs() <= 1e-12, "t={t}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = vec![vec![0u32; side * side]; h];
    for _ in 0..n {
        let mut s = s0;
        for (t, row) in counts.iter_mut().enumerate() {
            row[s] += 1;
            let p = policy.at(t, s);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut a = END;
            for (k, pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    a = k;
                    break;
                }
            }
            if a == END {
                break;
            }
            s = mdp.step(s, a).unwrap();
        }
    }
    let (mut ok, mut total) = (0usize, 0usize);
    #[allow(clippy::needless_range_loop)]
    for t in 0..h {
        for s in 0..side * side {
            let p = svf.d[t][s];
            let phat = counts[t][s] as f64 / n as f64;
            if p == 0.0 && phat == 0.0 {
                continue;
            }
            let se = (p * (1.0 - p) / n as f64).sqrt();
            total += 1;
            if (phat - p).abs() <= 4.0 * se {
                ok += 1;
            }
        }
    }
    let frac = ok as f64 / total as f64;
    assert!(total > 1000 && frac >= 0.99, "{ok}/{total} cells within 4 SE");
}

#[test]
fn stationary_iteration_converges_within_sweeps() {
    for seed in 0..5 {
        let rw = reward(25, seed);
        let mdp = Mdp::new(25, 25).unwrap();
        let (v, policy) = soft_value_iteration(&rw, &mdp, SolveMode::Stationary, 50).unwrap();
        assert!(v.residual <= VI_TOL, "residual {}", v.residual);
        for s in 0..mdp.num_states() {
            assert!((policy.at(0, s).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

fn random_walk(side: usize, s0: usize, len: usize, rng: &mut ChaCha8Rng) -> Demonstration {
    let mut states = vec![s0];
    while states.len() < len {
        let nb = neighbours(side, *states.last().unwrap());
        states.push(nb[rng.random_range(0..nb.len())]);
    }
    Demonstration { states, ended: true }
}

#[test]
fn likelihood_gradient_matches_finite_differences() {
    let (side, h, eps) = (5, 5, 1e-5);
    let mdp = Mdp::new(side, h).unwrap();
    for seed in 0..3 {
        let rw = reward(side, 100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s0 = rng.random_range(0..side * side);
        let demos: Vec<Demonstration> = (0..4)
            .map(|_| {
                let len = rng.random_range(1..=h);
                random_walk(side, s0, len, &mut rng)
            })
            .collect();
        let ll = |rw: &RewardMaps| {
            let (_, p) = soft_value_iteration(rw, &mdp, SolveMode::FiniteHorizon, 1).unwrap();
            log_likelihood(&demos, &p).unwrap()
        };
        let (_, policy) = soft_value_iteration(&rw, &mdp, SolveMode::FiniteHorizon, 1).unwrap();
        let g = irl_gradient(&demo_svf(&demos, &mdp).unwrap(), &expected_svf(&policy, s0).unwrap()).unwrap();
        for s in 0..side * side {
            for (which, analytic) in [(0, g.d_r[s]), (1, g.d_rg[s])] {
                let mut up = rw.clone();
                let mut down = rw.clone();
                if which == 0 {
                    up.r[s] += eps;
                    down.r[s] -= eps;
                } else {
                    up.r_g[s] += eps;
                    down.r_g[s] -= eps;
                }
                let fd = (ll(&up) - ll(&down)) / (2.0 * eps);
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    rel <= 1e-4,
                    "seed {seed} cell {s} map {which}: fd {fd} analytic {analytic}"
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn policy_rows_normalise(side in 1usize..7, h in 1usize..8, seed in any::<u64>(), stationary in any::<bool>()) {
        let mdp = Mdp::new(side, h).unwrap();
        let mode = if stationary { SolveMode::Stationary } else { SolveMode::FiniteHorizon };
        let (_, policy) = soft_value_iteration(&reward(side, seed), &mdp, mode, 50).unwrap();
        for t in 0..h {
            for s in 0..mdp.num_states() {
                let row = policy.at(t, s);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|p| *p >= 0.0));
            }
            // Nothing can continue past the horizon.
            if t == h - 1 {
                prop_assert!((0..mdp.num_states()).all(|s| policy.at(t, s)[END] == 1.0));
            }
        }
    }

    #[test]
    fn enumeration_matches_oracle(side in 1usize..4, h in 1usize..5, seed in any::<u64>(), s0 in 0usize..9) {
        let s0 = s0 % (side * side);
        let rw = reward(side, seed);
        let mdp = Mdp::new(side, h).unwrap();
        let (_, policy) = soft_value_iteration(&rw, &mdp, SolveMode::FiniteHorizon, 1).unwrap();
        for (path, q) in brute_force(&rw, side, h, s0) {
            prop_assert!((rollout_probability(&policy, side, &path) - q).abs() <= 1e-9);
        }
        let svf = expected_svf(&policy, s0).unwrap();
        prop_assert!(svf.conservation_error() <= 1e-12);
    }
}
