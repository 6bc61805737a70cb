//! Wall-clock timings of the grid kernels on seeded random rewards.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adaptor::{RewardMaps, R_MIN};
use crate::error::Result;
use crate::irl::{expected_svf, soft_value_iteration, Mdp, SolveMode};
use crate::sampler::sample_plans;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub op: String,
    pub side: usize,
    pub horizon: usize,
    pub reps: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
}

pub const BENCH_HEADER: &str = "op,side,horizon,reps,mean_ms,min_ms";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{:.3}",
            self.op, self.side, self.horizon, self.reps, self.mean_ms, self.min_ms
        )
    }
}

pub fn random_reward(side: usize, seed: u64) -> RewardMaps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = side * side;
    RewardMaps {
        side,
        r: (0..n).map(|_| -R_MIN - rng.random_range(0.0..2.0)).collect(),
        r_g: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

fn time<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut min = f64::INFINITY;
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(f()?);
        let ms = t.elapsed().as_secs_f64() * 1e3;
        total += ms;
        min = min.min(ms);
    }
    Ok((total / reps as f64, min))
}

/// Soft VI (both modes), expected SVF and L-plan sampling on one grid.
pub fn run(side: usize, horizon: usize, sweeps: usize, plans: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let reps = reps.max(1);
    let mdp = Mdp::new(side, horizon)?;
    let reward = random_reward(side, seed);
    let (_, policy) = soft_value_iteration(&reward, &mdp, SolveMode::Stationary, sweeps)?;
    let s0 = mdp.center();
    let row = |op: &str, (mean_ms, min_ms): (f64, f64)| BenchRow {
        op: op.into(),
        side,
        horizon,
        reps,
        mean_ms,
        min_ms,
    };
    Ok(vec![
        row(
            "soft_vi_stationary",
            time(reps, || {
                soft_value_iteration(&reward, &mdp, SolveMode::Stationary, sweeps)
            })?,
        ),
        row(
            "soft_vi_finite",
            time(reps, || {
                soft_value_iteration(&reward, &mdp, SolveMode::FiniteHorizon, sweeps)
            })?,
        ),
        row("expected_svf", time(reps, || expected_svf(&policy, s0))?),
        row(
            &format!("sample_{plans}"),
            time(reps, || Ok(sample_plans(&policy, s0, plans, seed)))?,
        ),
    ])
}
