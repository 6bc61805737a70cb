use serde::{Deserialize, Serialize};

use super::{logsumexp, Mdp, END, NUM_ACTIONS};
use crate::adaptor::RewardMaps;
use crate::error::{Error, Result};

pub const VI_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    /// Algorithm-1 style fixed-point iteration with a stationary policy.
    #[default]
    Stationary,
    /// Exact backward recursion over the horizon with a time-indexed policy.
    FiniteHorizon,
}

impl std::str::FromStr for SolveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(SolveMode::Stationary),
            "finite_horizon" => Ok(SolveMode::FiniteHorizon),
            _ => Err(Error::Config(format!(
                "unknown solver mode `{s}` (expected stationary|finite_horizon)"
            ))),
        }
    }
}

/// Soft values. In finite-horizon mode `v` and `q` are stacked per timestep
/// (`t * num_states + s`). Invalid actions hold `-inf` in `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftValues {
    pub mode: SolveMode,
    pub v: Vec<f64>,
    pub q: Vec<[f64; NUM_ACTIONS]>,
    /// Sup-norm change of `V` in the last stationary sweep (0 in finite-horizon mode).
    pub residual: f64,
    pub sweeps: usize,
}

impl SoftValues {
    pub fn converged(&self) -> bool {
        self.residual <= VI_TOL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub mdp: Mdp,
    pub mode: SolveMode,
    probs: Vec<[f64; NUM_ACTIONS]>,
}

impl Policy {
    /// Action distribution at timestep `t` in state `s`. A stationary policy
    /// is forced to end at the last timestep of the horizon.
    pub fn at(&self, t: usize, s: usize) -> [f64; NUM_ACTIONS] {
        let n = self.mdp.num_states();
        match self.mode {
            SolveMode::FiniteHorizon => self.probs[t * n + s],
            SolveMode::Stationary if t + 1 >= self.mdp.horizon => {
                let mut p = [0.0; NUM_ACTIONS];
                p[END] = 1.0;
                p
            }
            SolveMode::Stationary => self.probs[s],
        }
    }

    /// Stationary rows as computed (without the horizon cut-off).
    pub fn raw(&self) -> &[[f64; NUM_ACTIONS]] {
        &self.probs
    }

    pub fn from_rows(mdp: Mdp, mode: SolveMode, probs: Vec<[f64; NUM_ACTIONS]>) -> Result<Self> {
        let expect = match mode {
            SolveMode::Stationary => mdp.num_states(),
            SolveMode::FiniteHorizon => mdp.num_states() * mdp.horizon,
        };
        if probs.len() != expect {
            return Err(Error::contract(format!(
                "policy has {} rows, expected {expect}",
                probs.len()
            )));
        }
        Ok(Policy { mdp, mode, probs })
    }
}

fn q_row(mdp: &Mdp, s: usize, r: f64, r_g: f64, next: &[f64], allow_moves: bool) -> [f64; NUM_ACTIONS] {
    let mut q = [f64::NEG_INFINITY; NUM_ACTIONS];
    q[END] = r + r_g;
    if allow_moves {
        for (a, qa) in q.iter_mut().take(8).enumerate() {
            if let Some(s2) = mdp.step(s, a) {
                *qa = r + next[s2];
            }
        }
    }
    q
}

fn policy_row(q: &[f64; NUM_ACTIONS], v: f64) -> [f64; NUM_ACTIONS] {
    let mut p = [0.0; NUM_ACTIONS];
    for (pa, qa) in p.iter_mut().zip(q) {
        if qa.is_finite() {
            *pa = (qa - v).exp();
        }
    }
    p
}

/// Soft value iteration. `sweeps` is only used in stationary mode.
pub fn soft_value_iteration(
    reward: &RewardMaps,
    mdp: &Mdp,
    mode: SolveMode,
    sweeps: usize,
) -> Result<(SoftValues, Policy)> {
    let n = mdp.num_states();
    if reward.r.len() != n || reward.r_g.len() != n {
        return Err(Error::contract(format!(
            "reward maps have {} cells, MDP has {n}",
            reward.r.len()
        )));
    }
    reward.check_finite()?;
    match mode {
        SolveMode::Stationary => {
            if sweeps == 0 {
                return Err(Error::contract("stationary iteration needs at least one sweep"));
            }
            let mut v = vec![f64::NEG_INFINITY; n];
            let mut q = vec![[0.0; NUM_ACTIONS]; n];
            let mut residual = f64::INFINITY;
            for _ in 0..sweeps {
                #[allow(clippy::needless_range_loop)]
                for s in 0..n {
                    q[s] = q_row(mdp, s, reward.r[s], reward.r_g[s], &v, true);
                }
                let next: Vec<f64> = q.iter().map(|row| logsumexp(row.iter().copied())).collect();
                residual = v
                    .iter()
                    .zip(&next)
                    .map(|(a, b)| if a.is_finite() { (a - b).abs() } else { f64::INFINITY })
                    .fold(0.0, f64::max);
                v = next;
            }
            if residual > VI_TOL {
                tracing::warn!(residual, sweeps, "stationary soft value iteration did not converge");
            }
            let probs = q.iter().zip(&v).map(|(row, &vs)| policy_row(row, vs)).collect();
            Ok((
                SoftValues {
                    mode,
                    v,
                    q,
                    residual,
                    sweeps,
                },
                Policy { mdp: *mdp, mode, probs },
            ))
        }
        SolveMode::FiniteHorizon => {
            let h = mdp.horizon;
            let mut v = vec![0.0; h * n];
            let mut q = vec![[0.0; NUM_ACTIONS]; h * n];
            for t in (0..h).rev() {
                let last = t + 1 == h;
                let next: Vec<f64> = if last {
                    vec![]
                } else {
                    v[(t + 1) * n..(t + 2) * n].to_vec()
                };
                for s in 0..n {
                    let row = q_row(mdp, s, reward.r[s], reward.r_g[s], &next, !last);
                    v[t * n + s] = logsumexp(row.iter().copied());
                    q[t * n + s] = row;
                }
            }
            let probs = q.iter().zip(&v).map(|(row, &vs)| policy_row(row, vs)).collect();
            Ok((
                SoftValues {
                    mode,
                    v,
                    q,
                    residual: 0.0,
                    sweeps: h,
                },
                Policy { mdp: *mdp, mode, probs },
            ))
        }
    }
}
