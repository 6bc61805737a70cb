//! Maximum-entropy IRL on the coarse grid MDP: soft value iteration in a
//! stationary and an exact finite-horizon form, visitation frequencies, the
//! likelihood gradient and an exhaustive path-distribution oracle.

mod enumerate;
mod soft_vi;
mod svf;

pub use enumerate::{enumerate_path_distribution, path_probability};
pub use soft_vi::{soft_value_iteration, Policy, SoftValues, SolveMode, VI_TOL};
pub use svf::{demo_svf, expected_svf, irl_gradient, log_likelihood, IrlGradient, SvfTable};

use crate::error::{Error, Result};
use crate::scene::GridSpec;

/// Row/column offsets of the eight moves: N, NE, E, SE, S, SW, W, NW.
pub const MOVES: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];
pub const END: usize = 8;
pub const NUM_ACTIONS: usize = 9;
pub const ACTION_NAMES: [&str; NUM_ACTIONS] = ["N", "NE", "E", "SE", "S", "SW", "W", "NW", "end"];

/// Square grid MDP with deterministic moves, an end action and horizon `H`
/// (maximum number of states in a plan).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mdp {
    pub side: usize,
    pub horizon: usize,
}

impl Mdp {
    pub fn new(side: usize, horizon: usize) -> Result<Self> {
        if side == 0 || horizon == 0 {
            return Err(Error::contract("MDP needs a non-empty grid and a positive horizon"));
        }
        Ok(Mdp { side, horizon })
    }

    pub fn num_states(&self) -> usize {
        self.side * self.side
    }

    /// Successor of `s` under move `a`, `None` when it leaves the grid.
    pub fn step(&self, s: usize, a: usize) -> Option<usize> {
        let (dr, dc) = *MOVES.get(a)?;
        let (r, c) = ((s / self.side) as i64 + dr, (s % self.side) as i64 + dc);
        let n = self.side as i64;
        (r >= 0 && c >= 0 && r < n && c < n).then(|| (r * n + c) as usize)
    }

    /// The move that takes `s` to `s2`, if any.
    pub fn action_between(&self, s: usize, s2: usize) -> Option<usize> {
        (0..8).find(|&a| self.step(s, a) == Some(s2))
    }

    pub fn center(&self) -> usize {
        let h = self.side / 2;
        h * self.side + h
    }

    pub fn grid(&self, resolution: f64) -> GridSpec {
        GridSpec::new(self.side, resolution)
    }
}

/// `log Σ exp(x)` over the finite entries; `-inf` when there are none.
pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}
