use serde::{Deserialize, Serialize};

use super::{Mdp, Policy, END};
use crate::error::{Error, Result};
use crate::scene::Demonstration;

/// Per-timestep occupancy and where mass leaves through the end action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvfTable {
    pub side: usize,
    /// `d[t][s]`: probability of being in `s` at timestep `t`.
    pub d: Vec<Vec<f64>>,
    /// Mass taking the end action at each timestep.
    pub end_mass: Vec<f64>,
    /// Mass taking the end action in each state, summed over time.
    pub end_dist: Vec<f64>,
    /// Aggregate visitation `Σ_t d[t]`.
    pub mu: Vec<f64>,
}

impl SvfTable {
    fn zeros(side: usize, horizon: usize) -> Self {
        let n = side * side;
        SvfTable {
            side,
            d: vec![vec![0.0; n]; horizon],
            end_mass: vec![0.0; horizon],
            end_dist: vec![0.0; n],
            mu: vec![0.0; n],
        }
    }

    /// `|Σ_s d_t(s) + Σ_{t'<t} end_mass_{t'} − 1|`, worst over `t`.
    pub fn conservation_error(&self) -> f64 {
        let mut ended = 0.0;
        let mut worst: f64 = 0.0;
        for (dt, em) in self.d.iter().zip(&self.end_mass) {
            let occ: f64 = dt.iter().sum();
            worst = worst.max((occ + ended - 1.0).abs());
            ended += em;
        }
        worst
    }
}

/// Forward occupancy recursion from `s_init` under `policy`.
pub fn expected_svf(policy: &Policy, s_init: usize) -> Result<SvfTable> {
    let mdp = policy.mdp;
    let n = mdp.num_states();
    if s_init >= n {
        return Err(Error::contract(format!("initial state {s_init} outside the grid")));
    }
    let mut out = SvfTable::zeros(mdp.side, mdp.horizon);
    out.d[0][s_init] = 1.0;
    for t in 0..mdp.horizon {
        let mut next = vec![0.0; n];
        for s in 0..n {
            let mass = out.d[t][s];
            if mass == 0.0 {
                continue;
            }
            out.mu[s] += mass;
            let p = policy.at(t, s);
            let e = mass * p[END];
            out.end_mass[t] += e;
            out.end_dist[s] += e;
            for (a, pa) in p.iter().take(8).enumerate() {
                if *pa > 0.0 {
                    if let Some(s2) = mdp.step(s, a) {
                        next[s2] += mass * pa;
                    }
                }
            }
        }
        if t + 1 < mdp.horizon {
            out.d[t + 1] = next;
        }
    }
    Ok(out)
}

fn check_demo(mdp: &Mdp, demo: &Demonstration, which: usize) -> Result<()> {
    if demo.states.is_empty() || demo.states.len() > mdp.horizon {
        return Err(Error::contract(format!(
            "demonstration {which} has {} states (1..={} allowed)",
            demo.states.len(),
            mdp.horizon
        )));
    }
    if let Some(&s) = demo.states.iter().find(|&&s| s >= mdp.num_states()) {
        return Err(Error::contract(format!(
            "demonstration {which} visits state {s} outside the grid"
        )));
    }
    for (t, w) in demo.states.windows(2).enumerate() {
        if mdp.action_between(w[0], w[1]).is_none() {
            return Err(Error::contract(format!(
                "demonstration {which} step {t}: {} -> {} is not a valid move",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Empirical visitation of a set of demonstrations (each ends at its last state).
pub fn demo_svf(demos: &[Demonstration], mdp: &Mdp) -> Result<SvfTable> {
    if demos.is_empty() {
        return Err(Error::contract("demo_svf needs at least one demonstration"));
    }
    let mut out = SvfTable::zeros(mdp.side, mdp.horizon);
    let w = 1.0 / demos.len() as f64;
    for (i, demo) in demos.iter().enumerate() {
        check_demo(mdp, demo, i)?;
        for (t, &s) in demo.states.iter().enumerate() {
            out.d[t][s] += w;
            out.mu[s] += w;
        }
        let last = demo.states.len() - 1;
        out.end_mass[last] += w;
        out.end_dist[demo.states[last]] += w;
    }
    Ok(out)
}

/// Gradient of the mean demonstration log-likelihood with respect to the
/// transient (`d_r = μ_D − μ`) and terminal reward maps.
#[derive(Debug, Clone, PartialEq)]
pub struct IrlGradient {
    pub d_r: Vec<f64>,
    pub d_rg: Vec<f64>,
}

pub fn irl_gradient(demo: &SvfTable, expected: &SvfTable) -> Result<IrlGradient> {
    if demo.mu.len() != expected.mu.len() {
        return Err(Error::contract("SVF tables have different sizes"));
    }
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(IrlGradient {
        d_r: diff(&demo.mu, &expected.mu),
        d_rg: diff(&demo.end_dist, &expected.end_dist),
    })
}

/// Mean over demonstrations of `Σ_t log π_t(a_t|s_t)`, including the final end action.
pub fn log_likelihood(demos: &[Demonstration], policy: &Policy) -> Result<f64> {
    if demos.is_empty() {
        return Err(Error::contract("log_likelihood needs at least one demonstration"));
    }
    let mdp = policy.mdp;
    let mut total = 0.0;
    for (i, demo) in demos.iter().enumerate() {
        check_demo(&mdp, demo, i)?;
        for (t, w) in demo.states.windows(2).enumerate() {
            let a = mdp.action_between(w[0], w[1]).expect("checked");
            total += policy.at(t, w[0])[a].ln();
        }
        let last = demo.states.len() - 1;
        total += policy.at(last, demo.states[last])[END].ln();
    }
    Ok(total / demos.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::super::{soft_value_iteration, SolveMode, NUM_ACTIONS};
    use super::*;
    use crate::adaptor::RewardMaps;

    fn east_policy(mdp: Mdp) -> Policy {
        let n = mdp.num_states();
        let rows = (0..n)
            .map(|s| {
                let mut p = [0.0; NUM_ACTIONS];
                if mdp.step(s, 2).is_some() {
                    p[2] = 1.0;
                } else {
                    p[END] = 1.0;
                }
                p
            })
            .collect();
        Policy::from_rows(mdp, SolveMode::Stationary, rows).unwrap()
    }

    #[test]
    fn deterministic_march_east() {
        let mdp = Mdp::new(9, 4).unwrap();
        let svf = expected_svf(&east_policy(mdp), 9 * 4).unwrap();
        for c in 0..4 {
            assert_eq!(svf.mu[9 * 4 + c], 1.0);
        }
        assert_eq!(svf.mu.iter().sum::<f64>(), 4.0);
        assert_eq!(svf.end_dist[9 * 4 + 3], 1.0);
        assert!(svf.conservation_error() < 1e-12);
    }

    #[test]
    fn immediate_end() {
        let mdp = Mdp::new(3, 5).unwrap();
        let rows = vec![
            {
                let mut p = [0.0; NUM_ACTIONS];
                p[END] = 1.0;
                p
            };
            9
        ];
        let policy = Policy::from_rows(mdp, SolveMode::Stationary, rows).unwrap();
        let svf = expected_svf(&policy, 4).unwrap();
        let mut expect = vec![0.0; 9];
        expect[4] = 1.0;
        assert_eq!(svf.mu, expect);
    }

    #[test]
    fn demo_counting() {
        let mdp = Mdp::new(3, 5).unwrap();
        let d = Demonstration {
            states: vec![4, 5, 2],
            ended: true,
        };
        let one = demo_svf(std::slice::from_ref(&d), &mdp).unwrap();
        let two = demo_svf(&[d.clone(), d], &mdp).unwrap();
        assert_eq!(one, two);
        assert_eq!(one.mu, vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(demo_svf(&[], &mdp), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_transition_names_the_step() {
        let mdp = Mdp::new(3, 5).unwrap();
        let rw = RewardMaps::uniform(3, -3.0, 0.0);
        let (_, p) = soft_value_iteration(&rw, &mdp, SolveMode::FiniteHorizon, 0).unwrap();
        let bad = Demonstration {
            states: vec![4, 5, 3],
            ended: true,
        };
        let err = log_likelihood(&[bad], &p).unwrap_err();
        assert!(err.to_string().contains("step 1"), "{err}");
    }

    #[test]
    fn uniform_policy_closed_form() {
        // Centre of a 3x3 grid: 9 valid actions, then forced end at the horizon.
        let mdp = Mdp::new(3, 2).unwrap();
        let rw = RewardMaps::uniform(3, 0.0, -2.0);
        let (_, p) = soft_value_iteration(&rw, &mdp, SolveMode::FiniteHorizon, 0).unwrap();
        let demo = Demonstration {
            states: vec![4, 5],
            ended: true,
        };
        let ll = log_likelihood(&[demo], &p).unwrap();
        assert!((ll + 9f64.ln()).abs() < 1e-12);
    }
}
