use std::collections::BTreeMap;

use super::{Mdp, Policy, END};
use crate::adaptor::RewardMaps;
use crate::error::{Error, Result};

pub const MAX_ENUM_SIDE: usize = 5;
pub const MAX_ENUM_HORIZON: usize = 6;

/// Exact plan distribution `P(τ) = exp(Σ_i R(s_i) + R_g(s_last)) / Z` over
/// every state sequence of at most `H` states starting at `s_init`.
pub fn enumerate_path_distribution(reward: &RewardMaps, mdp: &Mdp, s_init: usize) -> Result<BTreeMap<Vec<usize>, f64>> {
    if mdp.side > MAX_ENUM_SIDE || mdp.horizon > MAX_ENUM_HORIZON {
        return Err(Error::Refused(format!(
            "{0}x{0} grid with H={1} exceeds the {MAX_ENUM_SIDE}x{MAX_ENUM_SIDE}, H<={MAX_ENUM_HORIZON} limit",
            mdp.side, mdp.horizon
        )));
    }
    if s_init >= mdp.num_states() || reward.r.len() != mdp.num_states() {
        return Err(Error::contract("initial state or reward size does not match the MDP"));
    }
    let mut out = BTreeMap::new();
    let mut path = vec![s_init];
    walk(reward, mdp, &mut path, reward.r[s_init], &mut out);
    // Normalise with a max shift for stability.
    let m = out.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = out.values().map(|v| (v - m).exp()).sum();
    for v in out.values_mut() {
        *v = (*v - m).exp() / z;
    }
    Ok(out)
}

fn walk(reward: &RewardMaps, mdp: &Mdp, path: &mut Vec<usize>, acc: f64, out: &mut BTreeMap<Vec<usize>, f64>) {
    let s = *path.last().unwrap();
    out.insert(path.clone(), acc + reward.r_g[s]);
    if path.len() == mdp.horizon {
        return;
    }
    for a in 0..8 {
        if let Some(s2) = mdp.step(s, a) {
            path.push(s2);
            walk(reward, mdp, path, acc + reward.r[s2], out);
            path.pop();
        }
    }
}

/// Probability that rolling out `policy` from `states[0]` produces exactly
/// this state sequence (including the final end action).
pub fn path_probability(policy: &Policy, states: &[usize]) -> f64 {
    let mdp = policy.mdp;
    if states.is_empty() || states.len() > mdp.horizon {
        return 0.0;
    }
    let mut p = 1.0;
    for (t, w) in states.windows(2).enumerate() {
        match mdp.action_between(w[0], w[1]) {
            Some(a) => p *= policy.at(t, w[0])[a],
            None => return 0.0,
        }
    }
    let last = states.len() - 1;
    p * policy.at(last, states[last])[END]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_state_has_probability_one() {
        let mdp = Mdp::new(1, 4).unwrap();
        let d = enumerate_path_distribution(&RewardMaps::uniform(1, -2.0, 0.3), &mdp, 0).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d[&vec![0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mirror_paths_are_equiprobable() {
        let mdp = Mdp::new(3, 3).unwrap();
        let d = enumerate_path_distribution(&RewardMaps::uniform(3, -2.5, 0.0), &mdp, 4).unwrap();
        // East then north-east vs west then north-west.
        assert!((d[&vec![4, 5, 8]] - d[&vec![4, 3, 6]]).abs() < 1e-15);
        let total: f64 = d.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oversized_instances_are_refused() {
        let mdp = Mdp::new(6, 3).unwrap();
        let err = enumerate_path_distribution(&RewardMaps::uniform(6, -3.0, 0.0), &mdp, 0).unwrap_err();
        assert!(matches!(err, Error::Refused(_)));
        let mdp = Mdp::new(4, 7).unwrap();
        assert!(enumerate_path_distribution(&RewardMaps::uniform(4, -3.0, 0.0), &mdp, 0).is_err());
    }
}
