//! Policy rollouts, state/plan embeddings and K-means clustering of the
//! induced trajectories.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irl::{Policy, END, NUM_ACTIONS};
use crate::nn::{linear, linear_spec, Graph, Init, Mat, NodeId, ParamSpec, ParamStore};
use crate::scene::{GridSpec, Point};

pub const DEFAULT_L: usize = 600;
pub const DEFAULT_K: usize = 6;
pub const CLUSTER_POINTS: usize = 6;
pub const MAX_LLOYD: usize = 100;
pub const EMBED_FEATURE: usize = 8;
pub const EMBED_REWARD: usize = 4;
pub const EMBED_COORD: usize = 4;
pub const EMBED_WIDTH: usize = EMBED_FEATURE + EMBED_REWARD + EMBED_COORD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub states: Vec<usize>,
    pub log_prob: f64,
}

/// Rollout `index` of a batch seeded with `seed`; independent of batch size.
pub fn sample_plan(policy: &Policy, s_init: usize, seed: u64, index: usize) -> Plan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mdp = policy.mdp;
    let mut states = vec![s_init];
    let mut log_prob = 0.0;
    let mut s = s_init;
    for t in 0..mdp.horizon {
        let p = policy.at(t, s);
        let a = draw(&p, rng.random::<f64>());
        log_prob += p[a].ln();
        if a == END {
            break;
        }
        s = mdp.step(s, a).expect("policy puts mass on a valid move");
        states.push(s);
    }
    Plan { states, log_prob }
}

/// Inverse-CDF draw; falls back to the last action with mass on round-off.
fn draw(p: &[f64; NUM_ACTIONS], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = END;
    for (a, &pa) in p.iter().enumerate() {
        if pa <= 0.0 {
            continue;
        }
        acc += pa;
        last = a;
        if u < acc {
            return a;
        }
    }
    last
}

pub fn sample_plans(policy: &Policy, s_init: usize, l: usize, seed: u64) -> Vec<Plan> {
    (0..l)
        .into_par_iter()
        .map(|i| sample_plan(policy, s_init, seed, i))
        .collect()
}

pub fn plan_to_polyline(states: &[usize], grid: GridSpec) -> Vec<Point> {
    states
        .iter()
        .map(|&s| {
            let (r, c) = grid.row_col(s);
            grid.cell_center(r, c)
        })
        .collect()
}

pub fn embedding_spec(specs: &mut Vec<ParamSpec>, coarse_width: usize) {
    linear_spec(specs, "embed.f1", coarse_width, EMBED_FEATURE, Init::Glorot(1.0));
    linear_spec(specs, "embed.f2", 1, EMBED_REWARD, Init::Glorot(1.0));
    linear_spec(specs, "embed.f3", 2, EMBED_COORD, Init::Glorot(1.0));
}

/// Embeddings `e(s) = [f1(C(s)), f2(R(s)), f3(I(s))]` for the listed cells
/// (`cells.len() × EMBED_WIDTH`). `coarse` and `reward` hold one row/value per
/// listed cell. Grid coordinates are centred and scaled to [-1, 1].
pub fn state_embeddings(
    g: &mut Graph,
    store: &ParamStore,
    coarse: NodeId,
    reward: &[f64],
    cells: &[usize],
    side: usize,
) -> NodeId {
    let h = ((side as f64 - 1.0) / 2.0).max(1.0);
    let c0 = (side as f64 - 1.0) / 2.0;
    let coords = Mat::from_vec(
        cells.len(),
        2,
        cells
            .iter()
            .flat_map(|&s| [((s / side) as f64 - c0) / h, ((s % side) as f64 - c0) / h])
            .collect(),
    );
    let rw = g.leaf(Mat::from_vec(reward.len(), 1, reward.to_vec()));
    let co = g.leaf(coords);
    let a = linear(g, store, "embed.f1", coarse);
    let a = g.relu(a);
    let b = linear(g, store, "embed.f2", rw);
    let b = g.relu(b);
    let c = linear(g, store, "embed.f3", co);
    let c = g.relu(c);
    g.concat(&[a, b, c])
}

/// `[mean_i e(s_i), e(s_first), e(s_last)]` as a single row.
pub fn plan_feature(g: &mut Graph, embeddings: NodeId, states: &[usize]) -> Result<NodeId> {
    let (Some(&first), Some(&last)) = (states.first(), states.last()) else {
        return Err(Error::contract("plan_feature needs a non-empty plan"));
    };
    let rows = g.gather(embeddings, Arc::new(states.iter().map(|&s| Some(s)).collect()));
    let mean = g.mean_rows(rows);
    let f = g.gather(embeddings, Arc::new(vec![Some(first)]));
    let l = g.gather(embeddings, Arc::new(vec![Some(last)]));
    Ok(g.concat(&[mean, f, l]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub assignment: Vec<usize>,
    pub counts: Vec<usize>,
    pub p_mcmc: Vec<f64>,
    /// Centroids in the downsampled (12-dim) space.
    pub centroids: Vec<Vec<f64>>,
    /// Fewer than the requested number of distinct trajectories existed.
    pub collapsed: bool,
    /// Within-cluster sum of squares after seeding and after each Lloyd step.
    pub wcss: Vec<f64>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == k)
            .collect()
    }
}

/// `CLUSTER_POINTS` evenly spaced samples of a trajectory, flattened.
pub fn downsample_trajectory(traj: &[Point]) -> Vec<f64> {
    let n = traj.len();
    (0..CLUSTER_POINTS)
        .flat_map(|k| {
            let i = if CLUSTER_POINTS == 1 {
                n - 1
            } else {
                ((k as f64 * (n - 1) as f64) / (CLUSTER_POINTS - 1) as f64).round() as usize
            };
            traj[i]
        })
        .collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq(v, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// K-means with farthest-point seeding (first centre drawn with `seed`).
pub fn cluster(trajectories: &[Vec<Point>], k: usize, seed: u64) -> Result<ClusterResult> {
    let l = trajectories.len();
    if k == 0 || l < k {
        return Err(Error::contract(format!(
            "cannot form {k} clusters from {l} trajectories"
        )));
    }
    if trajectories.iter().any(|t| t.is_empty()) {
        return Err(Error::contract("empty trajectory"));
    }
    let vecs: Vec<Vec<f64>> = trajectories.iter().map(|t| downsample_trajectory(t)).collect();
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for v in &vecs {
        if !distinct.contains(&v) {
            distinct.push(v);
            if distinct.len() >= k {
                break;
            }
        }
    }
    let collapsed = distinct.len() < k;
    let k = distinct.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![vecs[rng.random_range(0..l)].clone()];
    let mut dmin: Vec<f64> = vecs.iter().map(|v| sq(v, &centroids[0])).collect();
    while centroids.len() < k {
        let far = (0..l).fold(0, |b, i| if dmin[i] > dmin[b] { i } else { b });
        centroids.push(vecs[far].clone());
        for (i, v) in vecs.iter().enumerate() {
            dmin[i] = dmin[i].min(sq(v, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignment: Vec<usize> = vecs.iter().map(|v| nearest(v, &centroids).0).collect();
    let wcss_of =
        |assign: &[usize], cents: &[Vec<f64>]| -> f64 { vecs.iter().zip(assign).map(|(v, &a)| sq(v, &cents[a])).sum() };
    let mut wcss = vec![wcss_of(&assignment, &centroids)];
    for _ in 0..MAX_LLOYD {
        // Update step; an empty cluster keeps its centroid.
        let dim = vecs[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vecs.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = vecs.iter().map(|v| nearest(v, &centroids).0).collect();
        let w = wcss_of(&next, &centroids);
        debug_assert!(
            w <= wcss[wcss.len() - 1] * (1.0 + 1e-12) + 1e-12,
            "Lloyd step increased WCSS"
        );
        wcss.push(w);
        let changed = next != assignment;
        assignment = next;
        if !changed {
            break;
        }
    }
    let mut counts = vec![0usize; k];
    for &a in &assignment {
        counts[a] += 1;
    }
    // Drop clusters that ended up empty and relabel densely.
    let keep: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    let relabel: Vec<Option<usize>> = (0..k).map(|c| keep.iter().position(|&x| x == c)).collect();
    let assignment: Vec<usize> = assignment.iter().map(|&a| relabel[a].expect("non-empty")).collect();
    let centroids: Vec<Vec<f64>> = keep.iter().map(|&c| centroids[c].clone()).collect();
    let counts: Vec<usize> = keep.iter().map(|&c| counts[c]).collect();
    Ok(ClusterResult {
        p_mcmc: counts.iter().map(|&c| c as f64 / l as f64).collect(),
        collapsed: collapsed || keep.len() < k,
        assignment,
        counts,
        centroids,
        wcss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptor::RewardMaps;
    use crate::irl::{soft_value_iteration, Mdp, SolveMode};

    #[test]
    fn deterministic_policy_gives_identical_plans() {
        let mdp = Mdp::new(5, 4).unwrap();
        let rows = (0..25)
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
        let policy = Policy::from_rows(mdp, SolveMode::Stationary, rows).unwrap();
        let plans = sample_plans(&policy, 10, 20, 1);
        assert!(plans.iter().all(|p| p.states == vec![10, 11, 12, 13]));
    }

    #[test]
    fn plan_depends_only_on_seed_and_index() {
        let mdp = Mdp::new(5, 5).unwrap();
        let (_, policy) =
            soft_value_iteration(&RewardMaps::uniform(5, -2.5, 0.0), &mdp, SolveMode::FiniteHorizon, 0).unwrap();
        let big = sample_plans(&policy, 12, 50, 9);
        let small = sample_plans(&policy, 12, 10, 9);
        assert_eq!(&big[..10], &small[..]);
        assert_eq!(sample_plan(&policy, 12, 9, 37), big[37]);
    }

    #[test]
    fn polyline_geometry() {
        let g = GridSpec::new(25, 2.0);
        let c = g.index(12, 12);
        assert_eq!(plan_to_polyline(&[c, c + 1], g), vec![[0.0, 0.0], [2.0, 0.0]]);
    }

    #[test]
    fn degenerate_clusterings() {
        let distinct: Vec<Vec<Point>> = (0..4).map(|i| vec![[i as f64 * 10.0, 0.0]; 30]).collect();
        let r = cluster(&distinct, 4, 0).unwrap();
        assert_eq!(r.counts, vec![1, 1, 1, 1]);
        assert!(r.p_mcmc.iter().all(|&p| p == 0.25));

        let same = vec![vec![[1.0, 2.0]; 30]; 10];
        let r = cluster(&same, 6, 0).unwrap();
        assert!(r.collapsed);
        assert_eq!(r.p_mcmc, vec![1.0]);
    }
}
