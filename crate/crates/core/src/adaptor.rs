//! Feature adaptor: drivable-node features onto the fine grid, pooling to the
//! coarse MDP grid, and the two-channel reward head.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{mlp2, mlp2_spec, Graph, Mat, NodeId, ParamSpec, ParamStore, Sparse};
use crate::scene::{dist, BoolGrid, GridSpec, Point};

/// Upper bound on transient rewards is `-R_MIN`.
pub const R_MIN: f64 = 2.297_224_577_336_219; // ln 9 + 0.1
/// A cell only takes a node's feature when the node is at most this far away.
pub const ASSIGN_RADIUS: f64 = 1.0;
pub const REWARD_HIDDEN: usize = 16;

/// For each fine cell, the nearest node within `ASSIGN_RADIUS` (ties to the
/// lower index). Cells that are not drivable in `mask` get `None`.
pub fn assign_index(grid: GridSpec, nodes: &[Point], mask: &BoolGrid) -> Vec<Option<usize>> {
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); grid.num_cells()];
    for (i, p) in nodes.iter().enumerate() {
        let ((r, c), _) = grid.clamped_cell_of(*p);
        buckets[grid.index(r, c)].push(i);
    }
    let reach = (ASSIGN_RADIUS / grid.resolution).ceil() as i64 + 1;
    let side = grid.side as i64;
    let mut out = vec![None; grid.num_cells()];
    for r in 0..side {
        for c in 0..side {
            if !mask.get(r as usize, c as usize) {
                continue;
            }
            let centre = grid.cell_center(r as usize, c as usize);
            let mut best: Option<(f64, usize)> = None;
            for nr in (r - reach).max(0)..=(r + reach).min(side - 1) {
                for nc in (c - reach).max(0)..=(c + reach).min(side - 1) {
                    for &i in &buckets[grid.index(nr as usize, nc as usize)] {
                        let d = dist(centre, nodes[i]);
                        let better = match best {
                            None => true,
                            Some((bd, bi)) => d < bd || (d == bd && i < bi),
                        };
                        if better {
                            best = Some((d, i));
                        }
                    }
                }
            }
            out[grid.index(r as usize, c as usize)] = best.filter(|b| b.0 <= ASSIGN_RADIUS).map(|b| b.1);
        }
    }
    out
}

/// Dense fine grid (`cells × F`) from node features.
pub fn assign_to_grid(features: &Mat, index: &[Option<usize>]) -> Mat {
    let mut out = Mat::zeros(index.len(), features.cols);
    for (i, src) in index.iter().enumerate() {
        if let Some(j) = src {
            out.row_mut(i).copy_from_slice(features.row(*j));
        }
    }
    out
}

/// Averaging operator over non-overlapping `factor × factor` blocks.
pub fn pool_operator(fine: GridSpec, factor: usize) -> Result<Sparse> {
    if factor == 0 || !fine.side.is_multiple_of(factor) {
        return Err(Error::contract(format!(
            "fine grid side {} is not divisible by {factor}",
            fine.side
        )));
    }
    let coarse = fine.coarsen(factor);
    let w = 1.0 / (factor * factor) as f64;
    let mut op = Sparse::new(coarse.num_cells(), fine.num_cells());
    for r in 0..coarse.side {
        for c in 0..coarse.side {
            let row = &mut op.entries[coarse.index(r, c)];
            for dr in 0..factor {
                for dc in 0..factor {
                    row.push((fine.index(r * factor + dr, c * factor + dc), w));
                }
            }
        }
    }
    Ok(op)
}

pub fn downsample_spec(specs: &mut Vec<ParamSpec>, fine_width: usize, coarse_width: usize) {
    mlp2_spec(specs, "down", fine_width, coarse_width, coarse_width);
}

/// 2×2 average pooling followed by a pointwise two-layer perceptron (ReLU output).
pub fn downsample(g: &mut Graph, store: &ParamStore, fine: NodeId, pool: &Arc<Sparse>) -> Result<NodeId> {
    if g.value(fine).rows != pool.cols {
        return Err(Error::contract(format!(
            "fine grid has {} cells, pooling expects {}",
            g.value(fine).rows,
            pool.cols
        )));
    }
    let pooled = g.aggregate(fine, pool.clone());
    let h = mlp2(g, store, "down", pooled);
    Ok(g.relu(h))
}

pub fn reward_head_spec(specs: &mut Vec<ParamSpec>, coarse_width: usize) {
    mlp2_spec(specs, "reward", coarse_width, REWARD_HIDDEN, 2);
}

/// Tape handles of the reward head outputs (`cells × 1` each).
#[derive(Debug, Clone, Copy)]
pub struct RewardNodes {
    pub transient: NodeId,
    pub terminal: NodeId,
}

/// Per-cell perceptron → `(raw_0, raw_1)`; `R = -R_MIN - softplus(raw_0)`, `R_g = raw_1`.
pub fn reward_head(g: &mut Graph, store: &ParamStore, coarse: NodeId) -> RewardNodes {
    let raw = mlp2(g, store, "reward", coarse);
    let r0 = g.slice_cols(raw, 0, 1);
    let sp = g.softplus(r0);
    let transient = g.affine(sp, -1.0, -R_MIN);
    let terminal = g.slice_cols(raw, 1, 1);
    RewardNodes { transient, terminal }
}

/// Transient and terminal reward over the coarse grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardMaps {
    pub side: usize,
    pub r: Vec<f64>,
    pub r_g: Vec<f64>,
}

impl RewardMaps {
    pub fn uniform(side: usize, r: f64, r_g: f64) -> Self {
        RewardMaps {
            side,
            r: vec![r; side * side],
            r_g: vec![r_g; side * side],
        }
    }

    pub fn from_nodes(g: &Graph, nodes: RewardNodes, side: usize) -> Result<Self> {
        let maps = RewardMaps {
            side,
            r: g.value(nodes.transient).data.clone(),
            r_g: g.value(nodes.terminal).data.clone(),
        };
        maps.check_finite()?;
        Ok(maps)
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.r.iter().chain(&self.r_g).position(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite reward at flat index {i} (transient max {:?})",
                self.r.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            )));
        }
        Ok(())
    }

    pub fn to_rows(v: &[f64], side: usize) -> Vec<Vec<f64>> {
        v.chunks(side).map(<[f64]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck, linear_spec, Init};

    #[test]
    fn r_min_constant() {
        assert!((R_MIN - (9f64.ln() + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn coincident_node_and_far_node() {
        let g = GridSpec::new(4, 1.0);
        let mask = BoolGrid::new(4, true);
        let c = g.cell_center(1, 1);
        let idx = assign_index(g, &[c], &mask);
        assert_eq!(idx[g.index(1, 1)], Some(0));
        let only = [[g.cell_center(0, 0)[0] + 1.4, g.cell_center(0, 0)[1]]];
        let idx = assign_index(g, &only, &mask);
        assert_eq!(idx[g.index(0, 0)], None);
    }

    #[test]
    fn undrivable_cells_stay_zero() {
        let g = GridSpec::new(6, 1.0);
        let mut mask = BoolGrid::new(6, true);
        mask.set(2, 3, false);
        let nodes: Vec<Point> = (0..36).map(|i| g.cell_center(i / 6, i % 6)).collect();
        let feats = Mat::from_vec(36, 2, (0..72).map(|v| v as f64 + 1.0).collect());
        let grid = assign_to_grid(&feats, &assign_index(g, &nodes, &mask));
        assert_eq!(grid.row(g.index(2, 3)), &[0.0, 0.0]);
        assert_eq!(grid.row(g.index(0, 0)), feats.row(0));
    }

    #[test]
    fn pooling_averages_blocks() {
        let fine = GridSpec::new(4, 1.0);
        let op = pool_operator(fine, 2).unwrap();
        let mut x = Mat::zeros(16, 1);
        x[(fine.index(0, 1), 0)] = 8.0;
        let y = op.apply(&x);
        assert_eq!(y[(0, 0)], 2.0);
        assert_eq!(y[(1, 0)], 0.0);
        assert!(pool_operator(GridSpec::new(5, 1.0), 2).is_err());
    }

    #[test]
    fn zero_params_give_uniform_rewards() {
        let mut specs = Vec::new();
        reward_head_spec(&mut specs, 3);
        let mut store = ParamStore::init(&specs, 0);
        store.zero_all();
        let mut g = Graph::new();
        let x = g.leaf(Mat::from_vec(4, 3, (0..12).map(|v| v as f64).collect()));
        let n = reward_head(&mut g, &store, x);
        let maps = RewardMaps::from_nodes(&g, n, 2).unwrap();
        let expect = -R_MIN - 2f64.ln();
        assert!(maps.r.iter().all(|v| (v - expect).abs() < 1e-15));
        assert!(maps.r_g.iter().all(|v| *v == 0.0));
    }

    fn head_loss(store: &ParamStore) -> (f64, crate::nn::Grads) {
        let mut g = Graph::new();
        let x = g.leaf(Mat::from_vec(
            8,
            3,
            (0..24).map(|v| ((v * 7 % 11) as f64 - 5.0) / 4.0).collect(),
        ));
        let pool = Arc::new(pool_operator(GridSpec::new(2, 1.0), 2).unwrap());
        let x4 = g.slice_cols(x, 0, 3);
        let fine = g.gather(x4, Arc::new(vec![Some(0), Some(3), None, Some(7)]));
        let coarse = downsample(&mut g, store, fine, &pool).unwrap();
        let n = reward_head(&mut g, store, coarse);
        let r = g.value(n.transient).data[0];
        let rg = g.value(n.terminal).data[0];
        let loss = 0.7 * r + 1.3 * rg * rg;
        let grads = g.backward(&[
            (n.transient, Mat::from_vec(1, 1, vec![0.7])),
            (n.terminal, Mat::from_vec(1, 1, vec![2.6 * rg])),
        ]);
        (loss, grads)
    }

    #[test]
    fn head_and_downsample_gradients_match_finite_differences() {
        let mut specs = Vec::new();
        downsample_spec(&mut specs, 3, 4);
        reward_head_spec(&mut specs, 4);
        linear_spec(&mut specs, "unused", 1, 1, Init::Zero);
        let store = ParamStore::init(&specs, 9);
        let (_, grads) = head_loss(&store);
        let err = gradcheck(&store, &grads, 1e-5, None, |s| head_loss(s).0);
        assert!(err <= 1e-4, "relative error {err}");
    }
}
