//! Geometry precomputed once per scenario: node sets, adjacency operators and
//! raw input matrices for the stage-1 encoders.

use std::sync::Arc;

use super::{Mat, Neighbors, Sparse};
use crate::adaptor::assign_index;
use crate::error::{Error, Result};
use crate::scene::{dist, point_segment_distance, AgentTrack, GridSpec, Point, Scenario};

pub const LANE_DILATIONS: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const DRIVABLE_DILATIONS: [usize; 3] = [1, 2, 4];
/// Cross-set messages only flow between nodes closer than this.
pub const GATE_RADIUS: f64 = 10.0;
/// Scale applied to positions before they enter a network.
pub const POS_SCALE: f64 = 25.0;
pub const DRIVABLE_RAW: usize = 6;

/// Boolean lane-graph operators at each dilation.
#[derive(Debug, Clone)]
pub struct LaneAdjacency {
    pub dilations: Vec<usize>,
    pub pre: Vec<Arc<Sparse>>,
    pub suc: Vec<Arc<Sparse>>,
    pub left: Arc<Sparse>,
    pub right: Arc<Sparse>,
}

impl LaneAdjacency {
    pub fn empty(n: usize, dilations: &[usize]) -> Self {
        let e = || Arc::new(Sparse::new(n, n));
        LaneAdjacency {
            dilations: dilations.to_vec(),
            pre: dilations.iter().map(|_| e()).collect(),
            suc: dilations.iter().map(|_| e()).collect(),
            left: e(),
            right: e(),
        }
    }

    pub fn nodes(&self) -> usize {
        self.left.rows
    }

    /// Build from one-step successor lists and lateral neighbour lists.
    pub fn from_edges(
        succ: &[Vec<usize>],
        left: &[Option<usize>],
        right: &[Option<usize>],
        dilations: &[usize],
    ) -> Self {
        let n = succ.len();
        let mut pred = vec![Vec::new(); n];
        for (i, s) in succ.iter().enumerate() {
            for &j in s {
                pred[j].push(i);
            }
        }
        let power = |step: &[Vec<usize>], k: usize| -> Arc<Sparse> {
            let mut op = Sparse::new(n, n);
            for i in 0..n {
                let mut frontier = vec![i];
                for _ in 0..k {
                    let mut next: Vec<usize> = frontier.iter().flat_map(|&f| step[f].iter().copied()).collect();
                    next.sort_unstable();
                    next.dedup();
                    frontier = next;
                    if frontier.is_empty() {
                        break;
                    }
                }
                op.entries[i] = frontier.into_iter().map(|j| (j, 1.0)).collect();
            }
            Arc::new(op)
        };
        let lateral = |l: &[Option<usize>]| -> Arc<Sparse> {
            let mut op = Sparse::new(n, n);
            for (i, t) in l.iter().enumerate() {
                if let Some(j) = t {
                    op.entries[i].push((*j, 1.0));
                }
            }
            Arc::new(op)
        };
        LaneAdjacency {
            dilations: dilations.to_vec(),
            pre: dilations.iter().map(|&d| power(&pred, d)).collect(),
            suc: dilations.iter().map(|&d| power(succ, d)).collect(),
            left: lateral(left),
            right: lateral(right),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub lane_pos: Vec<Point>,
    /// Lane-node inputs (scaled): displacement `N_l×2` and position `N_l×2`.
    pub lane_disp: Mat,
    pub lane_xy: Mat,
    pub lane_adj: LaneAdjacency,
    pub drivable_pos: Vec<Point>,
    pub drivable_raw: Mat,
    pub drivable_nbrs: Neighbors,
    /// Flattened per-timestep `(vx, vy, speed, valid)`; row 0 is the target.
    pub agent_raw: Mat,
    pub agent_pos: Vec<Point>,
    /// Agents without any valid sample get a zero feature.
    pub agent_valid: Vec<bool>,
    pub a2l: Arc<Sparse>,
    pub l2d: Arc<Sparse>,
    pub l2a: Arc<Sparse>,
    pub a2a: Arc<Sparse>,
    /// Fine cell → drivable node whose feature it carries.
    pub cell_node: Arc<Vec<Option<usize>>>,
    pub fine: GridSpec,
    /// Target speed estimated from its history (m/s).
    pub v0: f64,
    /// Target history positions, oldest first (invalid samples repeat the nearest valid one).
    pub history: Vec<Point>,
    pub dt: f64,
}

/// Distance-gated, row-normalised aggregation from `src` points to `dst` points.
pub fn distance_gate(dst: &[Point], src: &[Point], radius: f64) -> Sparse {
    let mut op = Sparse::new(dst.len(), src.len());
    for (i, d) in dst.iter().enumerate() {
        let mut row: Vec<(usize, f64)> = src
            .iter()
            .enumerate()
            .filter_map(|(j, s)| {
                let w = 1.0 - dist(*d, *s) / radius;
                (w > 0.0).then_some((j, w))
            })
            .collect();
        let total: f64 = row.iter().map(|e| e.1).sum();
        if total > 0.0 {
            row.iter_mut().for_each(|e| e.1 /= total);
        }
        op.entries[i] = row;
    }
    op
}

/// Estimated current speed: mean over the last five valid steps.
pub fn estimate_speed(track: &AgentTrack, dt: f64) -> f64 {
    let valid: Vec<&crate::scene::TrackSample> = track.track.iter().filter(|s| s.valid).collect();
    if valid.len() < 2 {
        return 0.0;
    }
    let last = valid[valid.len() - 1];
    let first = valid[valid.len().saturating_sub(6)];
    let steps = (last.t - first.t) as f64;
    if steps <= 0.0 {
        return 0.0;
    }
    dist([last.x, last.y], [first.x, first.y]) / (steps * dt)
}

struct LaneNodes {
    pos: Vec<Point>,
    disp: Vec<Point>,
    dir: Vec<Point>,
    adj: LaneAdjacency,
    /// Segment endpoints for distance queries.
    segments: Vec<(Point, Point)>,
}

fn lane_nodes(s: &Scenario) -> LaneNodes {
    let lanes: Vec<_> = s
        .lanes
        .iter()
        .filter(|l| {
            if l.centerline.len() < 2 {
                tracing::warn!(lane = l.id, "skipping lane with fewer than two centerline points");
                false
            } else {
                true
            }
        })
        .collect();
    let mut pos = Vec::new();
    let mut disp = Vec::new();
    let mut dir = Vec::new();
    let mut segments = Vec::new();
    let mut ranges = std::collections::HashMap::new();
    for lane in &lanes {
        let start = pos.len();
        for w in lane.centerline.windows(2) {
            let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
            let n = d[0].hypot(d[1]).max(1e-12);
            pos.push([(w[0][0] + w[1][0]) / 2.0, (w[0][1] + w[1][1]) / 2.0]);
            disp.push(d);
            dir.push([d[0] / n, d[1] / n]);
            segments.push((w[0], w[1]));
        }
        ranges.insert(lane.id, start..pos.len());
    }
    let nearest_in = |lane: i64, p: Point| -> Option<usize> {
        let r = ranges.get(&lane)?.clone();
        r.min_by(|&a, &b| dist(pos[a], p).total_cmp(&dist(pos[b], p)))
    };
    let n = pos.len();
    let mut succ = vec![Vec::new(); n];
    let mut left = vec![None; n];
    let mut right = vec![None; n];
    for lane in &lanes {
        let r = ranges[&lane.id].clone();
        for (i, s) in succ.iter_mut().enumerate().take(r.end - 1).skip(r.start) {
            s.push(i + 1);
        }
        let last = r.end - 1;
        let tail = *lane.centerline.last().unwrap();
        for &b in &lane.suc {
            if let Some(j) = nearest_in(b, tail) {
                if !succ[last].contains(&j) {
                    succ[last].push(j);
                }
            }
        }
        for i in r {
            if let Some(l) = lane.left {
                left[i] = nearest_in(l, pos[i]);
            }
            if let Some(rr) = lane.right {
                right[i] = nearest_in(rr, pos[i]);
            }
        }
    }
    let adj = LaneAdjacency::from_edges(&succ, &left, &right, &LANE_DILATIONS);
    LaneNodes {
        pos,
        disp,
        dir,
        adj,
        segments,
    }
}

impl SceneInputs {
    /// `s` must already be in the target frame. `blocked` cells are treated
    /// exactly like cells that were never drivable.
    pub fn build(s: &Scenario, blocked: &[(usize, usize)], t_f: usize, dt: f64) -> Result<Self> {
        let target_idx = s
            .target_index()
            .ok_or_else(|| Error::contract("scenario has no target agent"))?;
        let fine = s.grid();
        let lanes = lane_nodes(s);
        let v0 = estimate_speed(&s.agents[target_idx], dt);
        let reach = (v0 * t_f as f64 * dt).max(2.0);

        // Drivable nodes sit on drivable cell centres.
        let mask = s.mask_with_blocked(blocked);
        let mut drivable_pos = Vec::new();
        let mut node_of_cell = vec![None; fine.num_cells()];
        for r in 0..fine.side {
            for c in 0..fine.side {
                if mask.get(r, c) {
                    node_of_cell[fine.index(r, c)] = Some(drivable_pos.len());
                    drivable_pos.push(fine.cell_center(r, c));
                }
            }
        }
        let mut raw = Mat::zeros(drivable_pos.len(), DRIVABLE_RAW);
        for (i, p) in drivable_pos.iter().enumerate() {
            let (mut best, mut heading) = (f64::INFINITY, [0.0, 0.0]);
            for (k, (a, b)) in lanes.segments.iter().enumerate() {
                let d = point_segment_distance(*p, *a, *b);
                if d < best {
                    best = d;
                    heading = lanes.dir[k];
                }
            }
            let row = raw.row_mut(i);
            row[0] = p[0] / POS_SCALE;
            row[1] = p[1] / POS_SCALE;
            row[2] = (p[0].hypot(p[1]) / reach).min(3.0);
            row[3] = (best / 3.5).min(3.0);
            row[4] = heading[0];
            row[5] = heading[1];
        }
        let mut lists = vec![Vec::new(); drivable_pos.len()];
        for r in 0..fine.side as i64 {
            for c in 0..fine.side as i64 {
                let Some(me) = node_of_cell[fine.index(r as usize, c as usize)] else {
                    continue;
                };
                for d in DRIVABLE_DILATIONS {
                    let d = d as i64;
                    for (dr, dc) in [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)] {
                        let (nr, nc) = (r + dr * d, c + dc * d);
                        if nr < 0 || nc < 0 || nr >= fine.side as i64 || nc >= fine.side as i64 {
                            continue;
                        }
                        if let Some(j) = node_of_cell[fine.index(nr as usize, nc as usize)] {
                            lists[me].push(j);
                        }
                    }
                }
            }
        }
        let drivable_nbrs = Neighbors {
            sources: drivable_pos.len(),
            lists,
        };

        // Agents, target first.
        let mut order: Vec<usize> = vec![target_idx];
        order.extend((0..s.agents.len()).filter(|&i| i != target_idx));
        let t_p = s.agents[target_idx].track.len();
        let mut agent_raw = Mat::zeros(order.len(), 4 * t_p);
        let mut agent_pos = Vec::new();
        let mut agent_valid = Vec::new();
        for (row, &ai) in order.iter().enumerate() {
            let a = &s.agents[ai];
            if a.track.len() != t_p {
                return Err(Error::contract(format!(
                    "agent {} has {} samples, target has {t_p}",
                    a.id,
                    a.track.len()
                )));
            }
            let out = agent_raw.row_mut(row);
            for k in 0..t_p {
                let cur = a.track[k];
                if !cur.valid {
                    continue;
                }
                let (vx, vy) = match k.checked_sub(1).map(|p| a.track[p]) {
                    Some(prev) if prev.valid => ((cur.x - prev.x) / dt, (cur.y - prev.y) / dt),
                    _ => (0.0, 0.0),
                };
                out[4 * k] = vx / 10.0;
                out[4 * k + 1] = vy / 10.0;
                out[4 * k + 2] = vx.hypot(vy) / 10.0;
                out[4 * k + 3] = 1.0;
            }
            let last = a.last_valid();
            agent_valid.push(last.is_some());
            agent_pos.push(last.unwrap_or([f64::INFINITY, f64::INFINITY]));
        }

        let target = &s.agents[target_idx];
        let mut history = Vec::with_capacity(t_p);
        let mut fill = target.track.iter().find(|x| x.valid).map_or([0.0, 0.0], |x| [x.x, x.y]);
        for smp in &target.track {
            if smp.valid {
                fill = [smp.x, smp.y];
            }
            history.push(fill);
        }

        let cell_node = assign_index(fine, &drivable_pos, &mask);
        let lane_pos = lanes.pos.clone();
        let scaled =
            |v: &[Point], k: f64| Mat::from_vec(v.len(), 2, v.iter().flat_map(|p| [p[0] / k, p[1] / k]).collect());
        Ok(SceneInputs {
            lane_disp: scaled(&lanes.disp, 2.0),
            lane_xy: scaled(&lanes.pos, POS_SCALE),
            lane_adj: lanes.adj,
            a2l: Arc::new(distance_gate(&lane_pos, &agent_pos, GATE_RADIUS)),
            l2d: Arc::new(distance_gate(&drivable_pos, &lane_pos, GATE_RADIUS)),
            l2a: Arc::new(distance_gate(&agent_pos, &lane_pos, GATE_RADIUS)),
            a2a: Arc::new(distance_gate(&agent_pos, &agent_pos, GATE_RADIUS)),
            lane_pos,
            drivable_pos,
            drivable_raw: raw,
            drivable_nbrs,
            agent_raw,
            agent_pos,
            agent_valid,
            cell_node: Arc::new(cell_node),
            fine,
            v0,
            history,
            dt,
        })
    }

    pub fn num_lane_nodes(&self) -> usize {
        self.lane_pos.len()
    }

    pub fn num_drivable(&self) -> usize {
        self.drivable_pos.len()
    }
}
