//! Parametric synthetic scene generator with labelled driving modes.
//!
//! Geometry is laid out in a route frame where the target sits at the origin
//! heading `+x` with right-hand traffic, lanes 3.5 m wide. The mask is
//! rasterised in the frame estimated from the noisy history (the same
//! estimator `to_target_frame` uses), then everything is moved by a random
//! rigid transform.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    estimate_pose, point_segment_distance, AgentTrack, BoolGrid, FuturePoint, GridSpec, LaneSegment, Point, Pose,
    Scenario, ScenarioMeta, TrackSample,
};
use crate::error::{Error, Result};

const LANE_WIDTH: f64 = 3.5;
const LANE_SPACING: f64 = 2.0;
const ROUTE_STEP: f64 = 0.25;
/// Lanes are clipped to this distance from the target.
const LANE_REACH: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    Curve,
    TJunction,
    Crossing,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Straight,
        ScenarioKind::Curve,
        ScenarioKind::TJunction,
        ScenarioKind::Crossing,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::Curve => "curve",
            ScenarioKind::TJunction => "t_junction",
            ScenarioKind::Crossing => "crossing",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown scenario kind `{s}` (expected straight|curve|t_junction|crossing)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub speed_min: f64,
    pub speed_max: f64,
    /// Longitudinal acceleration over the future is drawn from `[-accel_max, accel_max]`.
    pub accel_max: f64,
    pub noise_sigma: f64,
    pub block_prob: f64,
    /// Distance from the target to the junction mouth.
    pub junction_min: f64,
    pub junction_max: f64,
    pub neighbors_max: usize,
    pub history_len: usize,
    pub future_len: usize,
    pub dt: f64,
    pub grid_side: usize,
    pub resolution_m: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            speed_min: 3.0,
            speed_max: 7.0,
            accel_max: 0.2,
            noise_sigma: 0.05,
            block_prob: 0.3,
            junction_min: 4.0,
            junction_max: 10.0,
            neighbors_max: 2,
            history_len: 20,
            future_len: 30,
            dt: 0.1,
            grid_side: 50,
            resolution_m: 1.0,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2.0..=15.0).contains(&self.speed_min)
            || !(2.0..=15.0).contains(&self.speed_max)
            || self.speed_min > self.speed_max
        {
            return bad(format!(
                "speeds must satisfy 2 <= speed_min <= speed_max <= 15 m/s (got {}..{})",
                self.speed_min, self.speed_max
            ));
        }
        if !(0.0..=0.5).contains(&self.noise_sigma) {
            return bad(format!("noise_sigma must be in [0, 0.5] m (got {})", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.block_prob) {
            return bad(format!("block_prob must be in [0, 1] (got {})", self.block_prob));
        }
        if self.accel_max < 0.0 || self.accel_max > 3.0 {
            return bad(format!("accel_max must be in [0, 3] m/s^2 (got {})", self.accel_max));
        }
        if self.junction_min < 2.5 || self.junction_min > self.junction_max {
            return bad("junction distance range must satisfy 2.5 <= min <= max".into());
        }
        if self.history_len < 2 || self.future_len < 1 || self.dt <= 0.0 {
            return bad("history_len >= 2, future_len >= 1 and dt > 0 required".into());
        }
        if self.grid_side == 0 || !self.grid_side.is_multiple_of(2) || self.resolution_m <= 0.0 {
            return bad("grid_side must be positive and even, resolution_m positive".into());
        }
        let horizon = self.future_len as f64 * self.dt;
        let reach = self.speed_max * horizon + 0.5 * self.accel_max * horizon * horizon;
        let half = self.grid_side as f64 * self.resolution_m / 2.0;
        if reach > half - 1.0 {
            return bad(format!(
                "speed_max {} m/s reaches {reach:.1} m in {horizon} s, beyond the grid half-extent {half} m",
                self.speed_max
            ));
        }
        Ok(())
    }
}

/// Axis-aligned region in the route frame covering one exit branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchRegion {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl BranchRegion {
    fn contains(&self, p: Point) -> bool {
        p[0] >= self.x.0 && p[0] <= self.x.1 && p[1] >= self.y.0 && p[1] <= self.y.1
    }
}

struct Route {
    label: String,
    pts: Vec<Point>,
    cum: Vec<f64>,
    branch: Option<Branch>,
}

#[derive(Clone, Copy)]
enum Branch {
    /// Exit heading south (`-y`) on the crossing road.
    Right { j: f64 },
    /// Exit heading north (`+y`).
    Left { j: f64 },
    /// Straight through the crossing.
    Through { j: f64 },
}

impl Branch {
    fn region(&self) -> BranchRegion {
        let far = 1e3;
        match *self {
            Branch::Right { j } => BranchRegion {
                x: (j, j + 2.0 * LANE_WIDTH),
                y: (-far, -LANE_WIDTH / 2.0),
            },
            Branch::Left { j } => BranchRegion {
                x: (j, j + 2.0 * LANE_WIDTH),
                y: (1.5 * LANE_WIDTH, far),
            },
            Branch::Through { j } => BranchRegion {
                x: (j + 2.0 * LANE_WIDTH, far),
                y: (-LANE_WIDTH / 2.0, 1.5 * LANE_WIDTH),
            },
        }
    }

    /// A band across the branch starting `offset` past the junction, `len` long.
    fn band(&self, offset: f64, len: f64) -> BranchRegion {
        let mut r = self.region();
        match *self {
            Branch::Right { .. } => r.y = (r.y.1 - offset - len, r.y.1 - offset),
            Branch::Left { .. } => r.y = (r.y.0 + offset, r.y.0 + offset + len),
            Branch::Through { .. } => r.x = (r.x.0 + offset, r.x.0 + offset + len),
        }
        r
    }
}

impl Route {
    fn new(label: &str, pts: Vec<Point>, branch: Option<Branch>) -> Self {
        let mut cum = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        for (i, p) in pts.iter().enumerate() {
            if i > 0 {
                acc += super::dist(pts[i - 1], *p);
            }
            cum.push(acc);
        }
        Route {
            label: label.to_string(),
            pts,
            cum,
            branch,
        }
    }

    fn at(&self, s: f64) -> Point {
        let s = s.clamp(0.0, *self.cum.last().unwrap());
        let i = self.cum.partition_point(|&c| c < s).clamp(1, self.pts.len() - 1);
        let (s0, s1) = (self.cum[i - 1], self.cum[i]);
        let t = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
        let (a, b) = (self.pts[i - 1], self.pts[i]);
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    /// Arc length of the point closest to `p`.
    fn project(&self, p: Point) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (i, q) in self.pts.iter().enumerate() {
            let d = super::dist(*q, p);
            if d < best.0 {
                best = (d, self.cum[i]);
            }
        }
        best.1
    }
}

fn line(a: Point, b: Point, step: f64) -> Vec<Point> {
    let n = (super::dist(a, b) / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}

fn arc(center: Point, radius: f64, from: f64, to: f64, step: f64) -> Vec<Point> {
    let n = ((radius * (to - from).abs()) / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let th = from + (to - from) * i as f64 / n as f64;
            [center[0] + radius * th.cos(), center[1] + radius * th.sin()]
        })
        .collect()
}

/// Concatenate polylines, dropping duplicated joints.
fn chain(parts: &[Vec<Point>]) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::new();
    for part in parts {
        for &p in part {
            if out.last().is_none_or(|q| super::dist(*q, p) > 1e-9) {
                out.push(p);
            }
        }
    }
    out
}

/// Polyline shifted to its left by `d` (negative: right).
fn offset_left(pts: &[Point], d: f64) -> Vec<Point> {
    (0..pts.len())
        .map(|i| {
            let a = pts[i.saturating_sub(1)];
            let b = pts[(i + 1).min(pts.len() - 1)];
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let n = dx.hypot(dy).max(1e-12);
            [pts[i][0] - d * dy / n, pts[i][1] + d * dx / n]
        })
        .collect()
}

/// Resample a dense polyline at roughly `step` spacing, keep points within reach.
fn lane_points(dense: &[Point], step: f64) -> Vec<Point> {
    let r = Route::new("", dense.to_vec(), None);
    let total = *r.cum.last().unwrap();
    let n = (total / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| r.at(total * i as f64 / n as f64))
        .filter(|p| p[0].hypot(p[1]) <= LANE_REACH)
        .collect()
}

/// Lane id, dense centerline, pre, suc, left, right.
type LaneSpec = (i64, Vec<Point>, Vec<i64>, Vec<i64>, Option<i64>, Option<i64>);

struct Layout {
    lanes: Vec<LaneSpec>,
    modes: Vec<Route>,
}

fn layout(kind: ScenarioKind, rng: &mut ChaCha8Rng, p: &GeneratorParams) -> Layout {
    let step = ROUTE_STEP;
    let far = 80.0;
    match kind {
        ScenarioKind::Straight => {
            let l0 = line([-far, 0.0], [far, 0.0], step);
            let l1 = line([-far, LANE_WIDTH], [far, LANE_WIDTH], step);
            Layout {
                lanes: vec![
                    (0, l0.clone(), vec![], vec![], Some(1), None),
                    (1, l1, vec![], vec![], None, Some(0)),
                ],
                modes: vec![Route::new("straight", l0, None)],
            }
        }
        ScenarioKind::Curve => {
            let c0 = rng.random_range(0.0..10.0);
            let radius = rng.random_range(15.0..40.0);
            let left = rng.random_bool(0.5);
            let approach = line([-far, 0.0], [c0, 0.0], step);
            let (bend, exit_dir, label) = if left {
                let b = arc([c0, radius], radius, -FRAC_PI_2, 0.0, step);
                (b, [0.0, 1.0], "curve_left")
            } else {
                let b = arc([c0, -radius], radius, FRAC_PI_2, 0.0, step);
                (b, [0.0, -1.0], "curve_right")
            };
            let end = *bend.last().unwrap();
            let exit = line(end, [end[0] + far * exit_dir[0], end[1] + far * exit_dir[1]], step);
            let route = chain(&[approach, bend, exit]);
            let mut opposite = offset_left(&route, LANE_WIDTH);
            opposite.reverse();
            Layout {
                lanes: vec![
                    (0, route.clone(), vec![], vec![], None, None),
                    (1, opposite, vec![], vec![], None, None),
                ],
                modes: vec![Route::new(label, route, None)],
            }
        }
        ScenarioKind::TJunction | ScenarioKind::Crossing => {
            let j = rng.random_range(p.junction_min..=p.junction_max);
            let w = LANE_WIDTH;
            let entry = [j - 2.0, 0.0];
            let approach = line([-far, 0.0], entry, step);
            let r_right = w + w / 2.0 + 0.25;
            let right_arc = arc([j - 2.0, -r_right], r_right, FRAC_PI_2, 0.0, step);
            let r_left = 2.0 + 1.5 * w;
            let left_arc = arc([j - 2.0, r_left], r_left, -FRAC_PI_2, 0.0, step);
            let south = line([j + w / 2.0, far], [j + w / 2.0, -far], step);
            let north = line([j + 1.5 * w, -far], [j + 1.5 * w, far], step);
            let westbound = line([j, w], [-far, w], step);

            let right_end = *right_arc.last().unwrap();
            let left_end = *left_arc.last().unwrap();
            let right_route = chain(&[
                approach.clone(),
                right_arc.clone(),
                line(right_end, [right_end[0], -far], step),
            ]);
            let left_route = chain(&[
                approach.clone(),
                left_arc.clone(),
                line(left_end, [left_end[0], far], step),
            ]);

            let mut lanes = vec![
                (0, approach.clone(), vec![], vec![2, 3], None, None),
                (1, westbound, vec![], vec![], None, None),
                (2, right_arc, vec![0], vec![4], None, None),
                (3, left_arc, vec![0], vec![5], None, None),
                (4, south, vec![2], vec![], None, None),
                (5, north, vec![3], vec![], None, None),
            ];
            let mut modes = vec![
                Route::new("left", left_route, Some(Branch::Left { j })),
                Route::new("right", right_route, Some(Branch::Right { j })),
            ];
            if kind == ScenarioKind::Crossing {
                let through = line(entry, [far, 0.0], step);
                let east_westbound = line([far, w], [j + 2.0 * w, w], step);
                lanes[0].3.push(6);
                lanes.push((6, through.clone(), vec![0], vec![], None, None));
                lanes.push((7, east_westbound, vec![], vec![], None, None));
                modes.push(Route::new(
                    "straight",
                    chain(&[approach, through]),
                    Some(Branch::Through { j }),
                ));
            }
            Layout { lanes, modes }
        }
    }
}

/// Nearest-to-origin point's arc length on a route (the target's position).
fn origin_arclength(route: &Route) -> f64 {
    route.project([0.0, 0.0])
}

fn min_lane_distance(p: Point, lanes: &[Vec<Point>]) -> f64 {
    let mut best = f64::INFINITY;
    for l in lanes {
        for w in l.windows(2) {
            // cheap reject on the bounding box
            let lo_x = w[0][0].min(w[1][0]) - best;
            let hi_x = w[0][0].max(w[1][0]) + best;
            let lo_y = w[0][1].min(w[1][1]) - best;
            let hi_y = w[0][1].max(w[1][1]) + best;
            if p[0] < lo_x || p[0] > hi_x || p[1] < lo_y || p[1] > hi_y {
                continue;
            }
            best = best.min(point_segment_distance(p, w[0], w[1]));
        }
    }
    best
}

/// Deterministic scenario for `(kind, params, seed)`.
pub fn generate_scenario(kind: ScenarioKind, params: &GeneratorParams, seed: u64) -> Result<Scenario> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lay = layout(kind, &mut rng, params);
    let sigma = params.noise_sigma;
    let normal = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    let noise = |rng: &mut ChaCha8Rng| -> Point {
        if sigma == 0.0 {
            return [0.0, 0.0];
        }
        let mut n = || -> f64 { normal.sample(rng).clamp(-3.0, 3.0) * sigma };
        [n(), n()]
    };

    // Blocking happens before the mode draw so the future avoids it.
    let grid = GridSpec::new(params.grid_side, params.resolution_m);
    let blocked_mode = if lay.modes.len() >= 2 && rng.random_bool(params.block_prob) {
        Some(rng.random_range(0..lay.modes.len()))
    } else {
        None
    };
    let band = blocked_mode.map(|m| {
        let off = rng.random_range(1.0..6.0);
        let len = rng.random_range(3.0..6.0);
        lay.modes[m]
            .branch
            .expect("multi-mode layouts have branches")
            .band(off, len)
    });
    let remaining: Vec<usize> = (0..lay.modes.len()).filter(|&m| Some(m) != blocked_mode).collect();
    let mode = remaining[rng.random_range(0..remaining.len())];
    let route = &lay.modes[mode];

    let v = rng.random_range(params.speed_min..=params.speed_max);
    let accel = if params.accel_max > 0.0 {
        rng.random_range(-params.accel_max..=params.accel_max)
    } else {
        0.0
    };
    let s0 = origin_arclength(route);
    let dt = params.dt;
    let hist = params.history_len;
    let target_track: Vec<TrackSample> = (0..hist)
        .map(|k| {
            let back = (hist - 1 - k) as f64 * dt * v;
            let p = route.at(s0 - back);
            let e = noise(&mut rng);
            TrackSample {
                t: k as i64 - (hist as i64 - 1),
                x: p[0] + e[0],
                y: p[1] + e[1],
                valid: true,
            }
        })
        .collect();
    let future: Vec<FuturePoint> = (1..=params.future_len)
        .map(|k| {
            let t = k as f64 * dt;
            let p = route.at(s0 + v * t + 0.5 * accel * t * t);
            let e = noise(&mut rng);
            FuturePoint {
                t: k as i64,
                x: p[0] + e[0],
                y: p[1] + e[1],
            }
        })
        .collect();

    // Neighbours drive along random lanes near the target.
    let n_neighbors = rng.random_range(0..=params.neighbors_max);
    let mut agents = vec![AgentTrack {
        id: 0,
        is_target: true,
        track: target_track,
    }];
    for n in 0..n_neighbors {
        let (_, dense, ..) = &lay.lanes[rng.random_range(0..lay.lanes.len())];
        let lane_route = Route::new("", dense.clone(), None);
        let speed = rng.random_range(2.0..8.0);
        let near = lane_route.project([0.0, 0.0]);
        let total = *lane_route.cum.last().unwrap();
        let lo = (near - 20.0).max(speed * dt * hist as f64);
        let hi = (near + 20.0).min(total).max(lo + 1e-6);
        let s_now = rng.random_range(lo..hi);
        let track = (0..hist)
            .map(|k| {
                let p = lane_route.at(s_now - (hist - 1 - k) as f64 * dt * speed);
                let e = noise(&mut rng);
                TrackSample {
                    t: k as i64 - (hist as i64 - 1),
                    x: p[0] + e[0],
                    y: p[1] + e[1],
                    valid: true,
                }
            })
            .collect();
        agents.push(AgentTrack {
            id: n as i64 + 1,
            is_target: false,
            track,
        });
    }

    // Mask in the frame estimated from the noisy history.
    let (est, _) = estimate_pose(&agents[0]).expect("target track is valid");
    let dense_lanes: Vec<Vec<Point>> = lay.lanes.iter().map(|l| l.1.clone()).collect();
    let mut mask = BoolGrid::new(grid.side, false);
    let mut blocked_cells = Vec::new();
    let mut branch_cells: BTreeMap<String, Vec<[usize; 2]>> = BTreeMap::new();
    for r in 0..grid.side {
        for c in 0..grid.side {
            let p = est.to_parent(grid.cell_center(r, c));
            if min_lane_distance(p, &dense_lanes) > LANE_WIDTH / 2.0 {
                continue;
            }
            if band.is_some_and(|b| b.contains(p)) {
                blocked_cells.push([r, c]);
                continue;
            }
            mask.set(r, c, true);
            for m in &lay.modes {
                if let Some(b) = m.branch {
                    if b.region().contains(p) {
                        branch_cells.entry(m.label.clone()).or_default().push([r, c]);
                    }
                }
            }
        }
    }

    let world = Pose {
        x: rng.random_range(-100.0..100.0),
        y: rng.random_range(-100.0..100.0),
        heading: rng.random_range(-PI..PI),
    };
    let to_world = |p: Point| world.to_parent(p);
    let lanes = lay
        .lanes
        .iter()
        .filter_map(|(id, dense, pre, suc, left, right)| {
            let pts: Vec<Point> = lane_points(dense, LANE_SPACING).into_iter().map(to_world).collect();
            (pts.len() >= 2).then(|| LaneSegment {
                id: *id,
                centerline: pts,
                pre: pre.clone(),
                suc: suc.clone(),
                left: *left,
                right: *right,
            })
        })
        .collect::<Vec<_>>();
    let kept: std::collections::HashSet<i64> = lanes.iter().map(|l| l.id).collect();
    let lanes = lanes
        .into_iter()
        .map(|mut l| {
            l.pre.retain(|i| kept.contains(i));
            l.suc.retain(|i| kept.contains(i));
            l.left = l.left.filter(|i| kept.contains(i));
            l.right = l.right.filter(|i| kept.contains(i));
            l
        })
        .collect();
    for a in &mut agents {
        for s in &mut a.track {
            let [x, y] = to_world([s.x, s.y]);
            s.x = x;
            s.y = y;
        }
    }
    let gt_future = future
        .into_iter()
        .map(|f| {
            let [x, y] = to_world([f.x, f.y]);
            FuturePoint { t: f.t, x, y }
        })
        .collect();

    let feasible_modes = remaining.iter().map(|&m| lay.modes[m].label.clone()).collect();
    Ok(Scenario {
        id: format!("{kind}_{seed}"),
        resolution_m: params.resolution_m,
        grid_side: params.grid_side,
        lanes,
        drivable_mask: mask,
        agents,
        gt_future: Some(gt_future),
        mode_label: Some(route.label.clone()),
        grid_pose: world.compose(&est),
        meta: ScenarioMeta {
            kind: Some(kind.to_string()),
            feasible_modes,
            blocked_mode: blocked_mode.map(|m| lay.modes[m].label.clone()),
            blocked_cells,
            branch_cells,
            degenerate_heading: false,
        },
    })
}
