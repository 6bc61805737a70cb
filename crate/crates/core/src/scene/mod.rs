//! Scenario data model: lanes, drivable mask, agent tracks and the optional
//! ground-truth future of the target agent.
//!
//! Grid convention used throughout the crate: a square grid of `side` cells
//! of `resolution` meters centred on the frame origin. Row index grows with
//! `+y` (north), column index with `+x` (east); arrays are row-major.

mod frame;
mod generate;
mod io;
mod quantize;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use frame::{estimate_pose, to_target_frame, Normalized};
pub use generate::{generate_scenario, BranchRegion, GeneratorParams, ScenarioKind};
pub use io::{load_corpus, load_scenario, parse_scenario, save_scenario, scenario_to_json, CorpusEntry};
pub use quantize::{adjacent, demonstration_from_future, quantize_future, Demonstration, Quantized};

pub type Point = [f64; 2];

/// Rigid pose: position plus heading (radians, counter-clockwise from `+x`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Pose {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        }
    }
}

impl Pose {
    /// Map a point expressed in this pose's local frame to the parent frame.
    pub fn to_parent(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Map a point from the parent frame into this pose's local frame.
    pub fn to_local(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// `self ∘ inner`: pose of `inner` (given in self's frame) in the parent frame.
    pub fn compose(&self, inner: &Pose) -> Pose {
        let [x, y] = self.to_parent([inner.x, inner.y]);
        Pose {
            x,
            y,
            heading: self.heading + inner.heading,
        }
    }
}

/// Square grid geometry centred on the frame origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub side: usize,
    pub resolution: f64,
}

impl GridSpec {
    pub fn new(side: usize, resolution: f64) -> Self {
        GridSpec { side, resolution }
    }

    pub fn half_extent(&self) -> f64 {
        self.side as f64 * self.resolution / 2.0
    }

    pub fn num_cells(&self) -> usize {
        self.side * self.side
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.side + col
    }

    pub fn row_col(&self, idx: usize) -> (usize, usize) {
        (idx / self.side, idx % self.side)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        let h = self.half_extent();
        [
            -h + (col as f64 + 0.5) * self.resolution,
            -h + (row as f64 + 0.5) * self.resolution,
        ]
    }

    /// Containing cell, or `None` outside the grid.
    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let h = self.half_extent();
        let c = ((p[0] + h) / self.resolution).floor();
        let r = ((p[1] + h) / self.resolution).floor();
        let n = self.side as f64;
        if c < 0.0 || r < 0.0 || c >= n || r >= n || !c.is_finite() || !r.is_finite() {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Containing cell with out-of-range coordinates clamped to the boundary.
    pub fn clamped_cell_of(&self, p: Point) -> ((usize, usize), bool) {
        match self.cell_of(p) {
            Some(rc) => (rc, false),
            None => {
                let h = self.half_extent();
                let max = self.side as f64 - 1.0;
                let c = ((p[0] + h) / self.resolution).floor().clamp(0.0, max);
                let r = ((p[1] + h) / self.resolution).floor().clamp(0.0, max);
                ((r as usize, c as usize), true)
            }
        }
    }

    /// Grid cell at the frame origin.
    pub fn center_cell(&self) -> (usize, usize) {
        self.clamped_cell_of([0.0, 0.0]).0
    }

    /// Coarse grid obtained by pooling `factor × factor` blocks.
    pub fn coarsen(&self, factor: usize) -> GridSpec {
        GridSpec {
            side: self.side / factor,
            resolution: self.resolution * factor as f64,
        }
    }
}

/// Boolean grid serialised as nested row arrays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolGrid {
    pub side: usize,
    pub cells: Vec<bool>,
}

impl BoolGrid {
    pub fn new(side: usize, value: bool) -> Self {
        BoolGrid {
            side,
            cells: vec![value; side * side],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.cells[row * self.side + col] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

impl Serialize for BoolGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[bool]> = self.cells.chunks(self.side.max(1)).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BoolGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows: Vec<Vec<bool>> = Vec::deserialize(d)?;
        let side = rows.len();
        if rows.iter().any(|r| r.len() != side) {
            return Err(serde::de::Error::custom("drivable_mask must be square"));
        }
        Ok(BoolGrid {
            side,
            cells: rows.into_iter().flatten().collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSegment {
    pub id: i64,
    pub centerline: Vec<Point>,
    #[serde(default)]
    pub pre: Vec<i64>,
    #[serde(default)]
    pub suc: Vec<i64>,
    #[serde(default)]
    pub left: Option<i64>,
    #[serde(default)]
    pub right: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub t: i64,
    pub x: f64,
    pub y: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: i64,
    pub is_target: bool,
    pub track: Vec<TrackSample>,
}

impl AgentTrack {
    pub fn last_valid(&self) -> Option<Point> {
        self.track.iter().rev().find(|s| s.valid).map(|s| [s.x, s.y])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuturePoint {
    pub t: i64,
    pub x: f64,
    pub y: f64,
}

/// Generator bookkeeping; absent in hand-written scenario files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub feasible_modes: Vec<String>,
    #[serde(default)]
    pub blocked_mode: Option<String>,
    /// Fine cells (row, col) removed from the drivable area by the generator.
    #[serde(default)]
    pub blocked_cells: Vec<[usize; 2]>,
    /// Drivable fine cells of each exit branch, keyed by mode label.
    #[serde(default)]
    pub branch_cells: std::collections::BTreeMap<String, Vec<[usize; 2]>>,
    /// Set when target-frame normalisation fell back to the identity rotation.
    #[serde(default)]
    pub degenerate_heading: bool,
}

fn default_resolution() -> f64 {
    1.0
}

fn default_grid_side() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    #[serde(default = "default_resolution")]
    pub resolution_m: f64,
    #[serde(default = "default_grid_side")]
    pub grid_side: usize,
    pub lanes: Vec<LaneSegment>,
    pub drivable_mask: BoolGrid,
    pub agents: Vec<AgentTrack>,
    #[serde(default)]
    pub gt_future: Option<Vec<FuturePoint>>,
    #[serde(default)]
    pub mode_label: Option<String>,
    /// Pose of the mask grid in scenario coordinates.
    #[serde(default)]
    pub grid_pose: Pose,
    #[serde(default)]
    pub meta: ScenarioMeta,
}

impl Scenario {
    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.grid_side, self.resolution_m)
    }

    pub fn target_index(&self) -> Option<usize> {
        self.agents.iter().position(|a| a.is_target)
    }

    pub fn target(&self) -> &AgentTrack {
        &self.agents[self.target_index().expect("scenario has no target agent")]
    }

    pub fn future_points(&self) -> Option<Vec<Point>> {
        self.gt_future.as_ref().map(|f| f.iter().map(|p| [p.x, p.y]).collect())
    }

    /// Check structural invariants; `history_len` is the expected track length.
    pub fn validate(&self, history_len: usize) -> Result<()> {
        let targets = self.agents.iter().filter(|a| a.is_target).count();
        if targets != 1 {
            return Err(Error::contract(format!(
                "scenario `{}` has {targets} target agents, expected exactly one",
                self.id
            )));
        }
        if self.resolution_m.is_nan() || self.resolution_m <= 0.0 || self.grid_side == 0 {
            return Err(Error::contract("grid_side and resolution_m must be positive"));
        }
        if self.drivable_mask.side != self.grid_side {
            return Err(Error::contract(format!(
                "drivable_mask is {0}x{0}, grid_side is {1}",
                self.drivable_mask.side, self.grid_side
            )));
        }
        let ids: std::collections::HashSet<i64> = self.lanes.iter().map(|l| l.id).collect();
        for lane in &self.lanes {
            let refs = lane
                .pre
                .iter()
                .chain(&lane.suc)
                .chain(lane.left.iter())
                .chain(lane.right.iter());
            for r in refs {
                if !ids.contains(r) {
                    return Err(Error::contract(format!("lane {} references unknown lane {r}", lane.id)));
                }
            }
        }
        for agent in &self.agents {
            if agent.track.len() != history_len {
                return Err(Error::contract(format!(
                    "agent {} has {} samples, expected {history_len}",
                    agent.id,
                    agent.track.len()
                )));
            }
            if agent.track.windows(2).any(|w| w[1].t <= w[0].t) {
                return Err(Error::contract(format!(
                    "agent {} timestamps are not strictly increasing",
                    agent.id
                )));
            }
        }
        Ok(())
    }

    /// Drivable mask with additional cells removed.
    pub fn mask_with_blocked(&self, blocked: &[(usize, usize)]) -> BoolGrid {
        let mut m = self.drivable_mask.clone();
        for &(r, c) in blocked {
            if r < m.side && c < m.side {
                m.set(r, c, false);
            }
        }
        m
    }
}

/// Arc length of a polyline.
pub fn polyline_length(pts: &[Point]) -> f64 {
    pts.windows(2).map(|w| dist(w[0], w[1])).sum()
}

pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Distance from `p` to segment `ab`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}
