//! JSON schema of the what-if service, shared by server and client.
//!
//! Grids are row-major nested arrays with `(row, col) = (north offset, east
//! offset)`. Mask edits address the scenario's own grid; prediction payloads
//! are expressed in the target frame (`target_pose` maps them back).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptor::RewardMaps;
use crate::model::{Prediction, Prepared};
use crate::sampler::Plan;
use crate::scene::{BoolGrid, GridSpec, Point, Pose};

pub const MAX_PAYLOAD_PLANS: usize = 50;
pub const GRID_LAYOUT: &str = "row-major; row = north offset, col = east offset";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioList {
    pub scenarios: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub scenario_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub scenario_id: String,
}

/// Cells are signed so that out-of-range requests can be reported verbatim.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskEdit {
    pub blocked_cells: Vec<[i64; 2]>,
    pub revert: Vec<[i64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub session_id: String,
    pub scenario_id: String,
    /// Current session edits, sorted.
    pub blocked_cells: Vec<[usize; 2]>,
    /// Requested cells that changed nothing (already undrivable, or not blocked when reverted).
    pub noop: Vec<[usize; 2]>,
    /// Effective drivable mask of the scenario grid.
    pub mask: BoolGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictRequest {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub seed: u64,
    /// Return every sampled plan instead of at most `MAX_PAYLOAD_PLANS`.
    pub full_plans: bool,
}

impl Default for PredictRequest {
    fn default() -> Self {
        PredictRequest {
            k: crate::sampler::DEFAULT_K,
            l: crate::sampler::DEFAULT_L,
            seed: 0,
            full_plans: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub fine_side: usize,
    pub fine_resolution: f64,
    pub coarse_side: usize,
    pub coarse_resolution: f64,
    pub layout: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanPath {
    /// Coarse cells `(row, col)`, starting at the target cell.
    pub cells: Vec<[usize; 2]>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictPayload {
    pub scenario_id: String,
    pub grid: GridInfo,
    pub target_pose: Pose,
    /// Transient reward per coarse cell.
    pub reward: Vec<Vec<f64>>,
    pub reward_terminal: Vec<Vec<f64>>,
    /// Expected state visitation per coarse cell.
    pub svf: Vec<Vec<f64>>,
    pub plans: Vec<PlanPath>,
    pub plans_total: usize,
    pub trajectories: Vec<Vec<Point>>,
    pub probabilities: Vec<f64>,
    pub p_cls: Vec<f64>,
    pub p_mcmc: Vec<f64>,
    /// False when no refinement checkpoint is loaded (probabilities are P_mcmc).
    pub refined: bool,
    /// Target-frame fine mask before session edits.
    pub drivable: BoolGrid,
    /// Session-blocked cells in the target-frame fine grid.
    pub blocked_cells: Vec<[usize; 2]>,
    pub vi_residual: f64,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic_id: Option<String>,
}

/// Indices (ascending) of at most `max` plans drawn without replacement with
/// probability proportional to `exp(log_prob)` (weighted reservoir keys).
pub fn decimate_plans(plans: &[Plan], max: usize, seed: u64) -> Vec<usize> {
    if plans.len() <= max {
        return (0..plans.len()).collect();
    }
    let top = plans.iter().map(|p| p.log_prob).fold(f64::NEG_INFINITY, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_decb);
    // key = ln(u) / w, largest keys win; w is the weight relative to the best plan.
    let mut keyed: Vec<(f64, usize)> = plans
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let w = (p.log_prob - top).exp().max(f64::MIN_POSITIVE);
            (u.ln() / w, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut idx: Vec<usize> = keyed[..max].iter().map(|k| k.1).collect();
    idx.sort_unstable();
    idx
}

fn rows(v: &[f64], side: usize) -> Vec<Vec<f64>> {
    RewardMaps::to_rows(v, side)
}

impl PredictPayload {
    pub fn new(pred: &Prediction, prep: &Prepared, req: &PredictRequest, refined: bool, timing_ms: f64) -> Self {
        let coarse = prep.coarse;
        let fine = prep.inputs.fine;
        let keep = if req.full_plans {
            (0..pred.plans.len()).collect()
        } else {
            decimate_plans(&pred.plans, MAX_PAYLOAD_PLANS, req.seed)
        };
        PredictPayload {
            scenario_id: pred.scenario_id.clone(),
            grid: GridInfo {
                fine_side: fine.side,
                fine_resolution: fine.resolution,
                coarse_side: coarse.side,
                coarse_resolution: coarse.resolution,
                layout: GRID_LAYOUT.into(),
            },
            target_pose: pred.target_pose,
            reward: rows(&pred.reward.r, coarse.side),
            reward_terminal: rows(&pred.reward.r_g, coarse.side),
            svf: rows(&pred.svf, coarse.side),
            plans: keep
                .into_iter()
                .map(|i| {
                    let p = &pred.plans[i];
                    PlanPath {
                        cells: p
                            .states
                            .iter()
                            .map(|&s| {
                                let (r, c) = coarse.row_col(s);
                                [r, c]
                            })
                            .collect(),
                        log_prob: p.log_prob,
                    }
                })
                .collect(),
            plans_total: pred.plans.len(),
            trajectories: pred.trajectories.clone(),
            probabilities: pred.probabilities.clone(),
            p_cls: pred.p_cls.clone(),
            p_mcmc: pred.p_mcmc.clone(),
            refined,
            drivable: prep.scenario().drivable_mask.clone(),
            blocked_cells: prep.blocked.clone(),
            vi_residual: pred.vi_residual,
            timing_ms,
        }
    }
}

/// Coarse cells that had drivable fine cells and lost all of them to `blocked`.
pub fn fully_blocked_coarse(drivable: &BoolGrid, blocked: &[[usize; 2]], fine: GridSpec, factor: usize) -> BoolGrid {
    let coarse_side = fine.side / factor;
    let mut out = BoolGrid::new(coarse_side, false);
    for r in 0..coarse_side {
        for c in 0..coarse_side {
            let mut any = false;
            let mut all = true;
            for dr in 0..factor {
                for dc in 0..factor {
                    let cell = [r * factor + dr, c * factor + dc];
                    if drivable.get(cell[0], cell[1]) {
                        any = true;
                        all &= blocked.contains(&cell);
                    }
                }
            }
            out.set(r, c, any && all);
        }
    }
    out
}

/// Fraction of plans that visit at least one cell flagged in `region`.
pub fn fraction_entering(plans: &[Vec<[usize; 2]>], region: &BoolGrid) -> f64 {
    if plans.is_empty() {
        return 0.0;
    }
    let hit = plans
        .iter()
        .filter(|p| p.iter().any(|&[r, c]| region.get(r, c)))
        .count();
    hit as f64 / plans.len() as f64
}

/// Total probability of trajectories whose endpoint falls in one of `cells`.
pub fn endpoint_mass(trajectories: &[Vec<Point>], probabilities: &[f64], cells: &[[usize; 2]], fine: GridSpec) -> f64 {
    trajectories
        .iter()
        .zip(probabilities)
        .filter(|(t, _)| {
            t.last()
                .and_then(|&p| fine.cell_of(p))
                .is_some_and(|(r, c)| cells.contains(&[r, c]))
        })
        .map(|(_, p)| p)
        .sum()
}
