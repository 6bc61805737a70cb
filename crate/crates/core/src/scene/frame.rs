use super::{AgentTrack, BoolGrid, GridSpec, Point, Pose, Scenario};
use crate::error::{Error, Result};

/// Result of target-frame normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub scenario: Scenario,
    /// Pose of the target (scenario coordinates) that was mapped to the origin.
    pub target_pose: Pose,
    /// The history had no displacement; identity rotation was used.
    pub degenerate_heading: bool,
    /// Per normalised cell, the source cell of the original mask it was read from.
    pub cell_source: Vec<Option<(usize, usize)>>,
}

impl Normalized {
    /// Normalised cells whose source is one of `cells` (original grid), sorted.
    pub fn remap_cells(&self, cells: &[[usize; 2]]) -> Vec<[usize; 2]> {
        remap_through(&self.cell_source, self.scenario.grid(), cells)
    }
}

fn remap_through(remap: &[Option<(usize, usize)>], grid: GridSpec, cells: &[[usize; 2]]) -> Vec<[usize; 2]> {
    let wanted: std::collections::HashSet<(usize, usize)> = cells.iter().map(|&[r, c]| (r, c)).collect();
    let mut v: Vec<[usize; 2]> = remap
        .iter()
        .enumerate()
        .filter(|(_, src)| src.is_some_and(|rc| wanted.contains(&rc)))
        .map(|(i, _)| {
            let (r, c) = grid.row_col(i);
            [r, c]
        })
        .collect();
    v.sort_unstable();
    v
}

/// Current pose of an agent: last valid position, heading from the first to the
/// last valid sample. Returns `None` without any valid sample; the flag is set
/// when the displacement is zero and the heading defaults to 0.
pub fn estimate_pose(track: &AgentTrack) -> Option<(Pose, bool)> {
    let first = track.track.iter().find(|s| s.valid)?;
    let last = track.track.iter().rev().find(|s| s.valid)?;
    let (dx, dy) = (last.x - first.x, last.y - first.y);
    let degenerate = dx.hypot(dy) < 1e-9;
    let heading = if degenerate { 0.0 } else { dy.atan2(dx) };
    Some((
        Pose {
            x: last.x,
            y: last.y,
            heading,
        },
        degenerate,
    ))
}

/// Rigidly move the scenario so the target sits at the origin facing `+x`.
///
/// Vector data is transformed exactly; the drivable mask is resampled by
/// nearest cell from its previous grid pose.
pub fn to_target_frame(s: &Scenario) -> Result<Normalized> {
    let target = s
        .agents
        .iter()
        .find(|a| a.is_target)
        .ok_or_else(|| Error::contract("scenario has no target agent"))?;
    let (pose, degenerate) =
        estimate_pose(target).ok_or_else(|| Error::contract("target agent has no valid observation"))?;
    // A degenerate heading keeps the scenario's own orientation.
    let pose = if degenerate {
        Pose { heading: 0.0, ..pose }
    } else {
        pose
    };

    let map = |p: Point| pose.to_local(p);
    let mut out = s.clone();
    for lane in &mut out.lanes {
        for p in &mut lane.centerline {
            *p = map(*p);
        }
    }
    for agent in &mut out.agents {
        for smp in &mut agent.track {
            let [x, y] = map([smp.x, smp.y]);
            smp.x = x;
            smp.y = y;
        }
    }
    if let Some(f) = &mut out.gt_future {
        for fp in f.iter_mut() {
            let [x, y] = map([fp.x, fp.y]);
            fp.x = x;
            fp.y = y;
        }
    }
    // Target's last position must land exactly on the origin.
    if let Some(ti) = out.target_index() {
        if let Some(smp) = out.agents[ti].track.iter_mut().rev().find(|s| s.valid) {
            smp.x = 0.0;
            smp.y = 0.0;
        }
    }

    let grid = s.grid();
    let (mask, remap) = resample_mask(&s.drivable_mask, grid, &s.grid_pose, &pose);
    out.drivable_mask = mask;
    let remap_cells = |cells: &[[usize; 2]]| remap_through(&remap, grid, cells);
    out.meta.blocked_cells = remap_cells(&s.meta.blocked_cells);
    out.meta.branch_cells = s
        .meta
        .branch_cells
        .iter()
        .map(|(k, v)| (k.clone(), remap_cells(v)))
        .collect();
    out.grid_pose = Pose::default();
    out.meta.degenerate_heading = degenerate;
    Ok(Normalized {
        scenario: out,
        target_pose: pose,
        degenerate_heading: degenerate,
        cell_source: remap,
    })
}

/// Resample a mask defined on `old_pose` onto a grid at `new_pose`.
/// Returns the mask and, per new cell, the source cell it was read from.
fn resample_mask(
    mask: &BoolGrid,
    grid: GridSpec,
    old_pose: &Pose,
    new_pose: &Pose,
) -> (BoolGrid, Vec<Option<(usize, usize)>>) {
    let mut out = BoolGrid::new(grid.side, false);
    let mut remap = vec![None; grid.num_cells()];
    for r in 0..grid.side {
        for c in 0..grid.side {
            let world = new_pose.to_parent(grid.cell_center(r, c));
            let old_local = old_pose.to_local(world);
            if let Some((sr, sc)) = grid.cell_of(old_local) {
                out.set(r, c, mask.get(sr, sc));
                remap[grid.index(r, c)] = Some((sr, sc));
            }
        }
    }
    (out, remap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{dist, generate_scenario, GeneratorParams, ScenarioKind, TrackSample};

    fn straight_track(x0: f64, y0: f64, heading: f64) -> AgentTrack {
        let (s, c) = heading.sin_cos();
        AgentTrack {
            id: 0,
            is_target: true,
            track: (0..20)
                .map(|k| {
                    let back = (19 - k) as f64 * 0.5;
                    TrackSample {
                        t: k as i64 - 19,
                        x: x0 - c * back,
                        y: y0 - s * back,
                        valid: true,
                    }
                })
                .collect(),
        }
    }

    fn scenario_with(agent: AgentTrack) -> Scenario {
        Scenario {
            id: "t".into(),
            resolution_m: 1.0,
            grid_side: 50,
            lanes: vec![],
            drivable_mask: BoolGrid::new(50, true),
            agents: vec![agent],
            gt_future: Some(vec![super::super::FuturePoint { t: 1, x: 13.0, y: 5.0 }]),
            mode_label: None,
            grid_pose: Pose::default(),
            meta: Default::default(),
        }
    }

    #[test]
    fn translation_only_case() {
        let s = scenario_with(straight_track(10.0, 5.0, 0.0));
        let n = to_target_frame(&s).unwrap();
        let t = n.scenario.target();
        assert_eq!(t.last_valid(), Some([0.0, 0.0]));
        let f = n.scenario.future_points().unwrap();
        assert!((f[0][0] - 3.0).abs() < 1e-12 && f[0][1].abs() < 1e-12);
        assert!(!n.degenerate_heading);
    }

    #[test]
    fn stationary_history_flags_degenerate_heading() {
        let mut a = straight_track(4.0, 4.0, 0.0);
        for s in &mut a.track {
            s.x = 4.0;
            s.y = 4.0;
        }
        let n = to_target_frame(&scenario_with(a)).unwrap();
        assert!(n.degenerate_heading);
        assert!(n.scenario.meta.degenerate_heading);
    }

    #[test]
    fn normalisation_is_idempotent_and_isometric() {
        let s = generate_scenario(ScenarioKind::TJunction, &GeneratorParams::default(), 11).unwrap();
        let once = to_target_frame(&s).unwrap().scenario;
        let twice = to_target_frame(&once).unwrap().scenario;
        assert_eq!(once.drivable_mask, twice.drivable_mask);
        for (a, b) in once.lanes.iter().zip(&twice.lanes) {
            for (p, q) in a.centerline.iter().zip(&b.centerline) {
                assert!(dist(*p, *q) < 1e-9);
            }
        }

        let collect = |sc: &Scenario| -> Vec<Point> {
            let mut pts: Vec<Point> = sc.lanes.iter().flat_map(|l| l.centerline.clone()).collect();
            pts.extend(sc.future_points().unwrap());
            pts.extend(sc.agents.iter().flat_map(|a| a.track.iter().map(|t| [t.x, t.y])));
            pts
        };
        let (a, b) = (collect(&s), collect(&once));
        for i in (0..a.len()).step_by(7) {
            for j in (0..a.len()).step_by(11) {
                assert!((dist(a[i], a[j]) - dist(b[i], b[j])).abs() < 1e-9);
            }
        }
    }
}
