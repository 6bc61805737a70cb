//! Layered SVG of a target-frame scene and, optionally, a prediction.

use std::fmt::Write;

use crate::api::PredictPayload;
use crate::scene::{Point, Scenario};

pub const LAYERS: [&str; 5] = ["lanes", "drivable", "reward", "plans", "predictions"];

const PX_PER_M: f64 = 10.0;
const MODE_COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct View {
    half: f64,
}

impl View {
    fn x(&self, p: Point) -> f64 {
        (p[0] + self.half) * PX_PER_M
    }

    // SVG y grows downwards, scene y is north.
    fn y(&self, p: Point) -> f64 {
        (self.half - p[1]) * PX_PER_M
    }

    fn points(&self, pts: &[Point]) -> String {
        pts.iter()
            .map(|&p| format!("{:.2},{:.2}", self.x(p), self.y(p)))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn path(&self, pts: &[Point]) -> String {
        let mut d = String::new();
        for (i, &p) in pts.iter().enumerate() {
            let _ = write!(
                d,
                "{}{:.2},{:.2}",
                if i == 0 { "M" } else { " L" },
                self.x(p),
                self.y(p)
            );
        }
        d
    }
}

/// `scene` must already be in the target frame (the frame the prediction was
/// made in); `blocked` are extra undrivable cells of its grid.
pub fn render_svg(scene: &Scenario, blocked: &[[usize; 2]], pred: Option<&PredictPayload>) -> String {
    let grid = scene.grid();
    let v = View {
        half: grid.half_extent(),
    };
    let size = grid.side as f64 * grid.resolution * PX_PER_M;
    let cell = grid.resolution * PX_PER_M;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0}" height="{size:.0}" viewBox="0 0 {size:.0} {size:.0}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);

    let _ = writeln!(s, r#"<g id="drivable">"#);
    for r in 0..grid.side {
        for c in 0..grid.side {
            let is_blocked = blocked.contains(&[r, c]);
            if !scene.drivable_mask.get(r, c) && !is_blocked {
                continue;
            }
            let ctr = grid.cell_center(r, c);
            let fill = if is_blocked { "#f4a6a6" } else { "#e4e4e4" };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{fill}"{}/>"#,
                v.x(ctr) - cell / 2.0,
                v.y(ctr) - cell / 2.0,
                if is_blocked { r#" class="blocked""# } else { "" }
            );
        }
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="reward">"#);
    if let Some(p) = pred {
        let coarse = grid.coarsen(grid.side / p.reward.len().max(1));
        let all = p.reward.iter().flatten().copied();
        let lo = all.clone().fold(f64::INFINITY, f64::min);
        let hi = all.fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let cc = coarse.resolution * PX_PER_M;
        for (row, vals) in p.reward.iter().enumerate() {
            for (col, &r) in vals.iter().enumerate() {
                let ctr = coarse.cell_center(row, col);
                let _ = writeln!(
                    s,
                    r##"<rect x="{:.2}" y="{:.2}" width="{cc:.2}" height="{cc:.2}" fill="#3060c0" fill-opacity="{:.3}"/>"##,
                    v.x(ctr) - cc / 2.0,
                    v.y(ctr) - cc / 2.0,
                    0.6 * (r - lo) / span
                );
            }
        }
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r##"<g id="lanes" fill="none" stroke="#808080" stroke-width="1">"##);
    for lane in &scene.lanes {
        let _ = writeln!(s, r#"<path d="{}"/>"#, v.path(&lane.centerline));
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(
        s,
        r##"<g id="plans" fill="none" stroke="#202020" stroke-opacity="0.08" stroke-width="1">"##
    );
    if let Some(p) = pred {
        let coarse = grid.coarsen(grid.side / p.reward.len().max(1));
        for plan in &p.plans {
            let pts: Vec<Point> = plan.cells.iter().map(|&[r, c]| coarse.cell_center(r, c)).collect();
            let _ = writeln!(s, r#"<path d="{}"/>"#, v.path(&pts));
        }
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="predictions" fill="none" stroke-width="2">"#);
    let history: Vec<Point> = scene
        .target()
        .track
        .iter()
        .filter(|t| t.valid)
        .map(|t| [t.x, t.y])
        .collect();
    let _ = writeln!(
        s,
        r##"<path class="history" stroke="#000000" d="{}"/>"##,
        v.path(&history)
    );
    if let Some(p) = pred {
        for (k, (traj, prob)) in p.trajectories.iter().zip(&p.probabilities).enumerate() {
            let color = MODE_COLORS[k % MODE_COLORS.len()];
            let _ = writeln!(
                s,
                r#"<polyline data-mode="{k}" data-probability="{prob}" stroke="{color}" points="{}"/>"#,
                v.points(traj)
            );
            if let Some(&end) = traj.last() {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.2}" font-size="10" fill="{color}" stroke="none">{prob:.2}</text>"#,
                    v.x(end) + 3.0,
                    v.y(end) - 3.0
                );
            }
        }
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api::PredictRequest;
    use crate::model::{predict, prepare, ModelConfig, SampleOptions};
    use crate::nn::Widths;
    use crate::scene::{generate_scenario, GeneratorParams, ScenarioKind};

    #[test]
    fn layers_and_polylines() {
        let cfg = ModelConfig {
            widths: Widths {
                lane: 4,
                drivable: 4,
                agent: 4,
                coarse: 4,
            },
            ..Default::default()
        };
        let s = generate_scenario(ScenarioKind::Crossing, &GeneratorParams::default(), 2).unwrap();
        let prep = prepare(&s, &[], &cfg).unwrap();
        let opts = SampleOptions {
            num_plans: 80,
            ..Default::default()
        };
        let pred = predict(
            &cfg.init_stage1(0),
            Some(&cfg.init_stage2(0)),
            &prep,
            &cfg,
            &opts,
            false,
        )
        .unwrap();
        let req = PredictRequest {
            l: 80,
            ..Default::default()
        };
        let pred = PredictPayload::new(&pred, &prep, &req, true, 0.0);
        let svg = render_svg(prep.scenario(), &prep.blocked, Some(&pred));
        for l in LAYERS {
            assert_eq!(svg.matches(&format!(r#"<g id="{l}""#)).count(), 1, "{l}");
        }
        assert_eq!(svg.matches("<polyline").count(), pred.trajectories.len());
        let total: f64 = svg
            .split(r#"data-probability=""#)
            .skip(1)
            .map(|t| t[..t.find('"').unwrap()].parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(svg, render_svg(prep.scenario(), &prep.blocked, Some(&pred)));
    }
}
