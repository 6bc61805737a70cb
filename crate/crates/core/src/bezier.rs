//! Bernstein basis, Bézier evaluation, constant-speed time parameterisation of
//! plan polylines and least-squares control-point fitting.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{dist, Point};

pub const DEFAULT_DEGREE: usize = 5;

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// `C(n,i) t^i (1-t)^(n-i)`.
pub fn bernstein(i: usize, n: usize, t: f64) -> Result<f64> {
    if i > n || !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("bernstein({i}, {n}, {t}) out of range")));
    }
    Ok(binomial(n, i) * t.powi(i as i32) * (1.0 - t).powi((n - i) as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BezierCurve {
    pub degree: usize,
    pub control: Vec<Point>,
}

impl BezierCurve {
    pub fn new(control: Vec<Point>) -> Result<Self> {
        if control.is_empty() || control.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::contract("a Bézier curve needs finite control points"));
        }
        Ok(BezierCurve {
            degree: control.len() - 1,
            control,
        })
    }

    pub fn translated(&self, d: Point) -> Self {
        BezierCurve {
            degree: self.degree,
            control: self.control.iter().map(|p| [p[0] + d[0], p[1] + d[1]]).collect(),
        }
    }
}

/// De Casteljau evaluation.
pub fn bezier_eval(curve: &BezierCurve, t: f64) -> Result<Point> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("curve parameter {t} outside [0, 1]")));
    }
    let mut pts = curve.control.clone();
    for k in (1..pts.len()).rev() {
        for i in 0..k {
            pts[i] = [
                (1.0 - t) * pts[i][0] + t * pts[i + 1][0],
                (1.0 - t) * pts[i][1] + t * pts[i + 1][1],
            ];
        }
    }
    Ok(pts[0])
}

/// Direct Bernstein-sum evaluation (reference for `bezier_eval`).
pub fn bernstein_eval(curve: &BezierCurve, t: f64) -> Result<Point> {
    let mut out = [0.0, 0.0];
    for (i, p) in curve.control.iter().enumerate() {
        let b = bernstein(i, curve.degree, t)?;
        out[0] += b * p[0];
        out[1] += b * p[1];
    }
    Ok(out)
}

/// Positions at `t = s / t_f` for `s = 1..=t_f`.
pub fn sample_at_timestamps(curve: &BezierCurve, t_f: usize) -> Vec<Point> {
    (1..=t_f)
        .map(|s| bezier_eval(curve, s as f64 / t_f as f64).expect("parameter in range"))
        .collect()
}

/// Point at arc length `s` along a polyline (clamped to its ends).
pub fn point_at_arclength(pts: &[Point], s: f64) -> Point {
    let mut remaining = s.max(0.0);
    for w in pts.windows(2) {
        let len = dist(w[0], w[1]);
        if remaining <= len && len > 0.0 {
            let f = remaining / len;
            return [w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])];
        }
        remaining -= len;
    }
    *pts.last().expect("non-empty polyline")
}

/// Walk the polyline at constant speed `v0`; step `k` (1-based) sits at arc
/// length `min(k·v0·dt, total)`.
pub fn time_parameterize(waypoints: &[Point], v0: f64, t_f: usize, dt: f64) -> Result<Vec<Point>> {
    if waypoints.is_empty() {
        return Err(Error::contract("cannot time-parameterise an empty polyline"));
    }
    if v0 < 0.0 || !v0.is_finite() {
        return Err(Error::contract(format!("speed {v0} must be finite and non-negative")));
    }
    Ok((1..=t_f)
        .map(|k| point_at_arclength(waypoints, k as f64 * v0 * dt))
        .collect())
}

/// Least-squares control points for samples taken at `t_s = s / t_f`,
/// `s = 1..=t_f`. Returns the curve and the RMS residual.
pub fn fit_control_points(points: &[Point], n: usize) -> Result<(BezierCurve, f64)> {
    let t_f = points.len();
    let params: Vec<f64> = (1..=t_f).map(|s| s as f64 / t_f as f64).collect();
    fit_at_parameters(&params, points, n)
}

pub fn fit_at_parameters(params: &[f64], points: &[Point], n: usize) -> Result<(BezierCurve, f64)> {
    if params.len() != points.len() {
        return Err(Error::contract("one parameter per point required"));
    }
    let m = points.len();
    let a = DMatrix::from_fn(m, n + 1, |r, c| bernstein(c, n, params[r]).unwrap_or(f64::NAN));
    if a.iter().any(|v| v.is_nan()) {
        return Err(Error::contract("curve parameters must lie in [0, 1]"));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > smax * 1e-10).count();
    if rank < n + 1 {
        return Err(Error::contract(format!(
            "design matrix has rank {rank} < {}: too few distinct parameters",
            n + 1
        )));
    }
    let b = DMatrix::from_fn(m, 2, |r, c| points[r][c]);
    let x = svd
        .solve(&b, smax * 1e-12)
        .map_err(|e| Error::contract(format!("least-squares solve failed: {e}")))?;
    let resid = &a * &x - &b;
    let rms = (resid.norm_squared() / m as f64).sqrt();
    let control = (0..=n).map(|i| [x[(i, 0)], x[(i, 1)]]).collect();
    Ok((BezierCurve::new(control)?, rms))
}

/// Curve fitted to `positions` and resampled at the same timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryProposal {
    pub positions: Vec<Point>,
    pub curve: BezierCurve,
    pub cluster: usize,
}

pub fn proposal_from_positions(positions: &[Point], n: usize, cluster: usize) -> Result<TrajectoryProposal> {
    let (curve, _) = fit_control_points(positions, n)?;
    Ok(TrajectoryProposal {
        positions: sample_at_timestamps(&curve, positions.len()),
        curve,
        cluster,
    })
}
