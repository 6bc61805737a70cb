//! Displacement metrics and the per-scenario report format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{dist, Point};

pub const MISS_THRESHOLD_M: f64 = 2.0;

fn check(predictions: &[Vec<Point>], gt: &[Point]) -> Result<()> {
    if predictions.is_empty() || gt.is_empty() {
        return Err(Error::contract(
            "metrics need at least one prediction and a non-empty ground truth",
        ));
    }
    if let Some(p) = predictions.iter().find(|p| p.len() != gt.len()) {
        return Err(Error::contract(format!(
            "prediction has {} points, ground truth {}",
            p.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn ade(pred: &[Point], gt: &[Point]) -> f64 {
    pred.iter().zip(gt).map(|(a, b)| dist(*a, *b)).sum::<f64>() / gt.len() as f64
}

pub fn fde(pred: &[Point], gt: &[Point]) -> f64 {
    dist(pred[pred.len() - 1], gt[gt.len() - 1])
}

pub fn min_ade(predictions: &[Vec<Point>], gt: &[Point]) -> Result<f64> {
    check(predictions, gt)?;
    Ok(predictions.iter().map(|p| ade(p, gt)).fold(f64::INFINITY, f64::min))
}

/// Minimum endpoint error and the index that attains it (lowest on ties).
pub fn best_fde(predictions: &[Vec<Point>], gt: &[Point]) -> Result<(usize, f64)> {
    check(predictions, gt)?;
    let mut best = (0, f64::INFINITY);
    for (k, p) in predictions.iter().enumerate() {
        let d = fde(p, gt);
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best)
}

pub fn min_fde(predictions: &[Vec<Point>], gt: &[Point]) -> Result<f64> {
    Ok(best_fde(predictions, gt)?.1)
}

/// 1 when every endpoint is farther than `threshold` from the ground truth.
pub fn miss_rate(predictions: &[Vec<Point>], gt: &[Point], threshold: f64) -> Result<f64> {
    Ok(if min_fde(predictions, gt)? > threshold {
        1.0
    } else {
        0.0
    })
}

/// `minFDE + (1 − P(best))²` with `best` the minFDE candidate.
pub fn brier_min_fde(predictions: &[Vec<Point>], probabilities: &[f64], gt: &[Point]) -> Result<f64> {
    if probabilities.len() != predictions.len() {
        return Err(Error::contract(format!(
            "{} probabilities for {} predictions",
            probabilities.len(),
            predictions.len()
        )));
    }
    let (k, d) = best_fde(predictions, gt)?;
    Ok(d + (1.0 - probabilities[k]).powi(2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario_id: String,
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub mr: f64,
    pub brier_min_fde: f64,
    pub p_best: f64,
    pub wall_ms: f64,
}

pub const METRIC_HEADER: &str = "scenario_id,K,minADE,minFDE,MR,brier_minFDE,P_best,wall_ms";

impl MetricRow {
    pub fn compute(id: &str, predictions: &[Vec<Point>], probabilities: &[f64], gt: &[Point]) -> Result<Self> {
        let (best, d) = best_fde(predictions, gt)?;
        Ok(MetricRow {
            scenario_id: id.to_string(),
            k: predictions.len(),
            min_ade: min_ade(predictions, gt)?,
            min_fde: d,
            mr: miss_rate(predictions, gt, MISS_THRESHOLD_M)?,
            brier_min_fde: brier_min_fde(predictions, probabilities, gt)?,
            p_best: probabilities[best],
            wall_ms: 0.0,
        })
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.scenario_id,
            self.k,
            self.min_ade,
            self.min_fde,
            self.mr,
            self.brier_min_fde,
            self.p_best,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: Option<MetricRow>,
    /// Scenarios without ground truth.
    pub skipped: usize,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>, skipped: usize) -> Self {
        let mean = (!rows.is_empty()).then(|| {
            let n = rows.len() as f64;
            let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
            MetricRow {
                scenario_id: "mean".into(),
                k: rows.iter().map(|r| r.k).max().unwrap_or(0),
                min_ade: avg(|r| r.min_ade),
                min_fde: avg(|r| r.min_fde),
                mr: avg(|r| r.mr),
                brier_min_fde: avg(|r| r.brier_min_fde),
                p_best: avg(|r| r.p_best),
                wall_ms: avg(|r| r.wall_ms),
            }
        });
        MetricReport { rows, mean, skipped }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRIC_HEADER);
        out.push('\n');
        for r in self.rows.iter().chain(&self.mean) {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(end: Point, n: usize) -> Vec<Point> {
        (1..=n)
            .map(|t| [end[0] * t as f64 / n as f64, end[1] * t as f64 / n as f64])
            .collect()
    }

    #[test]
    fn examples() {
        let gt = vec![[0.0, 0.0]; 3];
        let off: Vec<Point> = vec![[1.0, 0.0]; 3];
        assert_eq!(min_ade(std::slice::from_ref(&gt), &gt).unwrap(), 0.0);
        assert_eq!(min_ade(std::slice::from_ref(&off), &gt).unwrap(), 1.0);
        assert_eq!(min_fde(&[vec![[3.0, 4.0]]], &[[0.0, 0.0]]).unwrap(), 5.0);
        assert_eq!(
            min_fde(&[vec![[0.0, 0.0]], vec![[3.0, 4.0]]], &[[0.0, 0.0]]).unwrap(),
            0.0
        );
        assert_eq!(miss_rate(&[vec![[1.9, 0.0]]], &[[0.0, 0.0]], 2.0).unwrap(), 0.0);
        assert_eq!(miss_rate(&[vec![[2.1, 0.0]]], &[[0.0, 0.0]], 2.0).unwrap(), 1.0);
        let b = brier_min_fde(&[vec![[1.0, 0.0]], vec![[5.0, 0.0]]], &[0.6, 0.4], &[[0.0, 0.0]]).unwrap();
        assert!((b - 1.16).abs() < 1e-12);
        assert!(min_ade(&[line([1.0, 1.0], 3)], &line([1.0, 1.0], 4)).is_err());
    }

    #[test]
    fn corpus_mean_matches_rows() {
        let gt = line([10.0, 0.0], 5);
        let rows: Vec<MetricRow> = (0..4)
            .map(|i| MetricRow::compute(&format!("s{i}"), &[line([10.0, i as f64], 5)], &[1.0], &gt).unwrap())
            .collect();
        let direct = rows.iter().map(|r| r.min_fde).sum::<f64>() / 4.0;
        let rep = MetricReport::from_rows(rows, 0);
        assert!((rep.mean.as_ref().unwrap().min_fde - direct).abs() < 1e-12);
        assert_eq!(rep.to_csv().lines().count(), 6);
    }
}
