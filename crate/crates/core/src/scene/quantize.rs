use serde::{Deserialize, Serialize};

use super::{GridSpec, Point};
use crate::error::{Error, Result};

/// Coarse-grid state sequence derived from a ground-truth future.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    /// Row-major coarse cell indices.
    pub states: Vec<usize>,
    /// The future finished within the horizon (otherwise it was truncated).
    pub ended: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quantized {
    pub demo: Demonstration,
    /// Some position fell outside the grid and was clamped to the boundary.
    pub clamped: bool,
}

/// Map positions to cells, collapse repeats, bridge gaps with the shortest
/// 8-connected path (diagonal steps first) and truncate to `horizon` states.
pub fn quantize_future(gt: &[Point], grid: GridSpec, horizon: usize) -> Result<Quantized> {
    if gt.is_empty() {
        return Err(Error::contract("cannot quantize an empty future"));
    }
    if horizon == 0 {
        return Err(Error::contract("horizon must be positive"));
    }
    let mut clamped = false;
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for &p in gt {
        let (rc, was_clamped) = grid.clamped_cell_of(p);
        clamped |= was_clamped;
        let Some(&last) = cells.last() else {
            cells.push(rc);
            continue;
        };
        if last == rc {
            continue;
        }
        let (mut r, mut c) = (last.0 as i64, last.1 as i64);
        let (tr, tc) = (rc.0 as i64, rc.1 as i64);
        while (r, c) != (tr, tc) {
            r += (tr - r).signum();
            c += (tc - c).signum();
            cells.push((r as usize, c as usize));
        }
    }
    let ended = cells.len() <= horizon;
    cells.truncate(horizon);
    Ok(Quantized {
        demo: Demonstration {
            states: cells.iter().map(|&(r, c)| grid.index(r, c)).collect(),
            ended,
        },
        clamped,
    })
}

/// Demonstration starting at the target's current cell (the origin).
pub fn demonstration_from_future(future: &[Point], grid: GridSpec, horizon: usize) -> Result<Quantized> {
    let mut pts = Vec::with_capacity(future.len() + 1);
    pts.push([0.0, 0.0]);
    pts.extend_from_slice(future);
    quantize_future(&pts, grid, horizon)
}

/// Two cells are 8-connected neighbours (distinct, Chebyshev distance 1).
pub fn adjacent(grid: GridSpec, a: usize, b: usize) -> bool {
    let (ra, ca) = grid.row_col(a);
    let (rb, cb) = grid.row_col(b);
    a != b && ra.abs_diff(rb) <= 1 && ca.abs_diff(cb) <= 1
}
