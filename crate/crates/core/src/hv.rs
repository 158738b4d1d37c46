//! Hypervolume of a set of loss points with respect to a reference point.
//!
//! Lower losses are better, so each point `p` dominates the box `[p, ref]`.
//! Coordinates beyond the reference are clipped to it and contribute nothing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest objective count handled by [`hypervolume_exact`].
pub const MAX_EXACT_DIMS: usize = 4;

/// Smallest sample count accepted by [`hypervolume_mc`].
pub const MIN_MC_SAMPLES: usize = 10_000;

fn clipped(points: &[Vec<f64>], reference: &[f64]) -> Result<Vec<Vec<f64>>> {
    if reference.is_empty() {
        return Err(Error::dim("reference point is empty"));
    }
    if let Some(r) = reference.iter().find(|r| !r.is_finite()) {
        return Err(Error::arg(format!("reference coordinate {r} is not finite")));
    }
    points
        .iter()
        .map(|p| {
            if p.len() != reference.len() {
                return Err(Error::dim(format!("point has {} coordinates, reference has {}", p.len(), reference.len())));
            }
            if p.iter().any(|v| v.is_nan()) {
                return Err(Error::arg("loss point contains NaN"));
            }
            Ok(p.iter().zip(reference).map(|(v, r)| v.min(*r)).collect())
        })
        .collect()
}

/// Exact hypervolume by recursive slicing along the last objective.
/// Supports up to [`MAX_EXACT_DIMS`] objectives.
pub fn hypervolume_exact(points: &[Vec<f64>], reference: &[f64]) -> Result<f64> {
    if reference.len() > MAX_EXACT_DIMS {
        return Err(Error::Mode(format!(
            "exact hypervolume supports at most {MAX_EXACT_DIMS} objectives, got {}; use the Monte-Carlo estimate",
            reference.len()
        )));
    }
    let pts = clipped(points, reference)?;
    Ok(sweep(pts, reference))
}

fn sweep(mut pts: Vec<Vec<f64>>, reference: &[f64]) -> f64 {
    let n = reference.len();
    if pts.is_empty() {
        return 0.0;
    }
    if n == 1 {
        let best = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        return reference[0] - best;
    }
    let last = n - 1;
    pts.sort_by(|a, b| a[last].total_cmp(&b[last]));
    let mut total = 0.0;
    for i in 0..pts.len() {
        let upper = pts.get(i + 1).map_or(reference[last], |p| p[last]);
        let height = upper - pts[i][last];
        if height <= 0.0 {
            continue;
        }
        let projected: Vec<Vec<f64>> = pts[..=i].iter().map(|p| p[..last].to_vec()).collect();
        total += height * sweep(projected, &reference[..last]);
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub hv: f64,
    pub stderr: f64,
}

/// Monte-Carlo hypervolume: uniform samples in the box spanned by the
/// per-objective minimum over the points and the reference.
pub fn hypervolume_mc(points: &[Vec<f64>], reference: &[f64], samples: usize, rng: &mut impl Rng) -> Result<McEstimate> {
    if samples < MIN_MC_SAMPLES {
        return Err(Error::arg(format!("Monte-Carlo hypervolume needs at least {MIN_MC_SAMPLES} samples, got {samples}")));
    }
    let pts = clipped(points, reference)?;
    if pts.is_empty() {
        log::warn!("hypervolume of an empty point set is 0");
        return Ok(McEstimate { hv: 0.0, stderr: 0.0 });
    }
    let n = reference.len();
    let lower: Vec<f64> = (0..n).map(|d| pts.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min)).collect();
    let volume: f64 = lower.iter().zip(reference).map(|(l, r)| r - l).product();
    if volume <= 0.0 {
        return Ok(McEstimate { hv: 0.0, stderr: 0.0 });
    }
    let mut x = vec![0.0; n];
    let mut hits = 0usize;
    for _ in 0..samples {
        for (d, xd) in x.iter_mut().enumerate() {
            *xd = lower[d] + rng.random::<f64>() * (reference[d] - lower[d]);
        }
        if pts.iter().any(|p| p.iter().zip(&x).all(|(pv, xv)| pv <= xv)) {
            hits += 1;
        }
    }
    let f = hits as f64 / samples as f64;
    Ok(McEstimate { hv: f * volume, stderr: volume * (f * (1.0 - f) / samples as f64).sqrt() })
}
