//! Box-counting dimension of mask boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

pub const BOX_SCALES: [usize; 5] = [2, 4, 8, 16, 32];

/// Fits with a coefficient of determination below this are flagged.
pub const MIN_R_SQUARED: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractalFit {
    pub dimension: f64,
    pub r_squared: f64,
    /// `(box size, occupied boxes)` summed over all masks.
    pub counts: Vec<(usize, usize)>,
    pub flagged: bool,
}

/// Number of `s x s` grid boxes holding at least one of `points`.
pub fn box_count(points: &[(usize, usize)], width: usize, height: usize, s: usize) -> usize {
    let bw = width.div_ceil(s);
    let bh = height.div_ceil(s);
    let mut seen = vec![false; bw * bh];
    let mut n = 0;
    for &(x, y) in points {
        let b = (y / s) * bw + x / s;
        if !seen[b] {
            seen[b] = true;
            n += 1;
        }
    }
    n
}

/// Least-squares slope, intercept and R^2 of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

/// Box-counting dimension over the union of the masks' boundary pixels:
/// counts are summed over masks at each scale before the log-log fit.
pub fn fractal_dimension<'a>(masks: impl IntoIterator<Item = &'a Mask>) -> Result<FractalFit> {
    let mut totals = [0usize; BOX_SCALES.len()];
    for m in masks {
        let pts = m.boundary();
        if pts.is_empty() {
            continue;
        }
        for (t, &s) in totals.iter_mut().zip(&BOX_SCALES) {
            *t += box_count(&pts, m.width, m.height, s);
        }
    }
    if totals[0] == 0 {
        return Err(Error::Empty("no boundary pixels to box-count"));
    }
    let x: Vec<f64> = BOX_SCALES.iter().map(|&s| (s as f64).ln()).collect();
    let y: Vec<f64> = totals.iter().map(|&n| (n as f64).ln()).collect();
    let (slope, _, r2) = linear_fit(&x, &y);
    Ok(FractalFit {
        dimension: -slope,
        r_squared: r2,
        counts: BOX_SCALES.iter().copied().zip(totals).collect(),
        flagged: r2 < MIN_R_SQUARED,
    })
}
