//! Edge density, grayscale entropy, binned histograms and the
//! Jensen-Shannon distance between them.

use serde::{Deserialize, Serialize};

use super::image_ops::{sobel_magnitude, SOBEL_MAX};
use crate::error::{Error, Result};
use crate::raster::GrayImage;

/// One tenth of the largest possible Sobel magnitude.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.1 * SOBEL_MAX;

/// Fraction of pixels whose Sobel magnitude exceeds `threshold`.
pub fn edge_density(img: &GrayImage, threshold: f64) -> f64 {
    let mag = sobel_magnitude(img);
    if mag.is_empty() {
        return 0.0;
    }
    mag.iter().filter(|&&m| m > threshold).count() as f64 / mag.len() as f64
}

/// Shannon entropy in bits of the 256-bin histogram of 8-bit values.
pub fn grayscale_entropy(values: &[u8]) -> f64 {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    entropy_bits(&hist, values.len())
}

pub(crate) fn entropy_bits(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    // -0.0 for a single occupied bin
    h.max(0.0)
}

/// Normalized histogram with uniform bins on `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub mass: Vec<f64>,
}

impl Histogram {
    /// Bins `values` into `bins` uniform bins over `[lo, hi]`; values outside
    /// the range go to the end bins. A degenerate range is widened by 0.5 on
    /// each side.
    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        if !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(Error::invalid(format!("bad histogram range [{lo}, {hi}]")));
        }
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let mut counts = vec![0.0; bins];
        for &v in values {
            let t = ((v - lo) / (hi - lo) * bins as f64).floor();
            let b = if t < 0.0 { 0 } else { (t as usize).min(bins - 1) };
            counts[b] += 1.0;
        }
        let total = values.len() as f64;
        if total > 0.0 {
            counts.iter_mut().for_each(|c| *c /= total);
        }
        Ok(Self { lo, hi, mass: counts })
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    /// Left edge of bin `i`.
    pub fn edge(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / self.bins() as f64
    }
}

/// Square root of the base-2 Jensen-Shannon divergence, in `[0, 1]`.
/// Inputs are normalized first.
pub fn jensen_shannon_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    let norm = |h: &[f64]| -> Result<Vec<f64>> {
        if let Some(i) = h.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite { index: i });
        }
        let s: f64 = h.iter().sum();
        if s <= 0.0 {
            return Err(Error::Empty("histogram has zero mass"));
        }
        Ok(h.iter().map(|v| v / s).collect())
    };
    let (p, q) = (norm(a)?, norm(b)?);
    let kl = |x: f64, m: f64| if x > 0.0 { x * (x / m).log2() } else { 0.0 };
    // each term is symmetric in (p, q), so the result is exactly symmetric
    let js: f64 = p
        .iter()
        .zip(&q)
        .map(|(&x, &y)| {
            let m = 0.5 * (x + y);
            0.5 * (kl(x, m) + kl(y, m))
        })
        .sum();
    Ok(js.max(0.0).sqrt().min(1.0))
}
