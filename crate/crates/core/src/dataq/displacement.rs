//! Distance from annotated boundaries to the nearest strong image edge.

use serde::{Deserialize, Serialize};

use super::image_ops::{distance_transform, otsu_threshold, sobel_magnitude};
use crate::error::{Error, Result};
use crate::raster::{GrayImage, Mask};
use crate::synth::TileRecord;

pub const DISPLACEMENT_CAP: f64 = 50.0;
pub const TOLERANCE_PX: f64 = 5.0;
/// One-pixel bins `[k, k + 1)` for `k < 50` plus a final bin at the cap.
pub const DISPLACEMENT_BINS: usize = 51;

#[derive(Clone, Debug, PartialEq)]
pub struct Displacement {
    /// One absolute distance per boundary pixel, capped.
    pub distances: Vec<f64>,
    /// Set when the image had no strong gradient at all.
    pub flagged: bool,
}

/// Strong pixels are those with Sobel magnitude above the Otsu threshold.
pub fn strong_edges(image: &GrayImage) -> Vec<bool> {
    let mag = sobel_magnitude(image);
    match otsu_threshold(&mag) {
        Some(t) => mag.iter().map(|&m| m > t).collect(),
        None => vec![false; mag.len()],
    }
}

pub fn boundary_displacement(image: &GrayImage, mask: &Mask) -> Result<Displacement> {
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::ShapeMismatch {
            expected: vec![image.height, image.width],
            actual: vec![mask.height, mask.width],
        });
    }
    let boundary = mask.boundary();
    if boundary.is_empty() {
        return Err(Error::Empty("mask has no boundary pixels"));
    }
    let strong = strong_edges(image);
    if !strong.iter().any(|&s| s) {
        return Ok(Displacement {
            distances: vec![DISPLACEMENT_CAP; boundary.len()],
            flagged: true,
        });
    }
    let dist = distance_transform(&strong, image.width, image.height);
    let distances = boundary
        .iter()
        .map(|&(x, y)| dist[y * image.width + x].min(DISPLACEMENT_CAP))
        .collect();
    Ok(Displacement { distances, flagged: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementSummary {
    /// Normalized mass per bin, see [`DISPLACEMENT_BINS`].
    pub histogram: Vec<f64>,
    pub within_tolerance: f64,
    pub median: f64,
    pub boundary_pixels: usize,
    pub flagged_tiles: usize,
}

impl DisplacementSummary {
    pub fn from_distances(distances: &[f64], flagged_tiles: usize) -> Result<Self> {
        if distances.is_empty() {
            return Err(Error::Empty("no boundary pixels"));
        }
        let mut hist = vec![0.0; DISPLACEMENT_BINS];
        for &d in distances {
            hist[displacement_bin(d)] += 1.0;
        }
        let n = distances.len() as f64;
        hist.iter_mut().for_each(|h| *h /= n);
        let mut sorted = distances.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        Ok(Self {
            histogram: hist,
            within_tolerance: distances.iter().filter(|&&d| d <= TOLERANCE_PX).count() as f64 / n,
            median,
            boundary_pixels: distances.len(),
            flagged_tiles,
        })
    }

    /// Empirical CDF evaluated at the upper edge of every bin. Accumulated
    /// in counts so the tail is exactly 1 and equal prefixes compare equal.
    pub fn cdf(&self) -> Vec<f64> {
        let n = self.boundary_pixels as f64;
        self.histogram
            .iter()
            .scan(0.0, |acc, h| {
                *acc += (h * n).round();
                Some(*acc / n)
            })
            .collect()
    }
}

pub fn displacement_bin(d: f64) -> usize {
    if d >= DISPLACEMENT_CAP {
        DISPLACEMENT_BINS - 1
    } else {
        (d.max(0.0).floor() as usize).min(DISPLACEMENT_BINS - 2)
    }
}

/// Pools boundary displacements over every tile that has a boundary.
pub fn corpus_displacement(tiles: &[TileRecord]) -> Result<DisplacementSummary> {
    use rayon::prelude::*;
    let per_tile: Vec<Displacement> = tiles
        .par_iter()
        .filter(|t| !t.mask.boundary().is_empty())
        .map(|t| boundary_displacement(&t.image.gray(), &t.mask))
        .collect::<Result<_>>()?;
    let flagged = per_tile.iter().filter(|d| d.flagged).count();
    let all: Vec<f64> = per_tile.into_iter().flat_map(|d| d.distances).collect();
    DisplacementSummary::from_distances(&all, flagged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(w: usize, edge: usize) -> GrayImage {
        GrayImage::from_fn(w, w, |x, _| if x >= edge { 0.9 } else { 0.1 })
    }

    #[test]
    fn aligned_edge_has_zero_median() {
        let d = boundary_displacement(&step(32, 16), &Mask::from_fn(32, 32, |x, _| x >= 16)).unwrap();
        let s = DisplacementSummary::from_distances(&d.distances, 0).unwrap();
        assert_eq!(s.median, 0.0);
        assert_eq!(s.within_tolerance, 1.0);
    }

    #[test]
    fn shifted_edge_has_median_three() {
        let d = boundary_displacement(&step(32, 16), &Mask::from_fn(32, 32, |x, _| x >= 19)).unwrap();
        let s = DisplacementSummary::from_distances(&d.distances, 0).unwrap();
        assert!((s.median - 3.0).abs() <= 1.0, "{}", s.median);
    }

    #[test]
    fn constant_image_is_capped_and_flagged() {
        let img = GrayImage::from_fn(16, 16, |_, _| 0.4);
        let d = boundary_displacement(&img, &Mask::from_fn(16, 16, |x, _| x >= 8)).unwrap();
        assert!(d.flagged);
        assert!(d.distances.iter().all(|&v| v == DISPLACEMENT_CAP));
        assert!(boundary_displacement(&img, &Mask::from_fn(16, 16, |_, _| false)).is_err());
    }

    #[test]
    fn bins_and_cdf() {
        assert_eq!(displacement_bin(0.0), 0);
        assert_eq!(displacement_bin(2.9), 2);
        assert_eq!(displacement_bin(49.99), 49);
        assert_eq!(displacement_bin(50.0), 50);
        let s = DisplacementSummary::from_distances(&[0.0, 1.0, 1.5, 50.0], 0).unwrap();
        assert!((s.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(s.cdf()[1], 0.75);
        assert_eq!(s.median, 1.25);

        // ten masses of 0.1 sum to 0.9999999999999999 in floating point
        let d: Vec<f64> = (0..10).map(f64::from).collect();
        let cdf = DisplacementSummary::from_distances(&d, 0).unwrap().cdf();
        assert_eq!(cdf[9], 1.0);
        assert_eq!(cdf[2], 0.3);
    }
}
