//! Region-descriptor separation between object and background pixels.

use super::histogram::DEFAULT_EDGE_THRESHOLD;
use super::image_ops::sobel_magnitude;
use crate::error::{Error, Result};
use crate::synth::TileRecord;

/// Regions with fewer pixels than this are skipped.
pub const MIN_REGION_PIXELS: usize = 4;
const ENTROPY_BINS: usize = 16;

/// `(mean, std, edge density, entropy)` of one region.
pub type RegionFeatures = [f64; 4];

/// Features of the pixels where `select` is true; `None` for regions below
/// [`MIN_REGION_PIXELS`]. Entropy uses 16 intensity bins with the
/// Miller-Madow correction, since region sizes differ by an order of
/// magnitude between classes.
pub fn region_features(luma: &[u8], magnitude: &[f64], select: impl Fn(usize) -> bool) -> Option<RegionFeatures> {
    let idx: Vec<usize> = (0..luma.len()).filter(|&i| select(i)).collect();
    if idx.len() < MIN_REGION_PIXELS {
        return None;
    }
    let n = idx.len() as f64;
    let vals: Vec<f64> = idx.iter().map(|&i| luma[i] as f64 / 255.0).collect();
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let edges = idx.iter().filter(|&&i| magnitude[i] > DEFAULT_EDGE_THRESHOLD).count() as f64 / n;
    let mut hist = [0usize; ENTROPY_BINS];
    for &i in &idx {
        hist[luma[i] as usize * ENTROPY_BINS / 256] += 1;
    }
    let occupied = hist.iter().filter(|&&c| c > 0).count() as f64;
    let entropy = super::histogram::entropy_bits(&hist, idx.len())
        + (occupied - 1.0) / (2.0 * n * std::f64::consts::LN_2);
    Some([mean, std, edges, entropy])
}

/// Object and background descriptors for every tile with both regions
/// large enough.
pub fn tile_region_features(tiles: &[TileRecord]) -> Vec<(RegionFeatures, RegionFeatures)> {
    use rayon::prelude::*;
    tiles
        .par_iter()
        .filter_map(|t| {
            let luma = t.image.luma();
            let mag = sobel_magnitude(&t.image.gray());
            let obj = region_features(&luma, &mag, |i| t.mask.data[i] == 1)?;
            let bg = region_features(&luma, &mag, |i| t.mask.data[i] == 0)?;
            Some((obj, bg))
        })
        .collect()
}

/// `|mu_obj - mu_bg| / sqrt((tr S_obj + tr S_bg) / 2)` over region
/// descriptors z-scored on the pooled set. Features constant over the
/// pooled set are dropped. A perfectly separated corpus with zero spread
/// gives infinity.
pub fn feature_contrast_snr(tiles: &[TileRecord]) -> Result<f64> {
    let pairs = tile_region_features(tiles);
    if pairs.is_empty() {
        return Err(Error::invalid(
            "no tile contains both classes with enough pixels to compare",
        ));
    }
    Ok(snr_from_features(&pairs))
}

pub fn snr_from_features(pairs: &[(RegionFeatures, RegionFeatures)]) -> f64 {
    let n = pairs.len() as f64;
    let (mut delta2, mut trace) = (0.0, 0.0);
    for f in 0..4 {
        let obj: Vec<f64> = pairs.iter().map(|p| p.0[f]).collect();
        let bg: Vec<f64> = pairs.iter().map(|p| p.1[f]).collect();
        let pooled_mean = (obj.iter().sum::<f64>() + bg.iter().sum::<f64>()) / (2.0 * n);
        let pooled_var = obj.iter().chain(&bg).map(|v| (v - pooled_mean).powi(2)).sum::<f64>() / (2.0 * n);
        if pooled_var <= 1e-24 {
            continue;
        }
        let sd = pooled_var.sqrt();
        let z = |v: &[f64]| -> (f64, f64) {
            let m = v.iter().map(|x| (x - pooled_mean) / sd).sum::<f64>() / n;
            let var = v.iter().map(|x| ((x - pooled_mean) / sd - m).powi(2)).sum::<f64>() / n;
            (m, var)
        };
        let (mo, vo) = z(&obj);
        let (mb, vb) = z(&bg);
        delta2 += (mo - mb).powi(2);
        trace += 0.5 * (vo + vb);
    }
    match (delta2 > 0.0, trace > 0.0) {
        (_, true) => delta2.sqrt() / trace.sqrt(),
        (true, false) => f64::INFINITY,
        (false, false) => 0.0,
    }
}
