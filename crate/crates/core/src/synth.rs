//! Seeded synthetic "settlement vs background" tiles.
//!
//! A tile is a textured background, optionally carrying one roughened blob
//! with its own texture and a brightness offset, or (rarely) entirely
//! covered by the object texture. Three knobs mirror the dataset-quality
//! axes: `contrast_gap` (feature contrast), `boundary_roughness` (boundary
//! complexity) and `label_jitter_px` (label-to-signal displacement).

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};
use crate::rng::{rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Slum,
    NonSlum,
    Mixed,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Slum, Category::NonSlum, Category::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Slum => "slum",
            Category::NonSlum => "non_slum",
            Category::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "slum" => Ok(Category::Slum),
            "non_slum" => Ok(Category::NonSlum),
            "mixed" => Ok(Category::Mixed),
            other => Err(Error::invalid(format!("unknown tile category {other:?}"))),
        }
    }
}

/// Slum iff every pixel is 1, NonSlum iff every pixel is 0, Mixed otherwise.
pub fn categorize_tile(mask: &[u8]) -> Result<Category> {
    if mask.is_empty() {
        return Err(Error::Empty("mask has no pixels"));
    }
    let mut ones = 0usize;
    for &v in mask {
        match v {
            0 => {}
            1 => ones += 1,
            other => return Err(Error::invalid(format!("mask value {other} is not binary"))),
        }
    }
    Ok(match ones {
        0 => Category::NonSlum,
        n if n == mask.len() => Category::Slum,
        _ => Category::Mixed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastLevel {
    Low,
    Medium,
    High,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub tile_size: usize,
    /// Expected fraction of object pixels over the corpus.
    pub slum_pixel_fraction: f64,
    /// Grating frequencies in cycles per pixel: `(object, background)`.
    pub texture_freq: (f64, f64),
    pub texture_amplitude: f64,
    /// Brightness offset of the object over the background.
    pub contrast_gap: f64,
    /// 0 gives a disc; larger values add harmonics to the outline.
    pub boundary_roughness: f64,
    /// Offset of the drawn label from the rendered object, in pixels.
    pub label_jitter_px: f64,
    /// Per-tile brightness variation (uniform half-width).
    pub illumination_spread: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::preset(ContrastLevel::Medium)
    }
}

impl SynthSpec {
    pub fn preset(level: ContrastLevel) -> Self {
        let (gap, freq) = match level {
            ContrastLevel::Low => (0.08, (0.30, 0.18)),
            ContrastLevel::Medium => (0.12, (0.33, 0.12)),
            ContrastLevel::High => (0.30, (0.35, 0.10)),
        };
        Self {
            tile_size: 32,
            slum_pixel_fraction: 0.08,
            texture_freq: freq,
            texture_amplitude: 0.08,
            contrast_gap: gap,
            boundary_roughness: 0.3,
            label_jitter_px: 0.0,
            illumination_spread: 0.1,
            noise_sd: 0.04,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slum_pixel_fraction > 0.0 && self.slum_pixel_fraction < 0.5) {
            return Err(Error::invalid(format!(
                "slum_pixel_fraction {} not in (0, 0.5)",
                self.slum_pixel_fraction
            )));
        }
        if self.tile_size < 4 || self.tile_size % 2 != 0 {
            return Err(Error::invalid(format!(
                "tile_size {} must be even and at least 4",
                self.tile_size
            )));
        }
        let finite_nonneg = [
            ("texture_amplitude", self.texture_amplitude),
            ("boundary_roughness", self.boundary_roughness),
            ("label_jitter_px", self.label_jitter_px),
            ("illumination_spread", self.illumination_spread),
            ("noise_sd", self.noise_sd),
            ("texture_freq.0", self.texture_freq.0),
            ("texture_freq.1", self.texture_freq.1),
        ];
        for (name, v) in finite_nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if !self.contrast_gap.is_finite() {
            return Err(Error::invalid("contrast_gap must be finite"));
        }
        Ok(())
    }

    /// `(P(all-object tile), P(blob tile), mean blob area fraction)`.
    fn tile_mix(&self) -> (f64, f64, f64) {
        let full = self.slum_pixel_fraction / 8.0;
        let rest = self.slum_pixel_fraction - full;
        let mut area = 0.25;
        let mut blob = rest / area;
        if blob > 0.9 {
            area = (rest / 0.9).min(0.6);
            blob = (rest / area).min(1.0);
        }
        (full, blob, area)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileRecord {
    pub id: usize,
    pub image: RgbImage,
    pub mask: Mask,
    pub category: Category,
}

/// Generates `n_tiles` tiles; tile `i` depends only on `(spec, i)`.
pub fn generate_corpus(spec: &SynthSpec, n_tiles: usize) -> Result<Vec<TileRecord>> {
    spec.validate()?;
    if n_tiles == 0 {
        return Err(Error::invalid("n_tiles must be at least 1"));
    }
    (0..n_tiles)
        .into_par_iter()
        .map(|id| generate_tile(spec, id))
        .collect()
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Blob {
    fn sample(spec: &SynthSpec, area_frac: f64, rng: &mut ChaCha8Rng) -> Self {
        let t = spec.tile_size as f64;
        let radius = (area_frac * t * t / PI).sqrt();
        let margin = (0.5 * radius).min(t / 2.0);
        let cx = rng.random_range(margin..=t - margin);
        let cy = rng.random_range(margin..=t - margin);
        let mut harmonics = Vec::new();
        if spec.boundary_roughness > 0.0 {
            // amplitudes fall off as k^-0.8; the fine harmonics make the
            // outline ragged at pixel scale
            let norm: f64 = (2..=24).map(|k| (k as f64).powf(-0.8)).sum();
            for k in 2..=24 {
                let amp = 0.6 * spec.boundary_roughness * (k as f64).powf(-0.8) / norm
                    * rng.random_range(0.5..=1.5);
                harmonics.push((k as f64, amp, rng.random_range(0.0..TAU)));
            }
        }
        Self {
            cx,
            cy,
            radius,
            harmonics,
        }
    }

    fn contains(&self, x: f64, y: f64, dx: f64, dy: f64) -> bool {
        let (px, py) = (x - self.cx - dx, y - self.cy - dy);
        let r = (px * px + py * py).sqrt();
        let theta = py.atan2(px);
        let wobble: f64 = self
            .harmonics
            .iter()
            .map(|&(k, a, phi)| a * (k * theta + phi).sin())
            .sum();
        r < self.radius * (1.0 + wobble).max(0.05)
    }
}

struct Grating {
    freq: f64,
    cos: f64,
    sin: f64,
    phase: f64,
    cross_phase: f64,
}

impl Grating {
    fn sample(freq: f64, rng: &mut ChaCha8Rng) -> Self {
        let theta = rng.random_range(0.0..PI);
        Self {
            freq,
            cos: theta.cos(),
            sin: theta.sin(),
            phase: rng.random_range(0.0..TAU),
            cross_phase: rng.random_range(0.0..TAU),
        }
    }

    /// Product of two orthogonal sinusoids, in `[-1, 1]`.
    fn at(&self, x: f64, y: f64) -> f64 {
        let u = x * self.cos + y * self.sin;
        let v = -x * self.sin + y * self.cos;
        (TAU * self.freq * u + self.phase).sin() * (TAU * self.freq * v + self.cross_phase).sin()
    }
}

pub fn generate_tile(spec: &SynthSpec, id: usize) -> Result<TileRecord> {
    let mut rng = rng_for(spec.seed, &[stream::CORPUS, id as u64]);
    let t = spec.tile_size;
    let (p_full, p_blob, mean_area) = spec.tile_mix();
    let u: f64 = rng.random();
    let kind = if u < p_full {
        TileKind::Full
    } else if u < p_full + p_blob {
        TileKind::Blob
    } else {
        TileKind::Empty
    };

    let illum = if spec.illumination_spread > 0.0 {
        rng.random_range(-spec.illumination_spread..=spec.illumination_spread)
    } else {
        0.0
    };
    let base = [0.45 + illum, 0.48 + illum, 0.40 + illum];
    let tint = [0.9, 0.6, 0.35];
    let bg_texture = Grating::sample(spec.texture_freq.1, &mut rng);
    let obj_texture = Grating::sample(spec.texture_freq.0, &mut rng);

    let (blob, jitter) = match kind {
        TileKind::Blob => {
            let area = mean_area * rng.random_range(0.6..=1.4);
            let blob = Blob::sample(spec, area, &mut rng);
            let angle = rng.random_range(0.0..TAU);
            let j = spec.label_jitter_px;
            (Some(blob), ((j * angle.cos()).round(), (j * angle.sin()).round()))
        }
        _ => (None, (0.0, 0.0)),
    };

    let inside = |x: f64, y: f64, dx: f64, dy: f64| match kind {
        TileKind::Full => true,
        TileKind::Empty => false,
        TileKind::Blob => blob.as_ref().expect("blob tile").contains(x, y, dx, dy),
    };

    let noise = Normal::new(0.0, spec.noise_sd.max(1e-12)).expect("positive sd");
    let mut pixels = Vec::with_capacity(t * t * 3);
    let mut labels = Vec::with_capacity(t * t);
    for y in 0..t {
        for x in 0..t {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let object = inside(fx, fy, 0.0, 0.0);
            labels.push(inside(fx, fy, jitter.0, jitter.1) as u8);
            let (texture, offset) = if object {
                (obj_texture.at(fx, fy), spec.contrast_gap)
            } else {
                (bg_texture.at(fx, fy), 0.0)
            };
            for c in 0..3 {
                let mut v = base[c] + offset * tint[c] + spec.texture_amplitude * texture;
                if spec.noise_sd > 0.0 {
                    v += noise.sample(&mut rng);
                }
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mask = Mask::new(t, t, labels)?;
    let category = categorize_tile(&mask.data)?;
    Ok(TileRecord {
        id,
        image: RgbImage::new(t, t, pixels)?,
        mask,
        category,
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TileKind {
    Full,
    Blob,
    Empty,
}
