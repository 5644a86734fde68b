//! Dataset-quality metrics: boundary complexity, feature contrast,
//! annotation-to-edge displacement, and edge-density / entropy
//! representativeness of a subset against its corpus.

pub mod contrast;
pub mod displacement;
pub mod fractal;
pub mod histogram;
pub mod image_ops;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::TileRecord;

pub use contrast::feature_contrast_snr;
pub use displacement::{boundary_displacement, corpus_displacement, DisplacementSummary};
pub use fractal::{fractal_dimension, FractalFit};
pub use histogram::{edge_density, grayscale_entropy, jensen_shannon_distance, Histogram};

pub const REPRESENTATIVENESS_BINS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileFeatures {
    pub tile_id: usize,
    pub entropy: f64,
    pub edge_density: f64,
}

pub fn tile_features(tiles: &[TileRecord]) -> Vec<TileFeatures> {
    use rayon::prelude::*;
    tiles
        .par_iter()
        .map(|t| TileFeatures {
            tile_id: t.id,
            entropy: grayscale_entropy(&t.image.luma()),
            edge_density: edge_density(&t.image.gray(), histogram::DEFAULT_EDGE_THRESHOLD),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Representativeness {
    pub full_edge_density: Histogram,
    pub subset_edge_density: Histogram,
    pub full_entropy: Histogram,
    pub subset_entropy: Histogram,
    pub jsd_edge: f64,
    pub jsd_entropy: f64,
    pub subset_size: usize,
    /// One row per tile of the full corpus.
    pub features: Vec<TileFeatures>,
}

/// Compares subset histograms against the full corpus on shared bins
/// spanning the full corpus's observed range. `subset` holds tile ids.
pub fn representativeness_report(full: &[TileRecord], subset: &[usize]) -> Result<Representativeness> {
    if full.is_empty() {
        return Err(Error::Empty("corpus has no tiles"));
    }
    let ids: HashSet<usize> = full.iter().map(|t| t.id).collect();
    if let Some(bad) = subset.iter().find(|id| !ids.contains(id)) {
        return Err(Error::invalid(format!("subset tile {bad} is not in the corpus")));
    }
    if subset.is_empty() {
        return Err(Error::Empty("subset has no tiles"));
    }
    let features = tile_features(full);
    let chosen: HashSet<usize> = subset.iter().copied().collect();
    let pick = |f: fn(&TileFeatures) -> f64, only_subset: bool| -> Vec<f64> {
        features
            .iter()
            .filter(|t| !only_subset || chosen.contains(&t.tile_id))
            .map(f)
            .collect()
    };
    let hists = |f: fn(&TileFeatures) -> f64| -> Result<(Histogram, Histogram)> {
        let all = pick(f, false);
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok((
            Histogram::build(&all, lo, hi, REPRESENTATIVENESS_BINS)?,
            Histogram::build(&pick(f, true), lo, hi, REPRESENTATIVENESS_BINS)?,
        ))
    };
    let (full_edge, sub_edge) = hists(|t| t.edge_density)?;
    let (full_ent, sub_ent) = hists(|t| t.entropy)?;
    Ok(Representativeness {
        jsd_edge: jensen_shannon_distance(&full_edge.mass, &sub_edge.mass)?,
        jsd_entropy: jensen_shannon_distance(&full_ent.mass, &sub_ent.mass)?,
        full_edge_density: full_edge,
        subset_edge_density: sub_edge,
        full_entropy: full_ent,
        subset_entropy: sub_ent,
        subset_size: chosen.len(),
        features,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub tiles: usize,
    pub category_counts: BTreeMap<String, usize>,
    pub fractal: Option<FractalFit>,
    pub snr: Option<f64>,
    pub displacement: Option<DisplacementSummary>,
    pub edge_density_histogram: Histogram,
    pub entropy_histogram: Histogram,
    pub subset_edge_density_histogram: Histogram,
    pub subset_entropy_histogram: Histogram,
    pub jsd_edge: f64,
    pub jsd_entropy: f64,
    pub subset_size: usize,
    /// Human-readable notes on metrics that could not be computed or are
    /// unreliable.
    pub flags: Vec<String>,
    #[serde(skip)]
    pub features: Vec<TileFeatures>,
}

/// Runs every metric over `tiles`; `subset` defaults to the whole corpus.
pub fn quality_report(tiles: &[TileRecord], subset: Option<&[usize]>) -> Result<QualityReport> {
    let all_ids: Vec<usize> = tiles.iter().map(|t| t.id).collect();
    let rep = representativeness_report(tiles, subset.unwrap_or(&all_ids))?;
    let mut flags = Vec::new();

    let fractal = match fractal_dimension(tiles.iter().map(|t| &t.mask)) {
        Ok(fit) => {
            if fit.flagged {
                flags.push(format!("fractal fit R^2 {:.3} below {}", fit.r_squared, fractal::MIN_R_SQUARED));
            }
            Some(fit)
        }
        Err(e) => {
            flags.push(format!("fractal dimension unavailable: {e}"));
            None
        }
    };
    let snr = match feature_contrast_snr(tiles) {
        Ok(v) => Some(v),
        Err(e) => {
            flags.push(format!("snr unavailable: {e}"));
            None
        }
    };
    let displacement = match corpus_displacement(tiles) {
        Ok(d) => {
            if d.flagged_tiles > 0 {
                flags.push(format!("{} tile(s) without strong gradients; displacement capped", d.flagged_tiles));
            }
            Some(d)
        }
        Err(e) => {
            flags.push(format!("displacement unavailable: {e}"));
            None
        }
    };
    let mut category_counts = BTreeMap::new();
    for t in tiles {
        *category_counts.entry(t.category.as_str().to_string()).or_insert(0) += 1;
    }
    Ok(QualityReport {
        tiles: tiles.len(),
        category_counts,
        fractal,
        snr,
        displacement,
        edge_density_histogram: rep.full_edge_density,
        entropy_histogram: rep.full_entropy,
        subset_edge_density_histogram: rep.subset_edge_density,
        subset_entropy_histogram: rep.subset_entropy,
        jsd_edge: rep.jsd_edge,
        jsd_entropy: rep.jsd_entropy,
        subset_size: rep.subset_size,
        flags,
        features: rep.features,
    })
}

impl QualityReport {
    /// Writes `report.json`, `features.csv` and one CSV per histogram into
    /// `dir`, returning the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();

        let report = dir.join("report.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&report, json + "\n").map_err(|e| Error::io(&report, e))?;
        written.push(report);

        let features = dir.join("features.csv");
        let mut w = csv::Writer::from_path(&features)?;
        for f in &self.features {
            w.serialize(f)?;
        }
        w.flush().map_err(|e| Error::io(&features, e))?;
        written.push(features);

        let mut hist_csv = |name: &str, rows: Vec<(f64, f64, f64)>| -> Result<()> {
            let path = dir.join(name);
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["bin_lo", "bin_hi", "mass"])?;
            for (lo, hi, m) in rows {
                w.write_record([lo.to_string(), hi.to_string(), m.to_string()])?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            written.push(path);
            Ok(())
        };
        let rows = |h: &Histogram| -> Vec<(f64, f64, f64)> {
            (0..h.bins()).map(|i| (h.edge(i), h.edge(i + 1), h.mass[i])).collect()
        };
        hist_csv("edge_density_histogram.csv", rows(&self.edge_density_histogram))?;
        hist_csv("entropy_histogram.csv", rows(&self.entropy_histogram))?;
        hist_csv("subset_edge_density_histogram.csv", rows(&self.subset_edge_density_histogram))?;
        hist_csv("subset_entropy_histogram.csv", rows(&self.subset_entropy_histogram))?;
        if let Some(d) = &self.displacement {
            let r = d
                .histogram
                .iter()
                .enumerate()
                .map(|(k, &m)| (k as f64, if k + 1 == d.histogram.len() { k as f64 } else { k as f64 + 1.0 }, m))
                .collect();
            hist_csv("displacement_histogram.csv", r)?;
        }
        Ok(written)
    }
}
