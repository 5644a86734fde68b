//! Corpus storage: 8-bit RGB tile PNGs, `{0, 255}` mask PNGs and a CSV
//! manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};
use crate::split::{Budget, Splits};
use crate::synth::{categorize_tile, Category, TileRecord};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: usize,
    pub path: String,
    pub mask_path: String,
    pub category: String,
    pub split: String,
    /// Labeled budgets containing the tile, `;`-separated.
    pub budgets_containing_as_labeled: String,
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    image::save_buffer(path, &img.data, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let data: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    image::save_buffer(path, &data, mask.width as u32, mask.height as u32, image::ExtendedColorType::L8)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    RgbImage::new(img.width() as usize, img.height() as usize, img.into_raw())
}

/// Reads a mask stored as `{0, 255}`; any other value is an error.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(Error::invalid(format!("{}: mask value {other} is not 0 or 255", path.display()))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(w, h, data)
}

/// Writes tiles, masks and `manifest.csv` under `dir`; returns the
/// manifest path. Paths in the manifest are relative to `dir`.
pub fn write_corpus(dir: &Path, tiles: &[TileRecord], splits: &Splits) -> Result<PathBuf> {
    for sub in ["tiles", "masks"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    for t in tiles {
        let path = format!("tiles/tile_{:05}.png", t.id);
        let mask_path = format!("masks/mask_{:05}.png", t.id);
        write_rgb_png(&dir.join(&path), &t.image)?;
        write_mask_png(&dir.join(&mask_path), &t.mask)?;
        let budgets: Vec<String> = splits.budgets_containing(t.id).iter().map(|b| b.to_string()).collect();
        w.serialize(ManifestRow {
            id: t.id,
            path,
            mask_path,
            category: t.category.as_str().to_string(),
            split: splits.split_of(t.id).to_string(),
            budgets_containing_as_labeled: budgets.join(";"),
        })?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join("manifest.csv");
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        ));
    }
    let mut r = csv::Reader::from_path(&path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Rebuilds the split assignment stored in the manifest. Labeled lists come
/// back in id order; selection order is not stored.
pub fn read_splits(dir: &Path) -> Result<Splits> {
    let rows = read_manifest(dir)?;
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        labeled: Default::default(),
    };
    let mut rows: Vec<_> = rows.iter().collect();
    rows.sort_by_key(|r| r.id);
    for row in rows {
        match row.split.as_str() {
            "train" => splits.train.push(row.id),
            "val" => splits.val.push(row.id),
            "test" => splits.test.push(row.id),
            other => return Err(Error::invalid(format!("tile {}: unknown split `{other}`", row.id))),
        }
        for b in row.budgets_containing_as_labeled.split(';').filter(|s| !s.is_empty()) {
            let f: f64 = b
                .parse()
                .map_err(|_| Error::invalid(format!("tile {}: bad budget `{b}`", row.id)))?;
            splits.labeled.entry(Budget::from_fraction(f)).or_default().push(row.id);
        }
    }
    Ok(splits)
}

/// Loads every tile listed in the manifest, in id order. The stored
/// category must agree with the mask.
pub fn read_corpus(dir: &Path) -> Result<Vec<TileRecord>> {
    let mut rows = read_manifest(dir)?;
    rows.sort_by_key(|r| r.id);
    rows.iter()
        .map(|row| {
            let image = read_rgb_png(&dir.join(&row.path))?;
            let mask = read_mask_png(&dir.join(&row.mask_path))?;
            let category = categorize_tile(&mask.data)?;
            if category != Category::parse(&row.category)? {
                return Err(Error::invalid(format!(
                    "tile {}: manifest says {}, mask is {}",
                    row.id,
                    row.category,
                    category.as_str()
                )));
            }
            Ok(TileRecord {
                id: row.id,
                image,
                mask,
                category,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::split::{make_splits, SplitProtocol};
    use crate::synth::{generate_corpus, SynthSpec};

    #[test]
    fn corpus_round_trip() {
        let tiles = generate_corpus(&SynthSpec { seed: 4, ..SynthSpec::default() }, 25).unwrap();
        let cats: Vec<_> = tiles.iter().map(|t| t.category).collect();
        let splits = make_splits(&cats, &SplitProtocol::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &tiles, &splits).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back, tiles);
        let rows = read_manifest(dir.path()).unwrap();
        assert_eq!(rows.len(), 25);
        assert_eq!(rows.iter().filter(|r| r.split == "test").count(), 5);
        let back = read_splits(dir.path()).unwrap();
        assert_eq!((&back.train, &back.val, &back.test), (&splits.train, &splits.val, &splits.test));
        for (b, ids) in &splits.labeled {
            let mut ids = ids.clone();
            ids.sort_unstable();
            assert_eq!(back.labeled[b], ids, "{b}");
        }
    }

    #[test]
    fn non_binary_mask_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        image::save_buffer(&p, &[0, 128, 255, 0], 2, 2, image::ExtendedColorType::L8).unwrap();
        assert!(read_mask_png(&p).is_err());
    }
}
