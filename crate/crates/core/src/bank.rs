//! Per-class FIFO memory of unit-norm features and the reliability weight
//! derived from it.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::{dot, l2_normalize, norm, resize_plane_nearest, Tensor, MIN_NORM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub capacity: usize,
    pub feature_dim: usize,
    pub gamma: f64,
    pub per_batch_cap: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            capacity: 256,
            feature_dim: 16,
            gamma: 2.0,
            per_batch_cap: 64,
        }
    }
}

/// Where a stored vector came from: training step and flat pixel index at
/// feature resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub step: u64,
    pub pixel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    config: BankConfig,
    queues: Vec<VecDeque<Vec<f64>>>,
    provenance: Vec<VecDeque<Provenance>>,
    fill_count: Vec<u64>,
}

/// Admitted weak-view features grouped by pseudo-label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidFeatures {
    /// `per_class[c]` holds `(pixel index, feature)` pairs in pixel order.
    pub per_class: Vec<Vec<(usize, Vec<f64>)>>,
}

impl ValidFeatures {
    pub fn count(&self, class: usize) -> usize {
        self.per_class[class].len()
    }
}

impl PrototypeBank {
    pub fn new(num_classes: usize, config: BankConfig) -> Result<Self> {
        if config.capacity == 0 || config.feature_dim == 0 || config.per_batch_cap == 0 {
            return Err(Error::invalid(
                "bank capacity, feature dimension and per-batch cap must be positive",
            ));
        }
        if !(config.gamma > 0.0) {
            return Err(Error::invalid(format!("gamma {} must be positive", config.gamma)));
        }
        Ok(Self {
            config,
            queues: vec![VecDeque::new(); num_classes],
            provenance: vec![VecDeque::new(); num_classes],
            fill_count: vec![0; num_classes],
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.queues.len()
    }

    pub fn queue(&self, class: usize) -> &VecDeque<Vec<f64>> {
        &self.queues[class]
    }

    pub fn provenance(&self, class: usize) -> &VecDeque<Provenance> {
        &self.provenance[class]
    }

    pub fn len(&self, class: usize) -> usize {
        self.queues[class].len()
    }

    /// Total vectors ever pushed into `class`, evicted ones included.
    pub fn fill_count(&self, class: usize) -> u64 {
        self.fill_count[class]
    }

    /// Subsamples at most `per_batch_cap` vectors per class (uniformly,
    /// without replacement), normalizes them and appends them in pixel
    /// order, evicting the oldest entries beyond capacity. Near-zero vectors
    /// cannot be normalized and are skipped.
    pub fn enqueue(&mut self, valid: &ValidFeatures, step: u64, seed: u64) -> Result<()> {
        if valid.per_class.len() != self.num_classes() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.num_classes()],
                actual: vec![valid.per_class.len()],
            });
        }
        for candidates in &valid.per_class {
            if let Some((_, v)) = candidates.iter().find(|(_, v)| v.len() != self.config.feature_dim) {
                return Err(Error::ShapeMismatch {
                    expected: vec![self.config.feature_dim],
                    actual: vec![v.len()],
                });
            }
        }
        for (class, candidates) in valid.per_class.iter().enumerate() {
            let take = candidates.len().min(self.config.per_batch_cap);
            if take == 0 {
                continue;
            }
            let mut chosen: Vec<usize> = if take == candidates.len() {
                (0..take).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[class as u64]));
                index::sample(&mut rng, candidates.len(), take).into_vec()
            };
            chosen.sort_unstable();
            for i in chosen {
                let (pixel, v) = &candidates[i];
                if norm(v) <= MIN_NORM {
                    continue;
                }
                self.push(class, l2_normalize(v)?, Provenance { step, pixel: *pixel });
            }
        }
        Ok(())
    }

    fn push(&mut self, class: usize, unit: Vec<f64>, tag: Provenance) {
        let q = &mut self.queues[class];
        let p = &mut self.provenance[class];
        q.push_back(unit);
        p.push_back(tag);
        while q.len() > self.config.capacity {
            q.pop_front();
            p.pop_front();
        }
        self.fill_count[class] += 1;
    }

    /// `(max_k <v/|v|, Q_c,k>)^gamma` with negative similarity clamped to 0;
    /// an empty queue yields the neutral weight 1.
    pub fn reliability_weight(&self, v: &[f64], class: usize) -> Result<f64> {
        if class >= self.num_classes() {
            return Err(Error::ClassOutOfRange {
                class,
                num_classes: self.num_classes(),
            });
        }
        if v.len() != self.config.feature_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.feature_dim],
                actual: vec![v.len()],
            });
        }
        let unit = l2_normalize(v)?;
        let queue = &self.queues[class];
        if queue.is_empty() {
            return Ok(1.0);
        }
        let best = queue
            .iter()
            .map(|q| dot(&unit, q))
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(similarity_to_weight(best, self.config.gamma))
    }

    /// Reliability weights at feature resolution, `[N, 1, h, w]`.
    pub fn feature_weight_map(&self, v_weak: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (n, d, h, w) = v_weak.dims4()?;
        if labels.len() != n * h * w {
            return Err(Error::ShapeMismatch {
                expected: vec![n, h, w],
                actual: vec![labels.len()],
            });
        }
        let mut out = vec![0.0; n * h * w];
        let mut feature = vec![0.0; d];
        let data = v_weak.data();
        for b in 0..n {
            for p in 0..h * w {
                for (k, f) in feature.iter_mut().enumerate() {
                    *f = data[(b * d + k) * h * w + p];
                }
                let flat = b * h * w + p;
                out[flat] = if norm(&feature) <= MIN_NORM {
                    // an all-zero feature has no direction to compare
                    if self.queues[labels[flat]].is_empty() { 1.0 } else { 0.0 }
                } else {
                    self.reliability_weight(&feature, labels[flat])?
                };
            }
        }
        Tensor::new(vec![n, 1, h, w], out)
    }

    /// Reliability weights upsampled (nearest) to label resolution.
    pub fn weight_map(
        &self,
        v_weak: &Tensor,
        labels: &[usize],
        label_hw: (usize, usize),
    ) -> Result<Tensor> {
        let small = self.feature_weight_map(v_weak, labels)?;
        let (n, _, h, w) = small.dims4()?;
        let data = resize_plane_nearest(small.data(), n, (h, w), label_hw);
        Tensor::new(vec![n, 1, label_hw.0, label_hw.1], data)
    }

    /// Writes one CSV per class (`f0..f{d-1}`, insertion order) and returns
    /// the written paths.
    pub fn export(&self, dir: &Path, epoch: u64) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header: Vec<String> = (0..self.config.feature_dim).map(|k| format!("f{k}")).collect();
        let mut paths = Vec::with_capacity(self.num_classes());
        for (class, queue) in self.queues.iter().enumerate() {
            let path = dir.join(format!("bank_class{class}_epoch{epoch}.csv"));
            let mut writer = csv::Writer::from_path(&path)?;
            writer.write_record(&header)?;
            for v in queue {
                writer.write_record(v.iter().map(|x| x.to_string()))?;
            }
            writer.flush().map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }

    pub(crate) fn from_parts(
        config: BankConfig,
        entries: Vec<Vec<(Vec<f64>, Provenance)>>,
        fill_count: Vec<u64>,
    ) -> Result<Self> {
        let mut bank = Self::new(entries.len(), config)?;
        if fill_count.len() != entries.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![entries.len()],
                actual: vec![fill_count.len()],
            });
        }
        for (class, list) in entries.into_iter().enumerate() {
            if list.len() > config.capacity {
                return Err(Error::invalid(format!(
                    "class {class} holds {} vectors, capacity is {}",
                    list.len(),
                    config.capacity
                )));
            }
            for (v, tag) in list {
                if v.len() != config.feature_dim {
                    return Err(Error::ShapeMismatch {
                        expected: vec![config.feature_dim],
                        actual: vec![v.len()],
                    });
                }
                bank.queues[class].push_back(v);
                bank.provenance[class].push_back(tag);
            }
        }
        bank.fill_count = fill_count;
        Ok(bank)
    }
}

/// Clamps the similarity to `[0, 1]` and raises it to `gamma`.
pub fn similarity_to_weight(similarity: f64, gamma: f64) -> f64 {
    similarity.clamp(0.0, 1.0).powf(gamma)
}

/// Groups admitted feature vectors by pseudo-label. `labels` and `mask` are
/// at feature resolution, one entry per `(n, y, x)`.
pub fn collect_valid_features(
    v_weak: &Tensor,
    labels: &[usize],
    mask: &[bool],
    num_classes: usize,
) -> Result<ValidFeatures> {
    let (n, d, h, w) = v_weak.dims4()?;
    if labels.len() != n * h * w || mask.len() != n * h * w {
        return Err(Error::ShapeMismatch {
            expected: vec![n, h, w],
            actual: vec![labels.len(), mask.len()],
        });
    }
    let data = v_weak.data();
    let mut per_class = vec![Vec::new(); num_classes];
    for (flat, (&c, &m)) in labels.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if c >= num_classes {
            return Err(Error::ClassOutOfRange { class: c, num_classes });
        }
        let (b, p) = (flat / (h * w), flat % (h * w));
        let v = (0..d).map(|k| data[(b * d + k) * h * w + p]).collect();
        per_class[c].push((flat, v));
    }
    Ok(ValidFeatures { per_class })
}

/// Reads back a CSV written by [`PrototypeBank::export`].
pub fn read_bank_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::invalid(format!("{}: bad value {s:?}: {e}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}
