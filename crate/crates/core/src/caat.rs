//! Class-aware adaptive thresholding.
//!
//! Each class keeps an EMA of the mean winning-class confidence observed on
//! the weak unlabeled views. The clipped EMA is the per-class admission
//! threshold for pseudo-labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax_classes, split_axis, Kind, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.999;
pub const DEFAULT_TAU_MIN: f64 = 0.6;
pub const DEFAULT_TAU_MAX: f64 = 0.95;
/// Global threshold of the fixed-gate baseline.
pub const STATIC_TAU: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    thresholds: Vec<f64>,
    momentum: f64,
    tau_min: f64,
    tau_max: f64,
    update_count: Vec<u64>,
}

/// Mean winning-class confidence per class over one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassConfidence {
    pub mean: Vec<f64>,
    pub present: Vec<bool>,
    pub pixels: Vec<usize>,
}

impl ThresholdState {
    /// Adaptive state; every class starts at `tau_min`.
    pub fn new(num_classes: usize, momentum: f64, tau_min: f64, tau_max: f64) -> Result<Self> {
        Self::with_initial(num_classes, momentum, tau_min, tau_max, tau_min)
    }

    pub fn with_initial(
        num_classes: usize,
        momentum: f64,
        tau_min: f64,
        tau_max: f64,
        initial: f64,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("threshold state needs at least one class"));
        }
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::invalid(format!("momentum {momentum} not in (0, 1]")));
        }
        if !(0.0..=1.0).contains(&tau_min) || !(0.0..=1.0).contains(&tau_max) || tau_min > tau_max
        {
            return Err(Error::invalid(format!(
                "threshold bounds [{tau_min}, {tau_max}] are not an interval inside [0, 1]"
            )));
        }
        Ok(Self {
            thresholds: vec![initial; num_classes],
            momentum,
            tau_min,
            tau_max,
            update_count: vec![0; num_classes],
        })
    }

    /// The fixed global gate: `T = 0.95` for every class and updates disabled
    /// (momentum 1).
    pub fn fixed(num_classes: usize, tau: f64) -> Result<Self> {
        Self::with_initial(num_classes, 1.0, tau.min(DEFAULT_TAU_MIN), tau, tau)
    }

    pub(crate) fn from_parts(
        thresholds: Vec<f64>,
        momentum: f64,
        (tau_min, tau_max): (f64, f64),
        update_count: Vec<u64>,
    ) -> Result<Self> {
        let mut state = Self::with_initial(thresholds.len(), momentum, tau_min, tau_max, 0.0)?;
        if update_count.len() != thresholds.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![thresholds.len()],
                actual: vec![update_count.len()],
            });
        }
        state.thresholds = thresholds;
        state.update_count = update_count;
        Ok(state)
    }

    pub fn paper_default(num_classes: usize) -> Self {
        Self::new(num_classes, DEFAULT_MOMENTUM, DEFAULT_TAU_MIN, DEFAULT_TAU_MAX)
            .expect("default bounds are valid")
    }

    pub fn num_classes(&self) -> usize {
        self.thresholds.len()
    }

    /// Raw (unclipped) EMA values.
    pub fn raw(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.tau_min, self.tau_max)
    }

    pub fn update_count(&self) -> &[u64] {
        &self.update_count
    }

    pub fn set_raw(&mut self, class: usize, value: f64) {
        self.thresholds[class] = value;
    }

    /// EMA step for every class present in the batch; absent classes keep
    /// their value.
    pub fn update(&mut self, confidence: &ClassConfidence) -> Result<()> {
        if confidence.mean.len() != self.thresholds.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.thresholds.len()],
                actual: vec![confidence.mean.len()],
            });
        }
        for (c, (&mu, &present)) in confidence.mean.iter().zip(&confidence.present).enumerate() {
            if present && !(0.0..=1.0).contains(&mu) {
                return Err(Error::invalid(format!(
                    "class {c} mean confidence {mu} outside [0, 1]"
                )));
            }
        }
        let beta = self.momentum;
        for c in 0..self.thresholds.len() {
            if !confidence.present[c] {
                continue;
            }
            if beta < 1.0 {
                self.thresholds[c] = beta * self.thresholds[c] + (1.0 - beta) * confidence.mean[c];
            }
            self.update_count[c] += 1;
        }
        Ok(())
    }

    /// Clipped threshold of `class`.
    pub fn effective_threshold(&self, class: usize) -> f64 {
        self.thresholds[class].clamp(self.tau_min, self.tau_max)
    }

    pub fn effective_thresholds(&self) -> Vec<f64> {
        (0..self.num_classes())
            .map(|c| self.effective_threshold(c))
            .collect()
    }
}

/// Mean max-probability over the pixels won by each class.
pub fn batch_class_confidence(p_weak: &Tensor) -> Result<ClassConfidence> {
    check_probabilities(p_weak)?;
    let classes = p_weak.shape()[1];
    let (labels, maxima) = argmax_classes(p_weak);
    if labels.is_empty() {
        return Err(Error::Empty("weak-view batch has no pixels"));
    }
    let mut sum = vec![0.0; classes];
    let mut pixels = vec![0usize; classes];
    for (&c, &p) in labels.iter().zip(&maxima) {
        sum[c] += p;
        pixels[c] += 1;
    }
    let mean = sum
        .iter()
        .zip(&pixels)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    Ok(ClassConfidence {
        mean,
        present: pixels.iter().map(|&n| n > 0).collect(),
        pixels,
    })
}

/// Pseudo-labels of the weak view and their admission mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Admission {
    /// `(N, H, W)` of the per-pixel maps.
    pub dims: (usize, usize, usize),
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Admission {
    pub fn mask_tensor(&self) -> Tensor {
        let (n, h, w) = self.dims;
        Tensor::new(
            vec![n, 1, h, w],
            self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask length matches dims")
        .tagged_unchecked(Kind::Mask)
    }

    pub fn admitted(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Fraction of each class's pseudo-labelled pixels that were admitted.
    pub fn admitted_fraction(&self, num_classes: usize) -> Vec<f64> {
        let mut total = vec![0usize; num_classes];
        let mut kept = vec![0usize; num_classes];
        for (&c, &m) in self.labels.iter().zip(&self.mask) {
            total[c] += 1;
            kept[c] += m as usize;
        }
        total
            .iter()
            .zip(&kept)
            .map(|(&t, &k)| if t > 0 { k as f64 / t as f64 } else { 0.0 })
            .collect()
    }
}

/// `M = 1` iff the winning probability reaches the winning class's clipped
/// threshold (inclusive).
pub fn admission_mask(p_weak: &Tensor, state: &ThresholdState) -> Result<Admission> {
    check_probabilities(p_weak)?;
    let (n, classes, _) = split_axis(p_weak.shape(), 1);
    if classes != state.num_classes() {
        return Err(Error::ShapeMismatch {
            expected: vec![state.num_classes()],
            actual: vec![classes],
        });
    }
    let spatial = &p_weak.shape()[2..];
    let (h, w) = match spatial {
        [h, w] => (*h, *w),
        [] => (1, 1),
        [w] => (1, *w),
        _ => return Err(Error::invalid("admission_mask expects at most two spatial axes")),
    };
    let taus = state.effective_thresholds();
    let (labels, confidence) = argmax_classes(p_weak);
    let mask = labels
        .iter()
        .zip(&confidence)
        .map(|(&c, &p)| p >= taus[c])
        .collect();
    Ok(Admission {
        dims: (n, h, w),
        labels,
        confidence,
        mask,
    })
}

fn check_probabilities(t: &Tensor) -> Result<()> {
    if t.kind() != Kind::Probabilities || t.shape().len() < 2 {
        return Err(Error::invalid(
            "expected a probabilities tensor with a class axis",
        ));
    }
    Ok(())
}
