//! Intersection-over-union accumulated over whole datasets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub num_classes: usize,
    /// `counts[truth * C + predicted]`.
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, predicted: &[usize], truth: &[usize]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![truth.len()],
                actual: vec![predicted.len()],
            });
        }
        let c = self.num_classes;
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= c || t >= c {
                return Err(Error::ClassOutOfRange { class: p.max(t), num_classes: c });
            }
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class appears in
    /// neither prediction nor truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let truth: u64 = (0..c).map(|p| self.counts[k * c + p]).sum();
                let pred: u64 = (0..c).map(|t| self.counts[t * c + k]).sum();
                let union = truth + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn report(&self) -> IouReport {
        let per_class = self.iou();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            f64::NAN
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouReport {
            per_class,
            miou,
            pixels: self.counts.iter().sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixels: u64,
}

pub fn iou_report(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<IouReport> {
    let mut m = Confusion::new(num_classes);
    m.add(predicted, truth)?;
    Ok(m.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_inverted() {
        let t = [0, 1, 1, 0, 1];
        assert_eq!(iou_report(&t, &t, 2).unwrap().miou, 1.0);
        let inv: Vec<usize> = t.iter().map(|v| 1 - v).collect();
        assert_eq!(iou_report(&inv, &t, 2).unwrap().miou, 0.0);
    }

    #[test]
    fn half_overlapping_squares() {
        // 2x2 squares on a 4x4 grid shifted by one column share 2 pixels
        let sq = |x0: usize| -> Vec<usize> {
            (0..16).map(|i| ((i % 4) >= x0 && (i % 4) < x0 + 2 && (i / 4) >= 1 && (i / 4) < 3) as usize).collect()
        };
        let r = iou_report(&sq(1), &sq(0), 2).unwrap();
        assert!((r.per_class[1].unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_excluded() {
        let r = iou_report(&[0, 0, 0], &[0, 0, 0], 2).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None]);
        assert_eq!(r.miou, 1.0);
    }
}
