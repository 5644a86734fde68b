//! Supervised, gated strong-view, feature-perturbation and total losses.
//!
//! Every unlabeled loss divides by the total pixel count of the batch, not
//! by the number of admitted pixels, so heavy gating shrinks the loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cross_entropy, Tensor};

pub fn supervised_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let ce = cross_entropy(probs, labels)?;
    if ce.is_empty() {
        return Err(Error::Empty("labeled batch has no pixels"));
    }
    Ok(ce.iter().sum::<f64>() / ce.len() as f64)
}

/// `(1/|P|) sum omega * M * ce(p, y_hat)`.
pub fn strong_loss(probs: &Tensor, pseudo: &[usize], mask: &[bool], omega: &[f64]) -> Result<f64> {
    let ce = cross_entropy(probs, pseudo)?;
    check_len(ce.len(), mask.len())?;
    check_len(ce.len(), omega.len())?;
    if ce.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = ce
        .iter()
        .zip(mask)
        .zip(omega)
        .filter(|((_, &m), _)| m)
        .map(|((l, _), w)| w * l)
        .sum();
    Ok(sum / ce.len() as f64)
}

/// `(1/|P|) sum M * ce(p_fp, y_hat)`.
pub fn fp_loss(probs: &Tensor, pseudo: &[usize], mask: &[bool]) -> Result<f64> {
    let ce = cross_entropy(probs, pseudo)?;
    check_len(ce.len(), mask.len())?;
    if ce.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = ce.iter().zip(mask).filter(|(_, &m)| m).map(|(l, _)| l).sum();
    Ok(sum / ce.len() as f64)
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            expected: vec![expected],
            actual: vec![actual],
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub sup: f64,
    pub s1: f64,
    pub s2: f64,
    pub fp: f64,
}

/// Scalar multipliers of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Scales the whole unlabeled part; 0 recovers the supervised objective.
    pub unlabeled: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { unlabeled: 1.0 }
    }
}

impl LossWeights {
    /// Coefficients of `(sup, s1, s2, fp)` in the total.
    pub fn coefficients(&self) -> [f64; 4] {
        let u = self.unlabeled;
        [0.5, 0.25 * u, 0.25 * u, 0.125 * u]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_sup")]
    pub sup: f64,
    #[serde(rename = "L_s1")]
    pub s1: f64,
    #[serde(rename = "L_s2")]
    pub s2: f64,
    #[serde(rename = "L_fp")]
    pub fp: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
    pub admitted_fraction: Vec<f64>,
    pub mean_omega: f64,
}

/// `1/2 (L_sup + 1/2 (L_s1 + L_s2) + 1/4 L_fp)`, with the unlabeled part
/// scaled by `weights.unlabeled`.
pub fn total_loss(c: &LossComponents, weights: &LossWeights) -> Result<f64> {
    for (stream, value) in [("L_sup", c.sup), ("L_s1", c.s1), ("L_s2", c.s2), ("L_fp", c.fp)] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { stream, value });
        }
    }
    let u = weights.unlabeled;
    Ok(0.5 * (c.sup + u * (0.5 * (c.s1 + c.s2) + 0.25 * c.fp)))
}

pub fn breakdown(
    c: &LossComponents,
    weights: &LossWeights,
    admitted_fraction: Vec<f64>,
    mean_omega: f64,
) -> Result<LossBreakdown> {
    Ok(LossBreakdown {
        sup: c.sup,
        s1: c.s1,
        s2: c.s2,
        fp: c.fp,
        total: total_loss(c, weights)?,
        admitted_fraction,
        mean_omega,
    })
}

/// Gradient of `sum_i weight_i * ce(p_i, y_i)` with respect to the logits
/// that produced `probs`: `weight_i * (p_i - onehot(y_i))`.
pub fn weighted_ce_logit_grad(probs: &Tensor, labels: &[usize], weights: &[f64]) -> Result<Tensor> {
    let (n, c, h, w) = probs.dims4()?;
    check_len(n * h * w, labels.len())?;
    check_len(n * h * w, weights.len())?;
    let plane = h * w;
    let p = probs.data();
    let mut g = vec![0.0; p.len()];
    for b in 0..n {
        for k in 0..plane {
            let pos = b * plane + k;
            let wgt = weights[pos];
            if wgt == 0.0 {
                continue;
            }
            let y = labels[pos];
            if y >= c {
                return Err(Error::ClassOutOfRange { class: y, num_classes: c });
            }
            for class in 0..c {
                let idx = (b * c + class) * plane + k;
                let onehot = if class == y { 1.0 } else { 0.0 };
                g[idx] = wgt * (p[idx] - onehot);
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), g)
}
