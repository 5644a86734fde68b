//! Dense row-major `f64` arrays and the handful of numerics every other
//! module needs: softmax, per-pixel cross-entropy, cosine similarity,
//! normalization and nearest-neighbor resampling.
//!
//! Spatial tensors use `[N, C, H, W]` layout. The class (or channel) axis is
//! axis 1 unless a function says otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Smallest norm accepted by [`l2_normalize`] and [`cosine_similarity`].
pub const MIN_NORM: f64 = 1e-12;

/// What a tensor's values mean. Used only for invariant checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Kind {
    #[default]
    Generic,
    Image,
    Logits,
    Probabilities,
    Features,
    Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    kind: Kind,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            kind: Kind::Generic,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            kind: Kind::Generic,
        }
    }

    /// Tags the tensor, checking the invariants the tag implies.
    pub fn with_kind(mut self, kind: Kind) -> Result<Self> {
        self.kind = kind;
        self.validate()?;
        Ok(self)
    }

    pub(crate) fn tagged_unchecked(mut self, kind: Kind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            Kind::Mask => {
                if let Some(i) = self.data.iter().position(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::invalid(format!(
                        "mask value {} at index {i} is not in {{0, 1}}",
                        self.data[i]
                    )));
                }
            }
            Kind::Probabilities => {
                if self.shape.len() < 2 {
                    return Err(Error::invalid("probabilities need a class axis"));
                }
                let (outer, classes, inner) = split_axis(&self.shape, 1);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut sum = 0.0;
                        for c in 0..classes {
                            let v = self.data[(o * classes + c) * inner + i];
                            if v < 0.0 {
                                return Err(Error::invalid("negative probability"));
                            }
                            sum += v;
                        }
                        if (sum - 1.0).abs() > 1e-9 {
                            return Err(Error::invalid(format!(
                                "probabilities sum to {sum} at position ({o}, {i})"
                            )));
                        }
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(N, C, H, W)` for a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::invalid(format!(
                "expected a rank-4 [N, C, H, W] tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copies the `n`-th item of the leading axis.
    pub fn item(&self, n: usize) -> Tensor {
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[n * stride..(n + 1) * stride].to_vec(),
            kind: self.kind,
        }
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::Empty("stack of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut lead = 0;
        for t in items {
            if &t.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    expected: first.shape.clone(),
                    actual: t.shape.clone(),
                });
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor {
            shape,
            data,
            kind: first.kind,
        })
    }
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)` extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= logits.shape.len() {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for rank {}",
            logits.shape.len()
        )));
    }
    if let Some(index) = logits.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let (outer, classes, inner) = split_axis(&logits.shape, axis);
    let mut out = vec![0.0; logits.data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * classes + c) * inner + i;
            let max = (0..classes)
                .map(|c| logits.data[at(c)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..classes {
                let e = (logits.data[at(c)] - max).exp();
                out[at(c)] = e;
                sum += e;
            }
            for c in 0..classes {
                out[at(c)] /= sum;
            }
        }
    }
    Ok(Tensor {
        shape: logits.shape.clone(),
        data: out,
        kind: Kind::Probabilities,
    })
}

/// Per-position `-ln p[target]` with the class axis at 1.
///
/// `targets` holds one class index per non-class position, in row-major
/// order of the remaining axes (`n, h, w` for `[N, C, H, W]`).
pub fn cross_entropy(probs: &Tensor, targets: &[usize]) -> Result<Vec<f64>> {
    if probs.kind != Kind::Probabilities {
        return Err(Error::invalid("cross_entropy expects a probabilities tensor"));
    }
    let (outer, classes, inner) = split_axis(&probs.shape, 1);
    if targets.len() != outer * inner {
        return Err(Error::ShapeMismatch {
            expected: vec![outer * inner],
            actual: vec![targets.len()],
        });
    }
    targets
        .iter()
        .enumerate()
        .map(|(pos, &t)| {
            if t >= classes {
                return Err(Error::ClassOutOfRange {
                    class: t,
                    num_classes: classes,
                });
            }
            let (o, i) = (pos / inner, pos % inner);
            let p = probs.data[(o * classes + t) * inner + i];
            Ok(-p.max(PROB_FLOOR).ln())
        })
        .collect()
}

/// Index of the largest entry along the class axis; ties go to the lowest index.
pub fn argmax_classes(t: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let (outer, classes, inner) = split_axis(&t.shape, 1);
    let mut labels = Vec::with_capacity(outer * inner);
    let mut maxima = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut best = 0;
            let mut best_v = t.data[o * classes * inner + i];
            for c in 1..classes {
                let v = t.data[(o * classes + c) * inner + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            labels.push(best);
            maxima.push(best_v);
        }
    }
    (labels, maxima)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    let (na, nb) = (norm(a), norm(b));
    for n in [na, nb] {
        if n <= MIN_NORM {
            return Err(Error::ZeroVector { norm: n });
        }
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > MIN_NORM) {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Nearest-neighbor resampling of the last two axes.
pub fn resize_nearest(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let rank = t.shape.len();
    if rank < 2 {
        return Err(Error::invalid("resize_nearest needs at least two axes"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "target extent {out_h}x{out_w} must be positive"
        )));
    }
    let (in_h, in_w) = (t.shape[rank - 2], t.shape[rank - 1]);
    let planes: usize = t.shape[..rank - 2].iter().product();
    let rows: Vec<usize> = (0..out_h).map(|y| nearest_src(y, in_h, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|x| nearest_src(x, in_w, out_w)).collect();
    let mut data = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &t.data[p * in_h * in_w..(p + 1) * in_h * in_w];
        for &sy in &rows {
            data.extend(cols.iter().map(|&sx| plane[sy * in_w + sx]));
        }
    }
    let mut shape = t.shape.clone();
    shape[rank - 2] = out_h;
    shape[rank - 1] = out_w;
    Ok(Tensor {
        shape,
        data,
        kind: t.kind,
    })
}

fn nearest_src(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

/// Nearest-neighbor resampling of a flat per-pixel map (`N` planes of `h x w`).
pub fn resize_plane_nearest<T: Copy>(
    values: &[T],
    planes: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &values[p * in_h * in_w..(p + 1) * in_h * in_w];
        for y in 0..out_h {
            let sy = nearest_src(y, in_h, out_h);
            for x in 0..out_w {
                out.push(plane[sy * in_w + nearest_src(x, in_w, out_w)]);
            }
        }
    }
    out
}
