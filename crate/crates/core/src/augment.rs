//! Weak (flip + scale) and strong (intensity jitter + CutMix) views, channel
//! dropout on features, and the co-transforms that keep label-space maps
//! aligned with the augmented images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    /// Fraction of the image area covered by a CutMix box.
    pub cutmix_box_ratio_range: (f64, f64),
    pub jitter_enabled: bool,
    pub intensity_jitter_strength: f64,
    pub fp_dropout_rate: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_range: (0.8, 1.2),
            cutmix_box_ratio_range: (0.25, 0.5),
            jitter_enabled: true,
            intensity_jitter_strength: 0.2,
            fp_dropout_rate: 0.5,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("scale range ({lo}, {hi}) is not a positive interval")));
        }
        let (a, b) = self.cutmix_box_ratio_range;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return Err(Error::invalid(format!("cutmix box ratio range ({a}, {b}) not inside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip probability outside [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.fp_dropout_rate) {
            return Err(Error::invalid(format!(
                "feature dropout rate {} not in [0, 1)",
                self.fp_dropout_rate
            )));
        }
        if !(self.intensity_jitter_strength >= 0.0) {
            return Err(Error::invalid("jitter strength must be non-negative"));
        }
        Ok(())
    }
}

/// Flip and scale applied to one item. Output pixels that fall outside the
/// scaled source replicate the nearest edge pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricRecord {
    pub flip: bool,
    pub scale: f64,
}

impl GeometricRecord {
    pub const IDENTITY: GeometricRecord = GeometricRecord {
        flip: false,
        scale: 1.0,
    };

    pub fn sample(spec: &AugmentSpec, rng: &mut impl Rng) -> Self {
        let flip = rng.random::<f64>() < spec.flip_prob;
        let (lo, hi) = spec.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self { flip, scale }
    }

    /// Source index of every output pixel of an `h x w` plane.
    pub fn source_indices(&self, h: usize, w: usize) -> Vec<usize> {
        let map = |i: usize, len: usize| -> usize {
            let half = len as f64 / 2.0;
            let src = ((i as f64 + 0.5 - half) / self.scale + half - 0.5).round();
            src.clamp(0.0, (len - 1) as f64) as usize
        };
        let rows: Vec<usize> = (0..h).map(|y| map(y, h)).collect();
        let cols: Vec<usize> = (0..w)
            .map(|x| {
                let sx = map(x, w);
                if self.flip { w - 1 - sx } else { sx }
            })
            .collect();
        let mut out = Vec::with_capacity(h * w);
        for &sy in &rows {
            out.extend(cols.iter().map(|&sx| sy * w + sx));
        }
        out
    }

    /// Applies the transform to `planes` consecutive `h x w` planes.
    pub fn apply_planes<T: Copy>(&self, values: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
        let src = self.source_indices(h, w);
        let mut out = Vec::with_capacity(values.len());
        for p in 0..planes {
            let plane = &values[p * h * w..(p + 1) * h * w];
            out.extend(src.iter().map(|&s| plane[s]));
        }
        out
    }
}

/// Applies per-item geometric records to an `[N, C, H, W]` tensor.
pub fn apply_geometry(t: &Tensor, records: &[GeometricRecord]) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if records.len() != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n],
            actual: vec![records.len()],
        });
    }
    let stride = c * h * w;
    let mut data = Vec::with_capacity(t.len());
    for (i, rec) in records.iter().enumerate() {
        data.extend(rec.apply_planes(&t.data()[i * stride..(i + 1) * stride], c, h, w));
    }
    Ok(Tensor::new(t.shape().to_vec(), data)?.tagged_unchecked(t.kind()))
}

/// Flip with probability `flip_prob`, then rescale within `scale_range`,
/// independently per batch item.
pub fn weak_augment(
    x: &Tensor,
    spec: &AugmentSpec,
    seed: u64,
) -> Result<(Tensor, Vec<GeometricRecord>)> {
    let (n, ..) = x.dims4()?;
    let records: Vec<GeometricRecord> = (0..n)
        .map(|i| GeometricRecord::sample(spec, &mut rng_for(seed, &[i as u64])))
        .collect();
    Ok((apply_geometry(x, &records)?, records))
}

/// Axis-aligned box `[y0, y0 + height) x [x0, x0 + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixBox {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl MixBox {
    pub const EMPTY: MixBox = MixBox {
        y0: 0,
        x0: 0,
        height: 0,
        width: 0,
    };

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.height && x >= self.x0 && x < self.x0 + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.y0 + self.height > h || self.x0 + self.width > w {
            return Err(Error::invalid(format!(
                "mix box {self:?} exceeds the {h}x{w} plane"
            )));
        }
        Ok(())
    }

    pub fn sample(ratio_range: (f64, f64), h: usize, w: usize, rng: &mut impl Rng) -> MixBox {
        let (lo, hi) = ratio_range;
        let ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let area = ratio * (h * w) as f64;
        let aspect = rng.random_range(0.5f64..=2.0);
        let height = ((area * aspect).sqrt().round() as usize).min(h);
        let width = ((area / aspect).sqrt().round() as usize).min(w);
        if height == 0 || width == 0 {
            return MixBox::EMPTY;
        }
        let y0 = rng.random_range(0..=h - height);
        let x0 = rng.random_range(0..=w - width);
        MixBox {
            y0,
            x0,
            height,
            width,
        }
    }
}

/// How one strong-view item was assembled: jitter applied to every item of
/// the view, and the donor whose (jittered) pixels fill the box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub donor: Option<usize>,
    pub region: MixBox,
    pub gain: f64,
    pub bias: f64,
}

fn jitter_params(spec: &AugmentSpec, rng: &mut impl Rng) -> (f64, f64) {
    let s = spec.intensity_jitter_strength;
    if !spec.jitter_enabled || s == 0.0 {
        return (1.0, 0.0);
    }
    (1.0 + rng.random_range(-s..=s), rng.random_range(-s / 2.0..=s / 2.0))
}

/// Affine intensity jitter around mid-grey, clamped to `[0, 1]`.
pub fn jitter_value(v: f64, gain: f64, bias: f64) -> f64 {
    if gain == 1.0 && bias == 0.0 {
        return v;
    }
    (gain * (v - 0.5) + 0.5 + bias).clamp(0.0, 1.0)
}

/// One strong view of the batch. `view` separates the two views' random
/// streams.
pub fn strong_view(
    x_weak: &Tensor,
    spec: &AugmentSpec,
    seed: u64,
    view: u64,
) -> Result<(Tensor, Vec<MixRecord>)> {
    let (n, c, h, w) = x_weak.dims4()?;
    let stride = c * h * w;
    let params: Vec<(f64, f64)> = (0..n)
        .map(|i| jitter_params(spec, &mut rng_for(seed, &[view, 0, i as u64])))
        .collect();
    let jittered: Vec<f64> = x_weak
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let (g, b) = params[k / stride];
            jitter_value(v, g, b)
        })
        .collect();
    if n < 2 {
        log::debug!("strong view of a single-item batch: CutMix skipped, jitter only");
    }
    let records: Vec<MixRecord> = (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, &[view, 1, i as u64]);
            let (gain, bias) = params[i];
            if n < 2 {
                return MixRecord {
                    donor: None,
                    region: MixBox::EMPTY,
                    gain,
                    bias,
                };
            }
            let mut donor = rng.random_range(0..n - 1);
            if donor >= i {
                donor += 1;
            }
            MixRecord {
                donor: Some(donor),
                region: MixBox::sample(spec.cutmix_box_ratio_range, h, w, &mut rng),
                gain,
                bias,
            }
        })
        .collect();
    let mixed = mix_planes(&jittered, n, c, h, w, &records)?;
    Ok((
        Tensor::new(x_weak.shape().to_vec(), mixed)?.tagged_unchecked(x_weak.kind()),
        records,
    ))
}

/// Two independent strong views of the weak batch.
pub fn strong_augment_pair(
    x_weak: &Tensor,
    spec: &AugmentSpec,
    seed: u64,
) -> Result<[(Tensor, Vec<MixRecord>); 2]> {
    Ok([
        strong_view(x_weak, spec, seed, 1)?,
        strong_view(x_weak, spec, seed, 2)?,
    ])
}

/// Inside each item's box, values come from the donor item; elsewhere from
/// the item itself. `values` holds `n` items of `planes` planes of `h x w`.
pub fn mix_planes<T: Copy>(
    values: &[T],
    n: usize,
    planes: usize,
    h: usize,
    w: usize,
    records: &[MixRecord],
) -> Result<Vec<T>> {
    if records.len() != n || values.len() != n * planes * h * w {
        return Err(Error::ShapeMismatch {
            expected: vec![n, planes, h, w],
            actual: vec![records.len(), values.len()],
        });
    }
    let stride = planes * h * w;
    let mut out = values.to_vec();
    for (i, rec) in records.iter().enumerate() {
        rec.region.check(h, w)?;
        let Some(donor) = rec.donor else { continue };
        if donor >= n {
            return Err(Error::invalid(format!("donor {donor} out of batch of {n}")));
        }
        let MixBox { y0, x0, height, width } = rec.region;
        for p in 0..planes {
            for y in y0..y0 + height {
                let row = p * h * w + y * w;
                for x in x0..x0 + width {
                    out[i * stride + row + x] = values[donor * stride + row + x];
                }
            }
        }
    }
    Ok(out)
}

/// CutMix co-transform of a label-resolution `[N, C, H, W]` tensor.
pub fn mix_label_space(t: &Tensor, records: &[MixRecord]) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    let data = mix_planes(t.data(), n, c, h, w, records)?;
    Ok(Tensor::new(t.shape().to_vec(), data)?.tagged_unchecked(t.kind()))
}

/// Multipliers of a channel dropout draw, one per `(item, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDropout {
    pub scale: Vec<f64>,
}

impl ChannelDropout {
    pub fn sample(n: usize, channels: usize, rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mut rng = rng_for(seed, &[]);
        let scale = (0..n * channels)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Ok(Self { scale })
    }

    pub fn identity(n: usize, channels: usize) -> Self {
        Self {
            scale: vec![1.0; n * channels],
        }
    }

    /// Multiplies every channel plane of `v` by its multiplier.
    pub fn apply(&self, v: &Tensor) -> Result<Tensor> {
        let (n, d, h, w) = v.dims4()?;
        if self.scale.len() != n * d {
            return Err(Error::ShapeMismatch {
                expected: vec![n, d],
                actual: vec![self.scale.len()],
            });
        }
        let plane = h * w;
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| x * self.scale[k / plane])
            .collect();
        Ok(Tensor::new(v.shape().to_vec(), data)?.tagged_unchecked(v.kind()))
    }
}

/// Channel dropout: each feature channel is zeroed with probability `rate`
/// and survivors are scaled by `1 / (1 - rate)`.
pub fn feature_perturb(v: &Tensor, rate: f64, seed: u64) -> Result<(Tensor, ChannelDropout)> {
    let (n, d, ..) = v.dims4()?;
    let drop = ChannelDropout::sample(n, d, rate, seed)?;
    Ok((drop.apply(v)?, drop))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|k| k as f64).collect()).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let x = ramp(1, 3, 5, 6);
        let rec = [GeometricRecord { flip: true, scale: 1.0 }];
        let once = apply_geometry(&x, &rec).unwrap();
        assert_ne!(once, x);
        assert_eq!(apply_geometry(&once, &rec).unwrap(), x);
    }

    #[test]
    fn unit_scale_without_flip_is_identity() {
        let x = ramp(2, 3, 7, 4);
        let out = apply_geometry(&x, &[GeometricRecord::IDENTITY; 2]).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn constant_image_stays_constant() {
        let x = Tensor::full(&[3, 3, 8, 8], 0.42);
        for seed in 0..20 {
            let (y, _) = weak_augment(&x, &AugmentSpec::default(), seed).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.42));
        }
    }

    #[test]
    fn geometry_keeps_image_label_pairing() {
        // pixel value encodes its label, so a shared record must keep them equal
        let (h, w) = (16, 12);
        let labels: Vec<usize> = (0..h * w).map(|k| (k * 7919) % 5).collect();
        let image: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let spec = AugmentSpec::default();
        for seed in 0..50 {
            let rec = GeometricRecord::sample(&spec, &mut rng_for(seed, &[]));
            let img = rec.apply_planes(&image, 1, h, w);
            let lab = rec.apply_planes(&labels, 1, h, w);
            for (a, b) in img.iter().zip(&lab) {
                assert_eq!(*a, *b as f64);
            }
        }
    }

    fn no_jitter() -> AugmentSpec {
        AugmentSpec {
            jitter_enabled: false,
            ..AugmentSpec::default()
        }
    }

    #[test]
    fn empty_box_gives_jitter_only_view() {
        let spec = AugmentSpec {
            cutmix_box_ratio_range: (0.0, 0.0),
            ..AugmentSpec::default()
        };
        let x = ramp(3, 1, 6, 6).reshape(vec![3, 1, 6, 6]).unwrap();
        let x = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v / 108.0).collect()).unwrap();
        let (view, recs) = strong_view(&x, &spec, 3, 1).unwrap();
        for (i, rec) in recs.iter().enumerate() {
            assert_eq!(rec.region.area(), 0);
            for k in 0..36 {
                let v = x.data()[i * 36 + k];
                assert_eq!(view.data()[i * 36 + k], jitter_value(v, rec.gain, rec.bias));
            }
        }
    }

    #[test]
    fn full_box_gives_donor() {
        let spec = AugmentSpec {
            cutmix_box_ratio_range: (1.0, 1.0),
            ..no_jitter()
        };
        let x = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|k| k as f64 / 32.0).collect()).unwrap();
        // aspect != 1 clips one side; force a square box through the record
        let (_, mut recs) = strong_view(&x, &spec, 0, 1).unwrap();
        for r in recs.iter_mut() {
            r.region = MixBox { y0: 0, x0: 0, height: 4, width: 4 };
        }
        let mixed = mix_label_space(&x, &recs).unwrap();
        assert_eq!(&mixed.data()[..16], &x.data()[16..]);
        assert_eq!(&mixed.data()[16..], &x.data()[..16]);
    }

    #[test]
    fn pixels_outside_box_equal_jittered_base() {
        let spec = AugmentSpec::default();
        let (n, h, w) = (4, 10, 10);
        let x = Tensor::new(
            vec![n, 2, h, w],
            (0..n * 2 * h * w).map(|k| ((k * 37) % 101) as f64 / 100.0).collect(),
        )
        .unwrap();
        for seed in 0..10 {
            let (view, recs) = strong_view(&x, &spec, seed, 1).unwrap();
            for (i, rec) in recs.iter().enumerate() {
                let donor = rec.donor.unwrap();
                assert_ne!(donor, i);
                let donor_rec = recs[donor];
                for p in 0..2 {
                    for y in 0..h {
                        for x_ in 0..w {
                            let k = p * h * w + y * w + x_;
                            let got = view.data()[i * 200 + k];
                            let want = if rec.region.contains(y, x_) {
                                jitter_value(x.data()[donor * 200 + k], donor_rec.gain, donor_rec.bias)
                            } else {
                                jitter_value(x.data()[i * 200 + k], rec.gain, rec.bias)
                            };
                            assert_eq!(got, want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_item_batch_skips_cutmix() {
        let x = Tensor::full(&[1, 1, 4, 4], 0.5);
        let (_, recs) = strong_view(&x, &AugmentSpec::default(), 0, 1).unwrap();
        assert_eq!(recs[0].donor, None);
    }

    #[test]
    fn mix_label_space_examples() {
        let t = ramp(2, 1, 4, 4);
        let empty = [MixRecord { donor: Some(1), region: MixBox::EMPTY, gain: 1.0, bias: 0.0 },
                     MixRecord { donor: Some(0), region: MixBox::EMPTY, gain: 1.0, bias: 0.0 }];
        assert_eq!(mix_label_space(&t, &empty).unwrap(), t);

        let region = MixBox { y0: 1, x0: 2, height: 2, width: 2 };
        let recs = [MixRecord { donor: Some(1), region, gain: 1.0, bias: 0.0 },
                    MixRecord { donor: None, region: MixBox::EMPTY, gain: 1.0, bias: 0.0 }];
        let mixed = mix_label_space(&t, &recs).unwrap();
        // brute-force assembly
        for y in 0..4 {
            for x in 0..4 {
                let k = y * 4 + x;
                let from = if (1..3).contains(&y) && (2..4).contains(&x) { 16 + k } else { k };
                assert_eq!(mixed.data()[k], t.data()[from]);
            }
        }
        assert_eq!(&mixed.data()[16..], &t.data()[16..]);

        let oob = [MixRecord { donor: Some(1), region: MixBox { y0: 3, x0: 3, height: 2, width: 1 }, gain: 1.0, bias: 0.0 },
                   MixRecord { donor: None, region: MixBox::EMPTY, gain: 1.0, bias: 0.0 }];
        assert!(mix_label_space(&t, &oob).is_err());
    }

    #[test]
    fn feature_perturb_examples() {
        let v = ramp(2, 4, 3, 3);
        let (same, _) = feature_perturb(&v, 0.0, 9).unwrap();
        assert_eq!(same, v);
        let zero = Tensor::zeros(&[2, 4, 3, 3]);
        assert_eq!(feature_perturb(&zero, 0.5, 9).unwrap().0, zero);
        assert!(feature_perturb(&v, 1.0, 0).is_err());
        assert!(feature_perturb(&v, -0.1, 0).is_err());
    }

    #[test]
    fn dropout_keeps_half_and_doubles_survivors() {
        let d = 16;
        let trials = 10_000;
        let mut kept = 0usize;
        let v = Tensor::full(&[1, d, 1, 1], 1.0);
        for t in 0..trials {
            let (out, _) = feature_perturb(&v, 0.5, t as u64).unwrap();
            for &x in out.data() {
                assert!(x == 0.0 || x == 2.0);
                kept += (x == 2.0) as usize;
            }
        }
        let n = (trials * d) as f64;
        let mean = kept as f64 / trials as f64;
        // binomial(d, 1/2) per draw: sd of the mean is sqrt(d/4 / trials)
        let sigma = (d as f64 * 0.25 / trials as f64).sqrt();
        assert!((mean - d as f64 / 2.0).abs() < 3.0 * sigma, "mean keep {mean}");
        assert!(n > 0.0);
    }

    #[test]
    fn dropout_preserves_expectation() {
        let trials = 10_000;
        let base = [0.3, -1.2, 2.5];
        let v = Tensor::new(vec![1, 3, 1, 1], base.to_vec()).unwrap();
        let mut sum = [0.0; 3];
        for t in 0..trials {
            let (out, _) = feature_perturb(&v, 0.5, 1_000 + t as u64).unwrap();
            for (s, x) in sum.iter_mut().zip(out.data()) {
                *s += x;
            }
        }
        for (s, b) in sum.iter().zip(base) {
            // each draw is 0 or 2b with equal odds: sd = |b|
            let sigma = b.abs() / (trials as f64).sqrt();
            assert!((s / trials as f64 - b).abs() < 3.0 * sigma);
        }
    }

    proptest! {
        #[test]
        fn strong_view_pixels_trace_to_sources(seed in 0u64..500) {
            let (n, h, w) = (3, 8, 8);
            let labels: Vec<usize> = (0..n * h * w).collect();
            let total = labels.len() as f64;
            let x = Tensor::new(vec![n, 1, h, w], labels.iter().map(|&l| l as f64 / total).collect()).unwrap();
            let (view, recs) = strong_view(&x, &no_jitter(), seed, 1).unwrap();
            let mixed = mix_planes(&labels, n, 1, h, w, &recs).unwrap();
            for (v, l) in view.data().iter().zip(&mixed) {
                // each pixel value encodes its flat source index
                prop_assert_eq!(*v, *l as f64 / total);
            }
        }
    }
}
