//! Toy encoder-decoder with hand-written reverse-mode gradients.
//!
//! Encoder: `conv3x3 -> tanh -> avgpool2 -> conv3x3 -> tanh`, giving
//! `feature_dim` channels at half resolution. Decoder: `1x1 conv` to class
//! logits at half resolution, then x2 nearest upsampling.
//!
//! All parameters live in one flat vector; [`Layout`] names the segments.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::{softmax, Kind, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            hidden: 8,
            feature_dim: 16,
            num_classes: 2,
        }
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub conv1_w: Range<usize>,
    pub conv1_b: Range<usize>,
    pub conv2_w: Range<usize>,
    pub conv2_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            conv1_w: take(c.hidden * c.in_channels * 9),
            conv1_b: take(c.hidden),
            conv2_w: take(c.feature_dim * c.hidden * 9),
            conv2_b: take(c.feature_dim),
            head_w: take(c.num_classes * c.feature_dim),
            head_b: take(c.num_classes),
        }
    }

    pub fn len(&self) -> usize {
        self.head_b.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(name, shape, range)` of every block, in storage order.
    pub fn blocks(&self, c: &ModelConfig) -> Vec<(&'static str, Vec<usize>, Range<usize>)> {
        vec![
            ("conv1_w", vec![c.hidden, c.in_channels, 3, 3], self.conv1_w.clone()),
            ("conv1_b", vec![c.hidden], self.conv1_b.clone()),
            ("conv2_w", vec![c.feature_dim, c.hidden, 3, 3], self.conv2_w.clone()),
            ("conv2_b", vec![c.feature_dim], self.conv2_b.clone()),
            ("head_w", vec![c.num_classes, c.feature_dim], self.head_w.clone()),
            ("head_b", vec![c.num_classes], self.head_b.clone()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Intermediates of one encoder pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderTape {
    input: Tensor,
    hidden: Vec<f64>,
    pooled: Vec<f64>,
    /// Encoder output `v`, `[N, d, H/2, W/2]`.
    pub features: Tensor,
}

#[derive(Clone, Debug)]
pub struct Output {
    pub features: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

impl ToyModel {
    /// Random initialization: weights ~ N(0, 1/fan_in), zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = rng_for(seed, &[stream::INIT]);
        let c = config;
        let fill = |range: Range<usize>, fan_in: usize, params: &mut [f64], rng: &mut dyn rand::RngCore| {
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive sd");
            for p in &mut params[range] {
                *p = normal.sample(rng);
            }
        };
        let l = model.layout.clone();
        fill(l.conv1_w, c.in_channels * 9, &mut model.params, &mut rng);
        fill(l.conv2_w, c.hidden * 9, &mut model.params, &mut rng);
        fill(l.head_w, c.feature_dim, &mut model.params, &mut rng);
        Ok(model)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        if config.in_channels == 0 || config.hidden == 0 || config.feature_dim == 0 || config.num_classes < 2 {
            return Err(Error::invalid(format!("degenerate model config {config:?}")));
        }
        let layout = Layout::new(&config);
        Ok(Self {
            params: vec![0.0; layout.len()],
            config,
            layout,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        if params.len() != m.params.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![m.params.len()],
                actual: vec![params.len()],
            });
        }
        m.params = params;
        Ok(m)
    }

    /// Fills every parameter with N(0, sd^2), biases included. Used by
    /// gradient checks, where zero biases would hide errors.
    pub fn randomize_all(&mut self, sd: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, sd).expect("positive sd");
        for p in &mut self.params {
            *p = normal.sample(rng);
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.config.in_channels || h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![n, self.config.in_channels, h + h % 2, w + w % 2],
                actual: x.shape().to_vec(),
            });
        }
        Ok((n, h, w))
    }

    pub fn encode(&self, x: &Tensor) -> Result<EncoderTape> {
        let (n, h, w) = self.check_input(x)?;
        let c = &self.config;
        let l = &self.layout;
        let mut hidden = conv3x3(
            x.data(),
            n,
            c.in_channels,
            h,
            w,
            &self.params[l.conv1_w.clone()],
            &self.params[l.conv1_b.clone()],
            c.hidden,
        );
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let pooled = avg_pool2(&hidden, n * c.hidden, h, w);
        let (hh, hw) = (h / 2, w / 2);
        let mut feats = conv3x3(
            &pooled,
            n,
            c.hidden,
            hh,
            hw,
            &self.params[l.conv2_w.clone()],
            &self.params[l.conv2_b.clone()],
            c.feature_dim,
        );
        feats.iter_mut().for_each(|v| *v = v.tanh());
        Ok(EncoderTape {
            input: x.clone(),
            hidden,
            pooled,
            features: Tensor::new(vec![n, c.feature_dim, hh, hw], feats)?.tagged_unchecked(Kind::Features),
        })
    }

    /// Class logits at feature resolution, `[N, C, h, w]`.
    pub fn decode_half(&self, v: &Tensor) -> Result<Tensor> {
        let (n, d, h, w) = v.dims4()?;
        if d != self.config.feature_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![n, self.config.feature_dim, h, w],
                actual: v.shape().to_vec(),
            });
        }
        let classes = self.config.num_classes;
        let wts = &self.params[self.layout.head_w.clone()];
        let bias = &self.params[self.layout.head_b.clone()];
        let plane = h * w;
        let mut z = vec![0.0; n * classes * plane];
        let vd = v.data();
        for b in 0..n {
            for c in 0..classes {
                let out = &mut z[(b * classes + c) * plane..(b * classes + c + 1) * plane];
                out.fill(bias[c]);
                for k in 0..d {
                    let wk = wts[c * d + k];
                    let src = &vd[(b * d + k) * plane..(b * d + k + 1) * plane];
                    for (o, s) in out.iter_mut().zip(src) {
                        *o += wk * s;
                    }
                }
            }
        }
        Ok(Tensor::new(vec![n, classes, h, w], z)?.tagged_unchecked(Kind::Logits))
    }

    /// Class logits at input resolution.
    pub fn decode(&self, v: &Tensor) -> Result<Tensor> {
        let half = self.decode_half(v)?;
        let (n, c, h, w) = half.dims4()?;
        let up = upsample2(half.data(), n * c, h, w);
        Ok(Tensor::new(vec![n, c, 2 * h, 2 * w], up)?.tagged_unchecked(Kind::Logits))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Output> {
        let tape = self.encode(x)?;
        let logits = self.decode(&tape.features)?;
        let probs = softmax(&logits, 1)?;
        Ok(Output {
            features: tape.features,
            logits,
            probs,
        })
    }

    /// Accumulates head gradients for `dlogits` (input resolution) into
    /// `grads` and returns the gradient with respect to `v`.
    pub fn decoder_backward(&self, v: &Tensor, dlogits: &Tensor, grads: &mut [f64]) -> Result<Tensor> {
        let (n, d, h, w) = v.dims4()?;
        let classes = self.config.num_classes;
        if dlogits.shape() != [n, classes, 2 * h, 2 * w] {
            return Err(Error::ShapeMismatch {
                expected: vec![n, classes, 2 * h, 2 * w],
                actual: dlogits.shape().to_vec(),
            });
        }
        self.check_grads(grads)?;
        let dz = upsample2_backward(dlogits.data(), n * classes, h, w);
        let plane = h * w;
        let (hw_r, hb_r) = (self.layout.head_w.clone(), self.layout.head_b.clone());
        let wts = &self.params[hw_r.clone()];
        let vd = v.data();
        let mut dv = vec![0.0; vd.len()];
        for b in 0..n {
            for c in 0..classes {
                let g = &dz[(b * classes + c) * plane..(b * classes + c + 1) * plane];
                grads[hb_r.start + c] += g.iter().sum::<f64>();
                for k in 0..d {
                    let src = &vd[(b * d + k) * plane..(b * d + k + 1) * plane];
                    grads[hw_r.start + c * d + k] += g.iter().zip(src).map(|(a, s)| a * s).sum::<f64>();
                    let wk = wts[c * d + k];
                    let out = &mut dv[(b * d + k) * plane..(b * d + k + 1) * plane];
                    for (o, a) in out.iter_mut().zip(g) {
                        *o += wk * a;
                    }
                }
            }
        }
        Tensor::new(v.shape().to_vec(), dv)
    }

    /// Accumulates encoder gradients for `dv` into `grads`.
    pub fn encoder_backward(&self, tape: &EncoderTape, dv: &Tensor, grads: &mut [f64]) -> Result<()> {
        if dv.shape() != tape.features.shape() {
            return Err(Error::ShapeMismatch {
                expected: tape.features.shape().to_vec(),
                actual: dv.shape().to_vec(),
            });
        }
        self.check_grads(grads)?;
        let c = &self.config;
        let l = &self.layout;
        let (n, _, h, w) = tape.input.dims4()?;
        let (hh, hw) = (h / 2, w / 2);

        let da2: Vec<f64> = dv
            .data()
            .iter()
            .zip(tape.features.data())
            .map(|(g, v)| g * (1.0 - v * v))
            .collect();
        let dpooled = conv3x3_backward(
            &tape.pooled,
            n,
            c.hidden,
            hh,
            hw,
            &self.params[l.conv2_w.clone()],
            c.feature_dim,
            &da2,
            grads,
            l.conv2_w.clone(),
            l.conv2_b.clone(),
            true,
        )
        .expect("input gradient requested");
        let dhidden = avg_pool2_backward(&dpooled, n * c.hidden, h, w);
        let da1: Vec<f64> = dhidden
            .iter()
            .zip(&tape.hidden)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        conv3x3_backward(
            tape.input.data(),
            n,
            c.in_channels,
            h,
            w,
            &self.params[l.conv1_w.clone()],
            c.hidden,
            &da1,
            grads,
            l.conv1_w.clone(),
            l.conv1_b.clone(),
            false,
        );
        Ok(())
    }

    fn check_grads(&self, grads: &[f64]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.params.len()],
                actual: vec![grads.len()],
            });
        }
        Ok(())
    }
}

/// Copies each `h x w` plane into a zero border of width 1.
fn pad_planes(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let pw = w + 2;
    let mut out = vec![0.0; planes * (h + 2) * pw];
    for p in 0..planes {
        for y in 0..h {
            let dst = p * (h + 2) * pw + (y + 1) * pw + 1;
            out[dst..dst + w].copy_from_slice(&input[p * h * w + y * w..p * h * w + (y + 1) * w]);
        }
    }
    out
}

/// Flat offsets of the nine taps in a padded plane, and the span of output
/// positions (in padded-width layout) they cover.
///
/// Output `(y, x)` lives at `y * (w + 2) + x`; the two extra columns per
/// row are scratch. Tap `(ky, kx)` reads the padded input at that index
/// plus `ky * (w + 2) + kx`, so every tap is one contiguous run.
fn tap_layout(h: usize, w: usize) -> ([usize; 9], usize) {
    let pw = w + 2;
    let mut offs = [0; 9];
    for (k, o) in offs.iter_mut().enumerate() {
        *o = (k / 3) * pw + k % 3;
    }
    (offs, h * pw - 2)
}

/// `acc[i] += sum_k w[k] * taps[k][i]`; the nine taps are fused so `acc`
/// is touched once.
fn fused_taps(acc: &mut [f64], taps: [&[f64]; 9], w: &[f64]) {
    let n = acc.len();
    let [t0, t1, t2, t3, t4, t5, t6, t7, t8] = taps.map(|t| &t[..n]);
    for i in 0..n {
        acc[i] += w[0] * t0[i]
            + w[1] * t1[i]
            + w[2] * t2[i]
            + w[3] * t3[i]
            + w[4] * t4[i]
            + w[5] * t5[i]
            + w[6] * t6[i]
            + w[7] * t7[i]
            + w[8] * t8[i];
    }
}

/// Zero-padded 3x3 convolution, stride 1.
#[allow(clippy::too_many_arguments)]
fn conv3x3(
    input: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    let plane = h * w;
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    let (offs, span) = tap_layout(h, w);
    let padded = pad_planes(input, n * cin, h, w);
    let mut acc = vec![0.0; span];
    let mut out = vec![0.0; n * cout * plane];
    for b in 0..n {
        for co in 0..cout {
            acc.fill(bias[co]);
            for ci in 0..cin {
                let src = &padded[(b * cin + ci) * pplane..(b * cin + ci + 1) * pplane];
                let k0 = (co * cin + ci) * 9;
                fused_taps(&mut acc, offs.map(|o| &src[o..o + span]), &weight[k0..k0 + 9]);
            }
            let o = &mut out[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            for y in 0..h {
                o[y * w..(y + 1) * w].copy_from_slice(&acc[y * pw..y * pw + w]);
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients into `grads` and optionally
/// returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    dout: &[f64],
    grads: &mut [f64],
    w_range: Range<usize>,
    b_range: Range<usize>,
    want_input: bool,
) -> Option<Vec<f64>> {
    let plane = h * w;
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    let (offs, span) = tap_layout(h, w);
    let padded = pad_planes(input, n * cin, h, w);
    // Output gradients in padded-width layout (zero scratch columns), shifted
    // right by `lead` so the input gradient can be gathered: padded input
    // position j receives sum_k w[k] * g[j - offs[k]].
    let lead = offs[8];
    let glen = lead + pplane;
    let mut gbuf = vec![0.0; n * cout * glen];
    for p in 0..n * cout {
        for y in 0..h {
            let dst = p * glen + lead + y * pw;
            gbuf[dst..dst + w].copy_from_slice(&dout[p * plane + y * w..p * plane + (y + 1) * w]);
        }
        grads[b_range.start + p % cout] += dout[p * plane..(p + 1) * plane].iter().sum::<f64>();
    }
    let mut dinput = want_input.then(|| vec![0.0; n * cin * plane]);
    let mut dpad = vec![0.0; pplane];
    let mut flipped = [0.0; 9];
    for b in 0..n {
        for ci in 0..cin {
            let src = &padded[(b * cin + ci) * pplane..(b * cin + ci + 1) * pplane];
            let taps = offs.map(|o| &src[o..o + span]);
            dpad.fill(0.0);
            for co in 0..cout {
                let g = &gbuf[(b * cout + co) * glen..(b * cout + co + 1) * glen];
                let gs = &g[lead..lead + span];
                let k0 = (co * cin + ci) * 9;
                let mut acc = [0.0; 9];
                for i in 0..span {
                    let gi = gs[i];
                    for (a, t) in acc.iter_mut().zip(&taps) {
                        *a += gi * t[i];
                    }
                }
                for (k, a) in acc.iter().enumerate() {
                    grads[w_range.start + k0 + k] += a;
                }
                if want_input {
                    for (k, f) in flipped.iter_mut().enumerate() {
                        *f = weight[k0 + k];
                    }
                    fused_taps(&mut dpad, offs.map(|o| &g[lead - o..lead - o + pplane]), &flipped);
                }
            }
            if let Some(di) = dinput.as_mut() {
                let dst = &mut di[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                for y in 0..h {
                    let srow = (y + 1) * pw + 1;
                    dst[y * w..(y + 1) * w].copy_from_slice(&dpad[srow..srow + w]);
                }
            }
        }
    }
    dinput
}

fn avg_pool2(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let s = src[2 * y * w + 2 * x]
                    + src[2 * y * w + 2 * x + 1]
                    + src[(2 * y + 1) * w + 2 * x]
                    + src[(2 * y + 1) * w + 2 * x + 1];
                out[p * oh * ow + y * ow + x] = 0.25 * s;
            }
        }
    }
    out
}

fn avg_pool2_backward(dout: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut din = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                din[p * h * w + y * w + x] = 0.25 * dout[p * oh * ow + (y / 2) * ow + x / 2];
            }
        }
    }
    din
}

fn upsample2(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                out[p * oh * ow + y * ow + x] = input[p * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block. `h, w` are the small extents.
fn upsample2_backward(dout: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut din = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                din[p * h * w + (y / 2) * w + x / 2] += dout[p * oh * ow + y * ow + x];
            }
        }
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{supervised_loss, weighted_ce_logit_grad};

    fn small() -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            hidden: 3,
            feature_dim: 4,
            num_classes: 2,
        }
    }

    fn input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, &[99]);
        Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_model_gives_uniform_probs() {
        let m = ToyModel::zeros(ModelConfig::default()).unwrap();
        let out = m.forward(&Tensor::zeros(&[2, 3, 8, 8])).unwrap();
        assert!(out.probs.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn shape_contract() {
        let m = ToyModel::init(ModelConfig::default(), 1).unwrap();
        let out = m.forward(&input(1, 3, 8, 8, 0)).unwrap();
        assert_eq!(out.logits.shape(), &[1, 2, 8, 8]);
        assert_eq!(out.features.shape(), &[1, 16, 4, 4]);
        assert!(m.forward(&input(1, 2, 8, 8, 0)).is_err());
        assert!(m.forward(&input(1, 3, 7, 8, 0)).is_err());
    }

    #[test]
    fn duplicated_inputs_give_duplicated_outputs() {
        let m = ToyModel::init(ModelConfig::default(), 5).unwrap();
        let one = input(1, 3, 8, 8, 3);
        let two = Tensor::stack(&[one.clone(), one.clone()]).unwrap();
        let out = m.forward(&two).unwrap();
        let stride = out.probs.len() / 2;
        assert_eq!(&out.probs.data()[..stride], &out.probs.data()[stride..]);
        assert_eq!(out.probs, m.forward(&two).unwrap().probs);
    }

    #[test]
    fn head_bias_gradient_matches_hand_derivative() {
        // zero weights: z = b everywhere, so dL/db_0 = p_0 - 1 for all-zero labels
        let m = ToyModel::zeros(small()).unwrap();
        let x = input(1, 2, 4, 4, 1);
        let tape = m.encode(&x).unwrap();
        let probs = softmax(&m.decode(&tape.features).unwrap(), 1).unwrap();
        let labels = vec![0; 16];
        let dz = weighted_ce_logit_grad(&probs, &labels, &[1.0 / 16.0; 16]).unwrap();
        let mut g = vec![0.0; m.num_params()];
        let dv = m.decoder_backward(&tape.features, &dz, &mut g).unwrap();
        m.encoder_backward(&tape, &dv, &mut g).unwrap();
        let hb = m.layout().head_b.clone();
        assert!((g[hb.start] + 0.5).abs() < 1e-15);
        assert!((g[hb.start + 1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_loss_region_gives_zero_gradients() {
        let m = ToyModel::init(small(), 3).unwrap();
        let x = input(2, 2, 6, 6, 4);
        let tape = m.encode(&x).unwrap();
        let probs = softmax(&m.decode(&tape.features).unwrap(), 1).unwrap();
        let dz = weighted_ce_logit_grad(&probs, &[1; 72], &[0.0; 72]).unwrap();
        let mut g = vec![0.0; m.num_params()];
        let dv = m.decoder_backward(&tape.features, &dz, &mut g).unwrap();
        m.encoder_backward(&tape, &dv, &mut g).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        let mut m = ToyModel::init(small(), 7).unwrap();
        m.randomize_all(0.5, &mut rng_for(8, &[]));
        let x = input(2, 2, 6, 4, 9);
        let labels: Vec<usize> = (0..48).map(|k| (k * 5 / 7) % 2).collect();
        let loss = |m: &ToyModel| supervised_loss(&m.forward(&x).unwrap().probs, &labels).unwrap();

        let tape = m.encode(&x).unwrap();
        let probs = softmax(&m.decode(&tape.features).unwrap(), 1).unwrap();
        let dz = weighted_ce_logit_grad(&probs, &labels, &vec![1.0 / 48.0; 48]).unwrap();
        let mut g = vec![0.0; m.num_params()];
        let dv = m.decoder_backward(&tape.features, &dz, &mut g).unwrap();
        m.encoder_backward(&tape, &dv, &mut g).unwrap();

        let eps = 1e-5;
        for i in 0..m.num_params() {
            let mut plus = m.clone();
            plus.params_mut()[i] += eps;
            let mut minus = m.clone();
            minus.params_mut()[i] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-6, "param {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        // <up(a), b> == <a, up_T(b)>
        let a: Vec<f64> = (0..8).map(|k| k as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..32).map(|k| ((k * 7) % 5) as f64).collect();
        let lhs: f64 = upsample2(&a, 2, 2, 2).iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(upsample2_backward(&b, 2, 2, 2)).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let big: Vec<f64> = (0..32).map(|k| k as f64).collect();
        let small: Vec<f64> = (0..8).map(|k| 1.0 + k as f64).collect();
        let lhs: f64 = avg_pool2(&big, 2, 4, 4).iter().zip(&small).map(|(x, y)| x * y).sum();
        let rhs: f64 = big.iter().zip(avg_pool2_backward(&small, 2, 4, 4)).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
