//! Training loop wiring the labeled, weak, two strong and feature-perturbed
//! streams through thresholding, the prototype bank and the composite
//! objective.
//!
//! One step runs, in order: weak forward, per-class confidence, threshold
//! update, pseudo-labels and admission mask, reliability weights, strong
//! and perturbed forwards, loss, backward, SGD update, bank enqueue.
//! Pseudo-labels, mask and weights are constants of the objective.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{feature_perturb, strong_augment_pair, weak_augment, AugmentSpec, ChannelDropout, MixRecord};
use crate::augment::mix_planes;
use crate::bank::{collect_valid_features, BankConfig, PrototypeBank};
use crate::caat::{admission_mask, batch_class_confidence, Admission, ThresholdState};
use crate::error::{Error, Result};
use crate::metrics::{Confusion, IouReport};
use crate::model::{EncoderTape, ModelConfig, ToyModel};
use crate::objective::{
    breakdown, fp_loss, strong_loss, supervised_loss, weighted_ce_logit_grad, LossBreakdown, LossComponents,
    LossWeights,
};
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{derive_seed, rng_for, stream};
use crate::synth::{Category, TileRecord};
use crate::tensor::{argmax_classes, resize_plane_nearest, softmax, Kind, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Supervised,
    StaticThreshold,
    CaatOnly,
    BankOnly,
    Full,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Supervised,
        Method::StaticThreshold,
        Method::CaatOnly,
        Method::BankOnly,
        Method::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::StaticThreshold => "static_threshold",
            Method::CaatOnly => "caat_only",
            Method::BankOnly => "bank_only",
            Method::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }

    pub fn uses_unlabeled(self) -> bool {
        self != Method::Supervised
    }

    pub fn adaptive_threshold(self) -> bool {
        matches!(self, Method::CaatOnly | Method::Full)
    }

    pub fn uses_bank(self) -> bool {
        matches!(self, Method::BankOnly | Method::Full)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub momentum: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Global gate of the non-adaptive methods.
    pub static_tau: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            momentum: crate::caat::DEFAULT_MOMENTUM,
            tau_min: crate::caat::DEFAULT_TAU_MIN,
            tau_max: crate::caat::DEFAULT_TAU_MAX,
            static_tau: crate::caat::STATIC_TAU,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Unlabeled losses are inactive for this many initial steps.
    pub warmup_steps: u64,
    /// Sampling weight of tiles containing object pixels, relative to
    /// background-only tiles.
    pub minority_oversample: f64,
    pub model: ModelConfig,
    pub optimizer: SgdConfig,
    pub augment: AugmentSpec,
    pub threshold: ThresholdConfig,
    pub bank: BankConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            labeled_batch: 8,
            unlabeled_batch: 8,
            warmup_steps: 0,
            minority_oversample: 2.0,
            model: ModelConfig::default(),
            optimizer: SgdConfig::default(),
            augment: AugmentSpec::default(),
            threshold: ThresholdConfig::default(),
            bank: BankConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::invalid("steps and batch sizes must be positive"));
        }
        if !(self.minority_oversample > 0.0 && self.minority_oversample.is_finite()) {
            return Err(Error::invalid("minority_oversample must be positive"));
        }
        if self.bank.feature_dim != self.model.feature_dim {
            return Err(Error::invalid(format!(
                "bank feature_dim {} differs from model feature_dim {}",
                self.bank.feature_dim, self.model.feature_dim
            )));
        }
        if !(self.loss.unlabeled >= 0.0 && self.loss.unlabeled.is_finite()) {
            return Err(Error::invalid("unlabeled loss weight must be non-negative"));
        }
        self.optimizer.validate()?;
        self.augment.validate()?;
        self.thresholds(Method::Full)?;
        Ok(())
    }

    pub fn thresholds(&self, method: Method) -> Result<ThresholdState> {
        let t = &self.threshold;
        let c = self.model.num_classes;
        if method.adaptive_threshold() {
            ThresholdState::new(c, t.momentum, t.tau_min, t.tau_max)
        } else {
            ThresholdState::fixed(c, t.static_tau)
        }
    }
}

/// Tiles held as `[3, H, W]` planes with per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<Vec<usize>>,
    pub categories: Vec<Category>,
}

impl Dataset {
    /// Tile `i` must carry id `i`.
    pub fn from_tiles(tiles: &[TileRecord]) -> Result<Self> {
        let first = tiles.first().ok_or(Error::Empty("no tiles"))?;
        let (width, height) = (first.image.width, first.image.height);
        let mut images = Vec::with_capacity(tiles.len());
        let mut labels = Vec::with_capacity(tiles.len());
        for (i, t) in tiles.iter().enumerate() {
            if t.id != i {
                return Err(Error::invalid(format!("tile at position {i} has id {}", t.id)));
            }
            if (t.image.width, t.image.height) != (width, height) {
                return Err(Error::ShapeMismatch {
                    expected: vec![height, width],
                    actual: vec![t.image.height, t.image.width],
                });
            }
            images.push(t.image.to_tensor().into_data());
            labels.push(t.mask.labels());
        }
        Ok(Self {
            height,
            width,
            images,
            labels,
            categories: tiles.iter().map(|t| t.category).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self, ids: &[usize]) -> Tensor {
        let data = ids.iter().flat_map(|&i| self.images[i].iter().copied()).collect();
        Tensor::new(vec![ids.len(), 3, self.height, self.width], data)
            .expect("tiles share a shape")
            .tagged_unchecked(Kind::Image)
    }

    pub fn labels(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().flat_map(|&i| self.labels[i].iter().copied()).collect()
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub method: Method,
    pub seed: u64,
    pub model: ToyModel,
    pub optimizer: Sgd,
    pub thresholds: ThresholdState,
    pub bank: PrototypeBank,
}

impl TrainState {
    pub fn new(config: &TrainConfig, method: Method, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = ToyModel::init(config.model, seed)?;
        let optimizer = Sgd::new(config.optimizer, model.num_params(), config.steps)?;
        Ok(Self {
            method,
            seed,
            optimizer,
            thresholds: config.thresholds(method)?,
            bank: PrototypeBank::new(config.model.num_classes, config.bank)?,
            model,
        })
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }
}

/// A per-view target in the label frame of that view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTarget {
    pub image: Tensor,
    pub pseudo: Vec<usize>,
    pub mask: Vec<bool>,
    pub omega: Vec<f64>,
    pub mix: Vec<MixRecord>,
}

#[derive(Clone, Debug)]
pub struct UnlabeledInputs {
    pub ids: Vec<usize>,
    pub weak: Tensor,
    /// Pseudo-labels of the weak view at feature resolution.
    pub admission: Admission,
    /// Reliability weights of the weak view at feature resolution.
    pub omega_half: Vec<f64>,
    /// Weak-frame pseudo-labels and mask at input resolution.
    pub pseudo: Vec<usize>,
    pub mask: Vec<bool>,
    pub views: [ViewTarget; 2],
    pub dropout: ChannelDropout,
    pub weak_tape: EncoderTape,
}

/// Constants of one step's objective.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub step: u64,
    pub labeled_ids: Vec<usize>,
    pub labeled: Tensor,
    pub labels: Vec<usize>,
    pub unlabeled: Option<UnlabeledInputs>,
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub thresholds: Vec<f64>,
    pub lr: f64,
}

/// Labeled and unlabeled pools plus the data they index.
pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub data: &'a Dataset,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    sampler: WeightedIndex<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, data: &'a Dataset, labeled: Vec<usize>, unlabeled: Vec<usize>) -> Result<Self> {
        config.validate()?;
        if labeled.is_empty() {
            return Err(Error::Empty("no labeled tiles"));
        }
        if let Some(bad) = labeled.iter().chain(&unlabeled).find(|&&i| i >= data.len()) {
            return Err(Error::invalid(format!("tile {bad} is outside the dataset")));
        }
        let weights: Vec<f64> = labeled
            .iter()
            .map(|&i| match data.categories[i] {
                Category::NonSlum => 1.0,
                _ => config.minority_oversample,
            })
            .collect();
        let sampler = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Self {
            config,
            data,
            labeled,
            unlabeled,
            sampler,
        })
    }

    pub fn sample_labeled(&self, seed: u64, step: u64) -> Vec<usize> {
        let mut rng = rng_for(seed, &[stream::LABELED_BATCH, step]);
        (0..self.config.labeled_batch)
            .map(|_| self.labeled[self.sampler.sample(&mut rng)])
            .collect()
    }

    pub fn sample_unlabeled(&self, seed: u64, step: u64) -> Vec<usize> {
        let mut rng = rng_for(seed, &[stream::UNLABELED_BATCH, step]);
        (0..self.config.unlabeled_batch)
            .map(|_| self.unlabeled[rng.random_range(0..self.unlabeled.len())])
            .collect()
    }

    /// Draws the step's batches and builds every constant of the objective.
    /// Updates the thresholds (the only state touched before the loss).
    pub fn prepare(&self, state: &mut TrainState) -> Result<StepInputs> {
        let step = state.step();
        let seed = state.seed;
        let labeled_ids = self.sample_labeled(seed, step);
        self.prepare_with(state, labeled_ids)
    }

    /// As [`Trainer::prepare`] with a given labeled batch.
    pub fn prepare_with(&self, state: &mut TrainState, labeled_ids: Vec<usize>) -> Result<StepInputs> {
        let step = state.step();
        let seed = state.seed;
        let cfg = self.config;
        let (h, w) = (self.data.height, self.data.width);

        let (labeled, geo) = weak_augment(
            &self.data.images(&labeled_ids),
            &cfg.augment,
            derive_seed(seed, &[stream::WEAK_LABELED, step]),
        )?;
        let raw_labels = self.data.labels(&labeled_ids);
        let labels = geo
            .iter()
            .enumerate()
            .flat_map(|(i, g)| g.apply_planes(&raw_labels[i * h * w..(i + 1) * h * w], 1, h, w))
            .collect();

        let mut weights = cfg.loss;
        if step < cfg.warmup_steps {
            weights.unlabeled = 0.0;
        }
        let unlabeled = if state.method.uses_unlabeled() && !self.unlabeled.is_empty() {
            Some(self.prepare_unlabeled(state, step)?)
        } else {
            None
        };
        Ok(StepInputs {
            step,
            labeled_ids,
            labeled,
            labels,
            unlabeled,
            weights,
        })
    }

    fn prepare_unlabeled(&self, state: &mut TrainState, step: u64) -> Result<UnlabeledInputs> {
        let seed = state.seed;
        let cfg = self.config;
        let (h, w) = (self.data.height, self.data.width);
        let ids = self.sample_unlabeled(seed, step);
        let (weak, _) = weak_augment(
            &self.data.images(&ids),
            &cfg.augment,
            derive_seed(seed, &[stream::WEAK_UNLABELED, step]),
        )?;
        let n = ids.len();

        let weak_tape = state.model.encode(&weak)?;
        let probs_half = softmax(&state.model.decode_half(&weak_tape.features)?, 1)?;
        state.thresholds.update(&batch_class_confidence(&probs_half)?)?;
        let admission = admission_mask(&probs_half, &state.thresholds)?;
        let (_, _, hh, hw) = weak_tape.features.dims4()?;
        let omega_half = if state.method.uses_bank() {
            state
                .bank
                .feature_weight_map(&weak_tape.features, &admission.labels)?
                .into_data()
        } else {
            vec![1.0; n * hh * hw]
        };

        let up = |v: &[usize]| resize_plane_nearest(v, n, (hh, hw), (h, w));
        let pseudo = up(&admission.labels);
        let mask = resize_plane_nearest(&admission.mask, n, (hh, hw), (h, w));
        let omega = resize_plane_nearest(&omega_half, n, (hh, hw), (h, w));

        let pair = strong_augment_pair(&weak, &cfg.augment, derive_seed(seed, &[stream::STRONG, step]))?;
        let views = pair.map(|(image, mix)| -> Result<ViewTarget> {
            Ok(ViewTarget {
                pseudo: mix_planes(&pseudo, n, 1, h, w, &mix)?,
                mask: mix_planes(&mask, n, 1, h, w, &mix)?,
                omega: mix_planes(&omega, n, 1, h, w, &mix)?,
                image,
                mix,
            })
        });
        let [a, b] = views;
        let (_, dropout) = feature_perturb(
            &weak_tape.features,
            cfg.augment.fp_dropout_rate,
            derive_seed(seed, &[stream::FEATURE_PERTURB, step]),
        )?;
        Ok(UnlabeledInputs {
            ids,
            weak,
            admission,
            omega_half,
            pseudo,
            mask,
            views: [a?, b?],
            dropout,
            weak_tape,
        })
    }

    /// Runs one full step and returns its log record.
    pub fn step(&self, state: &mut TrainState) -> Result<StepRecord> {
        let inputs = self.prepare(state)?;
        self.finish(state, &inputs)
    }

    /// Loss, backward, SGD update and bank enqueue for prepared inputs.
    pub fn finish(&self, state: &mut TrainState, inputs: &StepInputs) -> Result<StepRecord> {
        let tape = inputs.unlabeled.as_ref().map(|u| &u.weak_tape);
        let (components, grads) = objective_with_tape(&state.model, inputs, tape, true)?;
        let num_classes = self.config.model.num_classes;
        let (admitted, mean_omega) = match &inputs.unlabeled {
            Some(u) => (
                u.admission.admitted_fraction(num_classes),
                u.omega_half.iter().sum::<f64>() / u.omega_half.len() as f64,
            ),
            None => (vec![0.0; num_classes], 1.0),
        };
        let losses = breakdown(&components, &inputs.weights, admitted, mean_omega)?;
        let lr = state.optimizer.current_lr();
        state.optimizer.apply(state.model.params_mut(), &grads)?;
        if let (Some(u), true) = (&inputs.unlabeled, state.method.uses_bank()) {
            let valid = collect_valid_features(
                &u.weak_tape.features,
                &u.admission.labels,
                &u.admission.mask,
                num_classes,
            )?;
            state
                .bank
                .enqueue(&valid, inputs.step, derive_seed(state.seed, &[stream::BANK, inputs.step]))?;
        }
        Ok(StepRecord {
            step: inputs.step,
            losses,
            thresholds: state.thresholds.effective_thresholds(),
            lr,
        })
    }

    /// Trains until `state` has completed `until` steps, passing every record
    /// to `log`.
    pub fn run(&self, state: &mut TrainState, until: u64, mut log: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        while state.step() < until.min(self.config.steps) {
            let record = self.step(state)?;
            log(&record)?;
        }
        Ok(())
    }
}

/// Loss components and the analytic gradient of the total loss with
/// respect to every parameter, recomputing the weak-view encoder pass.
pub fn objective(model: &ToyModel, inputs: &StepInputs) -> Result<(LossComponents, Vec<f64>)> {
    objective_with_tape(model, inputs, None, true)
}

/// Total loss of [`objective`] without the gradient.
pub fn objective_value(model: &ToyModel, inputs: &StepInputs) -> Result<f64> {
    let (c, _) = objective_with_tape(model, inputs, None, false)?;
    crate::objective::total_loss(&c, &inputs.weights)
}

fn objective_with_tape(
    model: &ToyModel,
    inputs: &StepInputs,
    cached: Option<&EncoderTape>,
    want_grads: bool,
) -> Result<(LossComponents, Vec<f64>)> {
    let [c_sup, c_s1, c_s2, c_fp] = inputs.weights.coefficients();
    let mut grads = vec![0.0; model.num_params()];
    let mut c = LossComponents::default();

    let tape = model.encode(&inputs.labeled)?;
    let probs = softmax(&model.decode(&tape.features)?, 1)?;
    c.sup = supervised_loss(&probs, &inputs.labels)?;
    let scale = vec![c_sup / inputs.labels.len() as f64; inputs.labels.len()];
    if want_grads {
        backprop(model, &tape, &tape.features, None, &probs, &inputs.labels, &scale, &mut grads)?;
    }

    let Some(u) = &inputs.unlabeled else {
        return Ok((c, grads));
    };
    for (k, (view, coef)) in u.views.iter().zip([c_s1, c_s2]).enumerate() {
        let tape = model.encode(&view.image)?;
        let probs = softmax(&model.decode(&tape.features)?, 1)?;
        let value = strong_loss(&probs, &view.pseudo, &view.mask, &view.omega)?;
        if k == 0 {
            c.s1 = value;
        } else {
            c.s2 = value;
        }
        let total = view.pseudo.len() as f64;
        let scale: Vec<f64> = view
            .mask
            .iter()
            .zip(&view.omega)
            .map(|(&m, &o)| if m { coef * o / total } else { 0.0 })
            .collect();
        if want_grads {
            backprop(model, &tape, &tape.features, None, &probs, &view.pseudo, &scale, &mut grads)?;
        }
    }

    let fresh;
    let weak_tape = match cached {
        Some(t) => t,
        None => {
            fresh = model.encode(&u.weak)?;
            &fresh
        }
    };
    let perturbed = u.dropout.apply(&weak_tape.features)?;
    let probs = softmax(&model.decode(&perturbed)?, 1)?;
    c.fp = fp_loss(&probs, &u.pseudo, &u.mask)?;
    let total = u.pseudo.len() as f64;
    let scale: Vec<f64> = u.mask.iter().map(|&m| if m { c_fp / total } else { 0.0 }).collect();
    if want_grads {
        backprop(model, weak_tape, &perturbed, Some(&u.dropout), &probs, &u.pseudo, &scale, &mut grads)?;
    }
    Ok((c, grads))
}

/// Backward of `sum_i scale_i * ce_i` through decoder and encoder. `v` is
/// the decoder input, equal to the tape's features unless `dropout` was
/// applied to them.
#[allow(clippy::too_many_arguments)]
fn backprop(
    model: &ToyModel,
    tape: &EncoderTape,
    v: &Tensor,
    dropout: Option<&ChannelDropout>,
    probs: &Tensor,
    labels: &[usize],
    scale: &[f64],
    grads: &mut [f64],
) -> Result<()> {
    if scale.iter().all(|&s| s == 0.0) {
        return Ok(());
    }
    let dlogits = weighted_ce_logit_grad(probs, labels, scale)?;
    let mut dv = model.decoder_backward(v, &dlogits, grads)?;
    if let Some(d) = dropout {
        dv = d.apply(&dv)?;
    }
    model.encoder_backward(tape, &dv, grads)
}

/// Accumulated confusion over `ids`, predicted in batches.
pub fn evaluate(model: &ToyModel, data: &Dataset, ids: &[usize]) -> Result<IouReport> {
    if ids.is_empty() {
        return Err(Error::Empty("evaluation set has no tiles"));
    }
    let mut confusion = Confusion::new(model.config().num_classes);
    for chunk in ids.chunks(32) {
        let logits = model.decode(&model.encode(&data.images(chunk))?.features)?;
        let (pred, _) = argmax_classes(&logits);
        confusion.add(&pred, &data.labels(chunk))?;
    }
    Ok(confusion.report())
}

/// Argmax prediction for a batch of images, one label per pixel.
pub fn predict(model: &ToyModel, images: &Tensor) -> Result<Vec<usize>> {
    let logits = model.decode(&model.encode(images)?.features)?;
    Ok(argmax_classes(&logits).0)
}
