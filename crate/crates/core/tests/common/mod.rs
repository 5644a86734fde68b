//! Fixtures and brute-force oracles shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;
use slumseg::caat::ThresholdState;
use slumseg::split::{make_splits, Budget, SplitProtocol, Splits};
use slumseg::synth::{generate_corpus, ContrastLevel, SynthSpec, TileRecord};
use slumseg::train::{objective, objective_value, Dataset, Method, StepInputs, TrainConfig, TrainState, Trainer};

pub struct Fixture {
    pub tiles: Vec<TileRecord>,
    pub data: Dataset,
    pub splits: Splits,
}

impl Fixture {
    pub fn new(level: ContrastLevel, tiles: usize, tile_size: usize, seed: u64) -> Self {
        let spec = SynthSpec {
            tile_size,
            seed,
            ..SynthSpec::preset(level)
        };
        let tiles = generate_corpus(&spec, tiles).unwrap();
        let data = Dataset::from_tiles(&tiles).unwrap();
        let cats: Vec<_> = tiles.iter().map(|t| t.category).collect();
        let splits = make_splits(&cats, &SplitProtocol::default(), seed).unwrap();
        Self { tiles, data, splits }
    }

    /// 60 tiles of 16x16, cheap enough for per-parameter loops.
    pub fn small(seed: u64) -> Self {
        Self::new(ContrastLevel::Medium, 60, 16, seed)
    }

    pub fn trainer<'a>(&'a self, cfg: &'a TrainConfig, budget: f64) -> Trainer<'a> {
        let b = Budget::from_fraction(budget);
        Trainer::new(
            cfg,
            &self.data,
            self.splits.labeled(b).unwrap().to_vec(),
            self.splits.unlabeled(b).unwrap(),
        )
        .unwrap()
    }
}

pub fn small_config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        labeled_batch: 2,
        unlabeled_batch: 2,
        ..TrainConfig::default()
    }
}

/// A full-method state whose bank holds features from a few steps taken
/// under a permissive gate, then re-randomized so the objective is far
/// from any optimum.
pub fn random_instance(fx: &Fixture, cfg: &TrainConfig, seed: u64, tau: f64) -> (TrainState, StepInputs) {
    let trainer = fx.trainer(cfg, 0.3);
    let mut state = TrainState::new(cfg, Method::Full, seed).unwrap();
    state.thresholds = ThresholdState::fixed(2, 0.5).unwrap();
    for _ in 0..3 {
        trainer.step(&mut state).unwrap();
    }
    let mut rng = slumseg::rng::rng_for(seed, &[99]);
    let sd = rng.random_range(0.2..0.8);
    state.model.randomize_all(sd, &mut rng);
    state.thresholds = ThresholdState::fixed(2, tau).unwrap();
    let inputs = trainer.prepare(&mut state).unwrap();
    (state, inputs)
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over
/// every parameter, with central differences of step `eps`.
pub fn max_gradient_error(state: &TrainState, inputs: &StepInputs, eps: f64, floor: f64) -> f64 {
    let (_, analytic) = objective(&state.model, inputs).unwrap();
    let mut model = state.model.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let p = model.params()[i];
        model.params_mut()[i] = p + eps;
        let up = objective_value(&model, inputs).unwrap();
        model.params_mut()[i] = p - eps;
        let down = objective_value(&model, inputs).unwrap();
        model.params_mut()[i] = p;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
    }
    worst
}

/// Vertices of a Koch snowflake with `iterations` refinements of an
/// equilateral triangle of side `base`, origin at `offset`.
pub fn koch_snowflake(iterations: u32, base: f64, offset: (f64, f64)) -> Vec<(f64, f64)> {
    let h = base * 3f64.sqrt() / 2.0;
    let (ox, oy) = offset;
    // clockwise in image coordinates so the bumps point outward
    let mut pts = vec![(ox, oy + h / 3.0), (ox + base, oy + h / 3.0), (ox + base / 2.0, oy + h + h / 3.0)];
    let (s, c) = (-(60f64.to_radians()).sin(), 60f64.to_radians().cos());
    for _ in 0..iterations {
        let mut next = Vec::with_capacity(pts.len() * 4);
        for i in 0..pts.len() {
            let (ax, ay) = pts[i];
            let (bx, by) = pts[(i + 1) % pts.len()];
            let (dx, dy) = ((bx - ax) / 3.0, (by - ay) / 3.0);
            let p1 = (ax + dx, ay + dy);
            let p2 = (ax + 2.0 * dx, ay + 2.0 * dy);
            let peak = (p1.0 + dx * c - dy * s, p1.1 + dx * s + dy * c);
            next.extend([(ax, ay), p1, peak, p2]);
        }
        pts = next;
    }
    pts
}

/// Even-odd fill of a polygon sampled at pixel centres.
pub fn rasterize_polygon(poly: &[(f64, f64)], width: usize, height: usize) -> slumseg::raster::Mask {
    slumseg::raster::Mask::from_fn(width, height, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut inside = false;
        for i in 0..poly.len() {
            let (ax, ay) = poly[i];
            let (bx, by) = poly[(i + 1) % poly.len()];
            if (ay > py) != (by > py) && px < ax + (py - ay) * (bx - ax) / (by - ay) {
                inside = !inside;
            }
        }
        inside
    })
}
