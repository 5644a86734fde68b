//! Semi-supervised segmentation at desk scale: class-aware adaptive
//! thresholding, a prototype-bank reliability weight, the composite
//! weak-to-strong consistency objective, a toy encoder-decoder to train it,
//! and a suite of dataset-quality metrics.

pub mod augment;
pub mod bank;
pub mod caat;
pub mod checkpoint;
pub mod config;
pub mod dataq;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod raster;
pub mod rng;
pub mod split;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Kind, Tensor};
