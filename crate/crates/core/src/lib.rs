//! Unsupervised denoising with a noise-model VAE and a distilled direct
//! denoiser.
//!
//! The VAE learns a distribution over clean signals consistent with a noisy
//! image under a known Gaussian noise model. Averaging many of its samples
//! approximates the MMSE (mean) or MMAE (median) estimate; the direct
//! networks are trained on those samples during the same run and predict
//! the same estimates in one forward pass.

pub mod data;
pub mod direct;
pub mod error;
pub mod eval;
pub mod inference;
pub mod nn;
pub mod noise_model;
pub mod training;
pub mod vae;

pub use data::{Dataset, DatasetSpec, ImagePair, ImagePlane, SignalFamily};
pub use direct::{DirectDenoiser, LossKind, UNetSpec};
pub use error::{Error, Result};
pub use inference::{Aggregator, ConsensusSpec, Predictor, Sampler};
pub use noise_model::{GaussianNoiseModel, NoiseModel};
pub use training::{Normalization, RunConfig, TrainState, Trainer};
pub use vae::{DenoisingVae, VaeSpec};
