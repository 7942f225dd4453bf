//! Run configuration, deserialised from one JSON file.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::direct::{LossKind, UNetSpec};
use crate::error::{Error, Result};
use crate::eval::BenchConfig;
use crate::inference::InferenceConfig;
use crate::training::optim::LrSchedule;
use crate::vae::VaeSpec;

/// Where the data comes from. `synth` writes `spec` to `path`; the other
/// commands read `path` when it is set and otherwise generate `spec` in memory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: Option<PathBuf>,
    pub spec: Option<DatasetSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectConfig {
    pub unet: UNetSpec,
    /// One independently trained network per entry, all sharing the VAE's
    /// samples as targets.
    pub loss_kinds: Vec<LossKind>,
}

impl Default for DirectConfig {
    fn default() -> Self {
        Self { unet: UNetSpec::default(), loss_kinds: vec![LossKind::L1, LossKind::L2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub patch_size: usize,
    pub total_steps: u64,
    /// Steps between validations (and metrics rows).
    pub val_interval: u64,
    pub lr: LrSchedule,
    /// Global gradient-norm bound, applied to each model separately.
    pub grad_clip: f64,
    /// Ramp the KL weight linearly from 0 to 1 over the first 5% of steps.
    pub kl_warmup: bool,
    pub seed: u64,
    /// Seed of the fixed latent draws used during validation.
    pub val_seed: u64,
    /// Also write a numbered checkpoint every this many steps. The final step
    /// is always checkpointed.
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            patch_size: 64,
            total_steps: 10_000,
            val_interval: 250,
            lr: LrSchedule::default(),
            grad_clip: 5.0,
            kl_warmup: false,
            seed: 0,
            val_seed: 1,
            checkpoint_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub vae: VaeSpec,
    pub direct: DirectConfig,
    pub training: TrainingConfig,
    pub inference: InferenceConfig,
    pub bench: BenchConfig,
    /// Checkpoints, metrics and benchmark outputs go here.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            vae: VaeSpec::default(),
            direct: DirectConfig::default(),
            training: TrainingConfig::default(),
            inference: InferenceConfig::default(),
            bench: BenchConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(spec) = &self.dataset.spec {
            spec.validate()?;
        }
        self.vae.validate()?;
        self.direct.unet.validate()?;
        let kinds = &self.direct.loss_kinds;
        if kinds.is_empty() {
            return Err(Error::invalid("direct.loss_kinds", "at least one loss kind is required"));
        }
        if (1..kinds.len()).any(|i| kinds[..i].contains(&kinds[i])) {
            return Err(Error::invalid("direct.loss_kinds", "duplicate loss kind"));
        }
        let t = &self.training;
        for (field, v) in [
            ("training.batch_size", t.batch_size as u64),
            ("training.patch_size", t.patch_size as u64),
            ("training.total_steps", t.total_steps),
            ("training.val_interval", t.val_interval),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be >= 1"));
            }
        }
        if t.checkpoint_every == Some(0) {
            return Err(Error::invalid("training.checkpoint_every", "must be >= 1"));
        }
        let m = self.multiple();
        if t.patch_size % m != 0 {
            return Err(Error::invalid(
                "training.patch_size",
                format!("{} is not divisible by {m}, required by the network depths", t.patch_size),
            ));
        }
        t.lr.validate()?;
        if !(t.grad_clip.is_finite() && t.grad_clip > 0.0) {
            return Err(Error::invalid("training.grad_clip", "must be > 0"));
        }
        self.inference.validate()?;
        self.bench.validate()?;
        Ok(())
    }

    /// Side length every network input must be divisible by.
    pub fn multiple(&self) -> usize {
        self.vae.multiple().max(self.direct.unet.multiple())
    }

    /// Sets every seed in the configuration to `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        if let Some(spec) = &mut self.dataset.spec {
            spec.seed = seed;
        }
        self.training.seed = seed;
        self.training.val_seed = seed;
        self.inference.seed = seed;
        self.bench.seed = seed;
    }

    /// Plateau patience in validations: epochs of `count_train` patches,
    /// converted to steps and then to validation intervals.
    pub fn patience_validations(&self, count_train: usize) -> usize {
        let t = &self.training;
        let steps_per_epoch = count_train.div_ceil(t.batch_size).max(1) as f64;
        let v = (t.lr.patience_epochs * steps_per_epoch / t.val_interval as f64).ceil();
        (v as usize).max(1)
    }

    /// KL weight at a 0-based step.
    pub fn kl_weight(&self, step: u64) -> f64 {
        if !self.training.kl_warmup {
            return 1.0;
        }
        let ramp = (self.training.total_steps as f64 * 0.05).ceil().max(1.0);
        ((step + 1) as f64 / ramp).min(1.0)
    }
}
