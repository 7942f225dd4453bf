//! Simultaneous training of the VAE and the direct networks.
//!
//! Every step draws one patch batch `x`, takes one VAE update on the ELBO,
//! and then one update per direct network on its loss against the VAE
//! sample drawn *before* that update, treated as a constant target.

pub mod checkpoint;
pub mod config;
pub mod normalize;
pub mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use dud_tensor::{Graph, Tensor, Var};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{sample_patch_batch, Dataset, ImagePlane};
use crate::direct::{DirectDenoiser, LossKind};
use crate::error::{Error, Result};
use crate::inference::{Predictor, Sampler};
use crate::noise_model::GaussianNoiseModel;
use crate::vae::{DenoisingVae, VaeLossBreakdown};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{DatasetConfig, DirectConfig, RunConfig, TrainingConfig};
pub use normalize::Normalization;
pub use optim::{clip_global_norm, lr_plateau_update, LrSchedule, OptimizerState, Plateau};

/// One direct network with its own optimizer.
#[derive(Clone, Debug)]
pub struct Head {
    pub dd: DirectDenoiser,
    pub opt: OptimizerState,
    pub best_val: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub vae: DenoisingVae,
    pub vae_opt: OptimizerState,
    pub heads: Vec<Head>,
    /// Completed steps.
    pub step: u64,
    /// Drives patch sampling and the VAE's training noise.
    pub rng: ChaCha8Rng,
    pub normalization: Normalization,
    /// Noise model in raw pixel units.
    pub raw_noise: GaussianNoiseModel,
    pub best_vae_val: f64,
}

impl TrainState {
    /// Fresh models and optimizers. `train_noisy` are the raw training images
    /// the normalisation is fitted on.
    pub fn new(config: &RunConfig, train_noisy: &[ImagePlane], raw_noise: GaussianNoiseModel) -> Result<Self> {
        config.validate()?;
        let normalization = Normalization::fit(train_noisy)?;
        let mut seeds = ChaCha8Rng::seed_from_u64(config.training.seed);
        let vae = DenoisingVae::new(config.vae.clone(), seeds.next_u64())?;
        let lr = config.training.lr.initial;
        let plateau = Plateau::new(config.patience_validations(train_noisy.len()), &config.training.lr);
        let vae_opt = OptimizerState::new(vae.params(), lr, plateau);
        let mut heads = Vec::new();
        for &kind in &config.direct.loss_kinds {
            let dd = DirectDenoiser::new(config.direct.unet.clone(), kind, seeds.next_u64())?;
            let opt = OptimizerState::new(dd.params(), lr, plateau);
            heads.push(Head { dd, opt, best_val: f64::INFINITY });
        }
        let rng = ChaCha8Rng::seed_from_u64(seeds.next_u64());
        let state = Self {
            vae,
            vae_opt,
            heads,
            step: 0,
            rng,
            normalization,
            raw_noise,
            best_vae_val: f64::INFINITY,
        };
        state.noise()?;
        Ok(state)
    }

    /// Noise model in normalised units.
    pub fn noise(&self) -> Result<GaussianNoiseModel> {
        self.normalization.noise_model(&self.raw_noise)
    }

    pub fn head(&self, kind: LossKind) -> Option<&Head> {
        self.heads.iter().find(|h| h.dd.loss_kind() == kind)
    }

    /// Fails with [`Error::SpecMismatch`] unless the architecture matches `config`.
    pub fn ensure_matches(&self, config: &RunConfig) -> Result<()> {
        if self.vae.spec() != &config.vae {
            return Err(Error::SpecMismatch(format!(
                "VAE spec {:?} differs from configured {:?}",
                self.vae.spec(),
                config.vae
            )));
        }
        let kinds: Vec<LossKind> = self.heads.iter().map(|h| h.dd.loss_kind()).collect();
        if kinds != config.direct.loss_kinds {
            return Err(Error::SpecMismatch(format!(
                "direct loss kinds {kinds:?} differ from configured {:?}",
                config.direct.loss_kinds
            )));
        }
        for h in &self.heads {
            if h.dd.spec() != &config.direct.unet {
                return Err(Error::SpecMismatch(format!(
                    "UNet spec {:?} differs from configured {:?}",
                    h.dd.spec(),
                    config.direct.unet
                )));
            }
        }
        Ok(())
    }
}

/// Per-step losses.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub vae: VaeLossBreakdown,
    pub direct: Vec<(LossKind, f64)>,
}

/// Output of [`co_train_step`].
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub metrics: StepMetrics,
    /// The VAE samples used as direct targets.
    pub targets: Tensor,
}

/// Direct loss of `dd(x)` against `sample`, with `sample` detached so no
/// gradient can reach whatever produced it.
pub fn direct_loss(g: &mut Graph, dd: &DirectDenoiser, x: Var, sample: Var) -> Result<(Var, f64)> {
    let target = g.detach(sample);
    let y = dd.forward(g, x)?;
    let target = g.value(target).clone();
    dd.loss(g, y, &target)
}

/// One update of a direct network towards constant `targets`.
pub fn direct_phase(
    dd: &mut DirectDenoiser,
    opt: &mut OptimizerState,
    x: &Tensor,
    targets: &Tensor,
    grad_clip: f64,
) -> Result<f64> {
    // The graph shares parameter buffers; drop it before updating in place.
    let (mut grads, value) = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = dd.forward(&mut g, xv)?;
        let (loss, value) = dd.loss(&mut g, y, targets)?;
        (g.backward(loss).take_store(dd.params()), value)
    };
    clip_global_norm(&mut grads, grad_clip);
    opt.step(dd.params_mut(), &grads);
    Ok(value)
}

/// The four-phase co-training step on a normalised batch `x`.
pub fn co_train_step(state: &mut TrainState, x: &Tensor, kl_weight: f64, grad_clip: f64) -> Result<StepOutput> {
    let step = state.step + 1;
    let noise = state.noise()?;

    // (1) VAE forward and a sample per input.
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let fwd = state.vae.loss(&mut g, &noise, xv, &mut state.rng, kl_weight)?;
    let b = fwd.breakdown;
    if !(b.total.is_finite() && b.reconstruction.is_finite() && b.kl.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            breakdown: format!("vae reconstruction={} kl={} total={}", b.reconstruction, b.kl, b.total),
        });
    }
    let targets = g.value(fwd.sample).clone();

    // (2) VAE update.
    let mut grads = g.backward(fwd.total).take_store(state.vae.params());
    drop(g);
    clip_global_norm(&mut grads, grad_clip);
    state.vae_opt.step(state.vae.params_mut(), &grads);

    // (3, 4) Direct forward on the same x and update against the step-1 targets.
    let mut direct = Vec::with_capacity(state.heads.len());
    for head in &mut state.heads {
        let value = direct_phase(&mut head.dd, &mut head.opt, x, &targets, grad_clip)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: format!("direct {} loss={value}", head.dd.loss_kind()),
            });
        }
        direct.push((head.dd.loss_kind(), value));
    }
    state.step = step;
    Ok(StepOutput { metrics: StepMetrics { step, vae: b, direct }, targets })
}

/// Validation losses, averaged over images.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationMetrics {
    pub vae: VaeLossBreakdown,
    pub direct: Vec<(LossKind, f64)>,
}

/// Crops every image to the largest top-left window whose sides are
/// multiples of `multiple`.
pub fn crop_to_multiple(images: &[ImagePlane], multiple: usize) -> Result<Vec<ImagePlane>> {
    images
        .iter()
        .enumerate()
        .map(|(index, im)| {
            let (h, w) = (im.height() / multiple * multiple, im.width() / multiple * multiple);
            if h == 0 || w == 0 {
                return Err(Error::ImageTooSmall { index, height: im.height(), width: im.width(), required: multiple });
            }
            Ok(im.window(0, 0, h, w))
        })
        .collect()
}

/// Direct validation losses of arbitrary predictors against draws of
/// `sampler`, one per image from a generator seeded by `seed`.
pub fn validate_direct<S: Sampler + ?Sized>(
    sampler: &S,
    heads: &[(LossKind, &dyn Predictor)],
    val: &[ImagePlane],
    seed: u64,
) -> Result<Vec<(LossKind, f64)>> {
    if val.is_empty() {
        return Err(Error::invalid("validation set", "is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut totals = vec![0.0; heads.len()];
    for im in val {
        let x = im.to_tensor();
        let s = sampler.sample(&x, &mut rng)?;
        for ((kind, p), t) in heads.iter().zip(&mut totals) {
            *t += kind.evaluate(&p.predict(&x)?, &s)?;
        }
    }
    Ok(heads.iter().zip(totals).map(|((k, _), t)| (*k, t / val.len() as f64)).collect())
}

/// VAE and direct validation losses on normalised images whose sides are
/// multiples of both networks' requirements. Uses a generator seeded by
/// `seed`, so repeated calls agree.
pub fn validate(state: &TrainState, val: &[ImagePlane], seed: u64) -> Result<ValidationMetrics> {
    if val.is_empty() {
        return Err(Error::invalid("validation set", "is empty"));
    }
    let noise = state.noise()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut recon, mut kl) = (0.0, 0.0);
    let mut direct = vec![0.0; state.heads.len()];
    for im in val {
        let mut g = Graph::new();
        let x = g.constant(im.to_tensor());
        let fwd = state.vae.loss(&mut g, &noise, x, &mut rng, 1.0)?;
        recon += fwd.breakdown.reconstruction;
        kl += fwd.breakdown.kl;
        for (head, d) in state.heads.iter().zip(&mut direct) {
            let (_, value) = direct_loss(&mut g, &head.dd, x, fwd.sample)?;
            *d += value;
        }
    }
    let n = val.len() as f64;
    let (recon, kl) = (recon / n, kl / n);
    Ok(ValidationMetrics {
        vae: VaeLossBreakdown { reconstruction: recon, kl, kl_weight: 1.0, total: recon + kl },
        direct: state.heads.iter().zip(direct).map(|(h, d)| (h.dd.loss_kind(), d / n)).collect(),
    })
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub vae_recon: f64,
    pub vae_kl: f64,
    pub direct_l1: Option<f64>,
    pub direct_l2: Option<f64>,
    pub lr_vae: f64,
    /// Learning rate of the first direct network.
    pub lr_dd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub best_vae_val: f64,
    pub best_direct_val: Vec<(LossKind, f64)>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Drives [`co_train_step`] over a dataset with periodic validation,
/// plateau scheduling, metrics logging and checkpointing.
pub struct Trainer {
    config: RunConfig,
    /// Normalised noisy training images.
    train: Vec<ImagePlane>,
    /// Normalised noisy validation images, cropped to the network multiple.
    val: Vec<ImagePlane>,
    pub state: TrainState,
    out_dir: Option<PathBuf>,
    pub history: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(config: RunConfig, data: &Dataset, raw_noise: GaussianNoiseModel) -> Result<Self> {
        let train_raw = Dataset::noisy(&data.train);
        let state = TrainState::new(&config, &train_raw, raw_noise)?;
        Self::with_state(config, data, state)
    }

    /// Continues from a loaded state; the dataset must be the one it was trained on.
    pub fn with_state(config: RunConfig, data: &Dataset, state: TrainState) -> Result<Self> {
        config.validate()?;
        state.ensure_matches(&config)?;
        let norm = state.normalization;
        let train: Vec<ImagePlane> = data.train.iter().map(|p| norm.apply(&p.noisy)).collect();
        let val_raw: Vec<ImagePlane> = data.val.iter().map(|p| norm.apply(&p.noisy)).collect();
        let val = crop_to_multiple(&val_raw, config.multiple())?;
        if val.is_empty() {
            return Err(Error::invalid("dataset.count_val", "validation set is empty"));
        }
        Ok(Self { config, train, val, state, out_dir: None, history: Vec::new() })
    }

    /// Write `metrics.csv` and checkpoints to `dir`.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.out_dir = Some(dir);
        Ok(self)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Samples a batch and runs one co-training step.
    pub fn step(&mut self) -> Result<StepOutput> {
        let t = &self.config.training;
        let batch = sample_patch_batch(&self.train, t.batch_size, t.patch_size, &mut self.state.rng)?;
        let kl_weight = self.config.kl_weight(self.state.step);
        co_train_step(&mut self.state, &batch.to_tensor(), kl_weight, t.grad_clip)
    }

    pub fn validate(&self) -> Result<ValidationMetrics> {
        validate(&self.state, &self.val, self.config.training.val_seed)
    }

    /// Runs until `training.total_steps`.
    pub fn run(&mut self) -> Result<TrainSummary> {
        self.run_until(self.config.training.total_steps)
    }

    /// Runs until `last_step` completed steps, validating every
    /// `val_interval` steps and at the end.
    pub fn run_until(&mut self, last_step: u64) -> Result<TrainSummary> {
        let interval = self.config.training.val_interval;
        let mut final_checkpoint = None;
        while self.state.step < last_step {
            self.step()?;
            let step = self.state.step;
            let at_end = step == last_step;
            if step % interval == 0 || at_end {
                self.on_validation()?;
            }
            let periodic = self.config.training.checkpoint_every.is_some_and(|k| step % k == 0);
            if let Some(dir) = self.out_dir.clone() {
                if periodic || at_end {
                    let path = dir.join(format!("ckpt_{step:08}.safetensors"));
                    save_checkpoint(&self.state, &path)?;
                    final_checkpoint = Some(path);
                }
                if at_end {
                    save_checkpoint(&self.state, dir.join("last.safetensors"))?;
                }
            }
        }
        Ok(TrainSummary {
            steps: self.state.step,
            best_vae_val: self.state.best_vae_val,
            best_direct_val: self.state.heads.iter().map(|h| (h.dd.loss_kind(), h.best_val)).collect(),
            final_checkpoint,
        })
    }

    fn on_validation(&mut self) -> Result<()> {
        let v = self.validate()?;
        let state = &mut self.state;
        let vae_improved = v.vae.total < state.best_vae_val;
        if vae_improved {
            state.best_vae_val = v.vae.total;
        }
        state.vae_opt.observe_validation(v.vae.total);
        let mut first_improved = false;
        for (i, (head, &(_, loss))) in state.heads.iter_mut().zip(&v.direct).enumerate() {
            if loss < head.best_val {
                head.best_val = loss;
                first_improved |= i == 0;
            }
            head.opt.observe_validation(loss);
        }
        let lookup = |k: LossKind| v.direct.iter().find(|(kind, _)| *kind == k).map(|&(_, l)| l);
        let row = MetricsRow {
            step: state.step,
            vae_recon: v.vae.reconstruction,
            vae_kl: v.vae.kl,
            direct_l1: lookup(LossKind::L1),
            direct_l2: lookup(LossKind::L2),
            lr_vae: state.vae_opt.lr,
            lr_dd: state.heads[0].opt.lr,
        };
        log::info!(
            "step {} vae recon {:.5} kl {:.5} direct {:?} lr {:.2e}/{:.2e}",
            row.step,
            row.vae_recon,
            row.vae_kl,
            v.direct,
            row.lr_vae,
            row.lr_dd
        );
        if let Some(dir) = &self.out_dir {
            append_metrics(&dir.join("metrics.csv"), &row)?;
            if vae_improved {
                save_checkpoint(&self.state, dir.join("best_vae.safetensors"))?;
            }
            if first_improved {
                save_checkpoint(&self.state, dir.join("best_direct.safetensors"))?;
            }
        }
        self.history.push(row);
        Ok(())
    }
}

fn append_metrics(path: &Path, row: &MetricsRow) -> Result<()> {
    let exists = path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    w.serialize(row)?;
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

/// Reads `metrics.csv` rows back, mostly for tests and reports.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(rows)
}
