//! Training-state checkpoints: safetensors tensors plus JSON metadata.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use dud_tensor::{ParamStore, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::direct::{DirectDenoiser, LossKind, UNetSpec};
use crate::error::{Error, Result};
use crate::noise_model::GaussianNoiseModel;
use crate::training::normalize::Normalization;
use crate::training::optim::{OptimizerState, Plateau};
use crate::training::{Head, TrainState};
use crate::vae::{DenoisingVae, VaeSpec};

const FORMAT: &str = "dud-checkpoint";
const VERSION: u32 = 1;
const META_KEY: &str = "dud";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    patience: usize,
    factor: f64,
    threshold: f64,
    min_lr: f64,
    /// `None` before the first validation.
    best: Option<f64>,
    bad: usize,
    best_val: Option<f64>,
}

/// Everything in a checkpoint except the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub vae: VaeSpec,
    pub unet: UNetSpec,
    pub loss_kinds: Vec<LossKind>,
    pub normalization: Normalization,
    /// Raw-unit noise standard deviation.
    pub noise_sigma: f64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128.
    rng_word_pos: String,
    vae_opt: OptimizerMeta,
    head_opts: Vec<OptimizerMeta>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn opt_meta(o: &OptimizerState, best_val: f64) -> OptimizerMeta {
    OptimizerMeta {
        lr: o.lr,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        step: o.step,
        patience: o.plateau.patience,
        factor: o.plateau.factor,
        threshold: o.plateau.threshold,
        min_lr: o.plateau.min_lr,
        best: finite(o.plateau.best),
        bad: o.plateau.bad,
        best_val: finite(best_val),
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn entry(name: String, t: &Tensor) -> Entry {
    let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    Entry { name, shape: t.shape().dims().to_vec(), bytes }
}

fn push_model(entries: &mut Vec<Entry>, prefix: &str, store: &ParamStore, opt: &OptimizerState) {
    for (i, (_, name, t)) in store.iter().enumerate() {
        entries.push(entry(format!("{prefix}/param/{name}"), t));
        entries.push(entry(format!("{prefix}/m/{name}"), &opt.m[i]));
        entries.push(entry(format!("{prefix}/u/{name}"), &opt.u[i]));
    }
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = state.heads.first().ok_or_else(|| Error::invalid("direct.loss_kinds", "no direct network"))?;
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        version: VERSION,
        step: state.step,
        vae: state.vae.spec().clone(),
        unet: first.dd.spec().clone(),
        loss_kinds: state.heads.iter().map(|h| h.dd.loss_kind()).collect(),
        normalization: state.normalization,
        noise_sigma: state.raw_noise.sigma(),
        rng_seed: state.rng.get_seed(),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        vae_opt: opt_meta(&state.vae_opt, state.best_vae_val),
        head_opts: state.heads.iter().map(|h| opt_meta(&h.opt, h.best_val)).collect(),
    };
    let mut entries = Vec::new();
    push_model(&mut entries, "vae", state.vae.params(), &state.vae_opt);
    for (i, h) in state.heads.iter().enumerate() {
        push_model(&mut entries, &format!("direct{i}"), h.dd.params(), &h.opt);
    }
    let views = entries
        .iter()
        .map(|e| Ok((e.name.clone(), TensorView::new(Dtype::F32, e.shape.clone(), &e.bytes).map_err(fmt_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
    let bytes = safetensors::serialize(views, Some(info)).map_err(fmt_err)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

fn fmt_err(e: safetensors::SafeTensorError) -> Error {
    Error::Format(e.to_string())
}

fn read_tensor(st: &SafeTensors<'_>, name: &str, path: &Path) -> Result<Tensor> {
    let view = st.tensor(name).map_err(|_| Error::SpecMismatch(format!("tensor `{name}` missing from checkpoint")))?;
    if view.dtype() != Dtype::F32 || view.shape().len() != 4 {
        return Err(Error::Corrupt { path: path.into(), reason: format!("tensor `{name}` is not a 4-d f32 tensor") });
    }
    let s = view.shape();
    let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Tensor::from_vec(Shape::new(s[0], s[1], s[2], s[3]), data))
}

fn load_model(
    st: &SafeTensors<'_>,
    path: &Path,
    prefix: &str,
    store: &mut ParamStore,
    meta: &OptimizerMeta,
) -> Result<OptimizerState> {
    let params: Vec<_> = store.iter().map(|(id, name, t)| (id, name.to_string(), t.shape())).collect();
    let mut m = Vec::with_capacity(params.len());
    let mut u = Vec::with_capacity(params.len());
    for (id, name, shape) in params {
        let load = |kind: &str| -> Result<Tensor> {
            let t = read_tensor(st, &format!("{prefix}/{kind}/{name}"), path)?;
            if t.shape() != shape {
                return Err(Error::SpecMismatch(format!(
                    "`{prefix}/{kind}/{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        store.set(id, load("param")?);
        m.push(load("m")?);
        u.push(load("u")?);
    }
    let expected = store.len() * 3;
    let present = st.names().iter().filter(|n| n.starts_with(&format!("{prefix}/"))).count();
    if present != expected {
        return Err(Error::SpecMismatch(format!("`{prefix}` has {present} tensors, expected {expected}")));
    }
    Ok(OptimizerState {
        lr: meta.lr,
        beta1: meta.beta1,
        beta2: meta.beta2,
        eps: meta.eps,
        step: meta.step,
        m,
        u,
        plateau: Plateau {
            patience: meta.patience,
            factor: meta.factor,
            threshold: meta.threshold,
            min_lr: meta.min_lr,
            best: meta.best.unwrap_or(f64::INFINITY),
            bad: meta.bad,
        },
    })
}

/// Reads only the metadata of a checkpoint.
pub fn read_checkpoint_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_meta(&bytes, path)
}

fn parse_meta(bytes: &[u8], path: &Path) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Corrupt { path: path.into(), reason: e.to_string() })?;
    let text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Format(format!("{} has no training metadata", path.display())))?;
    let raw: serde_json::Value = serde_json::from_str(text)?;
    let format = raw.get("format").and_then(|v| v.as_str()).unwrap_or_default();
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or_default();
    if format != FORMAT || version != u64::from(VERSION) {
        return Err(Error::Format(format!(
            "{}: format `{format}` version {version}, expected `{FORMAT}` version {VERSION}",
            path.display()
        )));
    }
    Ok(serde_json::from_value(raw)?)
}

/// Restores a full training state, architecture included.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let meta = parse_meta(&bytes, path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Corrupt { path: path.into(), reason: e.to_string() })?;
    if meta.head_opts.len() != meta.loss_kinds.len() {
        return Err(Error::Corrupt { path: path.into(), reason: "optimizer count does not match networks".into() });
    }

    let mut vae = DenoisingVae::new(meta.vae.clone(), 0)?;
    let vae_opt = load_model(&st, path, "vae", vae.params_mut(), &meta.vae_opt)?;
    let mut heads = Vec::new();
    for (i, (&kind, om)) in meta.loss_kinds.iter().zip(&meta.head_opts).enumerate() {
        let mut dd = DirectDenoiser::new(meta.unet.clone(), kind, 0)?;
        let opt = load_model(&st, path, &format!("direct{i}"), dd.params_mut(), om)?;
        heads.push(Head { dd, opt, best_val: om.best_val.unwrap_or(f64::INFINITY) });
    }
    let word_pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Corrupt { path: path.into(), reason: "bad generator position".into() })?;
    let mut rng = ChaCha8Rng::from_seed(meta.rng_seed);
    rng.set_stream(meta.rng_stream);
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        vae,
        vae_opt,
        heads,
        step: meta.step,
        rng,
        normalization: meta.normalization,
        raw_noise: GaussianNoiseModel::new(meta.noise_sigma)?,
        best_vae_val: meta.vae_opt.best_val.unwrap_or(f64::INFINITY),
    })
}
