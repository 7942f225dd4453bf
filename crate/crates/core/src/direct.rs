//! The Direct Denoiser: a residual UNet trained to predict a central tendency
//! of the VAE's denoising distribution in a single forward pass.

use std::fmt;

use dud_tensor::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{check_finite, with_padding, Conv, ResBlock};

/// Which central tendency the network is trained to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossKind {
    /// Mean absolute error; the per-pixel median.
    #[serde(rename = "L1", alias = "l1")]
    L1,
    /// Mean squared error; the per-pixel mean.
    #[serde(rename = "L2", alias = "l2")]
    L2,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "L1",
            LossKind::L2 => "L2",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockLayout {
    /// conv, ReLU, conv, add the (projected) input, ReLU.
    #[default]
    TwoConvRelu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    #[default]
    StridedConv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Nearest-neighbour ×2 followed by one convolution.
    #[default]
    NearestConv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMerge {
    #[default]
    Concat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetSpec {
    /// Number of stride-2 downsamplings.
    pub depth: usize,
    /// Filters at full resolution; doubled at every level below.
    pub base_filters: usize,
    pub kernel_size: usize,
    pub block: BlockLayout,
    pub downsample: DownsampleMode,
    pub upsample: UpsampleMode,
    pub skip_merge: SkipMerge,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self {
            depth: 4,
            base_filters: 16,
            kernel_size: 3,
            block: BlockLayout::default(),
            downsample: DownsampleMode::default(),
            upsample: UpsampleMode::default(),
            skip_merge: SkipMerge::default(),
        }
    }
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("direct.unet.depth", "must be >= 1"));
        }
        if self.depth > 12 {
            return Err(Error::invalid("direct.unet.depth", "must be <= 12"));
        }
        if self.base_filters == 0 {
            return Err(Error::invalid("direct.unet.base_filters", "must be >= 1"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid("direct.unet.kernel_size", "must be odd"));
        }
        Ok(())
    }

    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

/// `mean |y - s|` and its gradient with respect to `y`; the subgradient at
/// `y = s` is 0.
pub fn l1_with_grad<T: Copy + Into<f64>>(y: &[T], s: &[T]) -> (f64, Vec<f64>) {
    assert_eq!(y.len(), s.len(), "l1: length mismatch");
    let n = y.len() as f64;
    let mut total = 0.0;
    let grad = y
        .iter()
        .zip(s)
        .map(|(&y, &s)| {
            let d = y.into() - s.into();
            total += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (total / n, grad)
}

/// `mean (y - s)²` and its gradient with respect to `y`.
pub fn l2_with_grad<T: Copy + Into<f64>>(y: &[T], s: &[T]) -> (f64, Vec<f64>) {
    assert_eq!(y.len(), s.len(), "l2: length mismatch");
    let n = y.len() as f64;
    let mut total = 0.0;
    let grad = y
        .iter()
        .zip(s)
        .map(|(&y, &s)| {
            let d = y.into() - s.into();
            total += d * d;
            2.0 * d / n
        })
        .collect();
    (total / n, grad)
}

impl LossKind {
    pub fn with_grad<T: Copy + Into<f64>>(self, y: &[T], s: &[T]) -> (f64, Vec<f64>) {
        match self {
            LossKind::L1 => l1_with_grad(y, s),
            LossKind::L2 => l2_with_grad(y, s),
        }
    }

    /// Loss between prediction `y` and target `s`, averaged over all elements.
    pub fn evaluate(self, y: &Tensor, s: &Tensor) -> Result<f64> {
        if y.shape() != s.shape() {
            return Err(Error::ShapeMismatch(format!("loss between {:?} and {:?}", y.shape(), s.shape())));
        }
        Ok(self.with_grad(y.data(), s.data()).0)
    }
}

pub fn l1_loss(y: &Tensor, s: &Tensor) -> Result<f64> {
    LossKind::L1.evaluate(y, s)
}

pub fn l2_loss(y: &Tensor, s: &Tensor) -> Result<f64> {
    LossKind::L2.evaluate(y, s)
}

#[derive(Clone, Debug)]
struct DownLevel {
    conv: Conv,
    block: ResBlock,
}

#[derive(Clone, Debug)]
struct UpLevel {
    conv: Conv,
    block: ResBlock,
}

#[derive(Clone, Debug)]
pub struct DirectDenoiser {
    spec: UNetSpec,
    loss_kind: LossKind,
    params: ParamStore,
    stem: Conv,
    stem_block: ResBlock,
    down: Vec<DownLevel>,
    up: Vec<UpLevel>,
    out: Conv,
}

impl DirectDenoiser {
    pub fn new(spec: UNetSpec, loss_kind: LossKind, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let k = spec.kernel_size;
        let f = |l| spec.filters(l);
        let stem = Conv::new(&mut p, &mut rng, "unet.stem", 1, f(0), k, 1);
        let stem_block = ResBlock::new(&mut p, &mut rng, "unet.enc0.block", f(0), f(0), k);
        let down = (1..=spec.depth)
            .map(|l| DownLevel {
                conv: Conv::new(&mut p, &mut rng, &format!("unet.enc{l}.down"), f(l - 1), f(l), k, 2),
                block: ResBlock::new(&mut p, &mut rng, &format!("unet.enc{l}.block"), f(l), f(l), k),
            })
            .collect();
        let up = (0..spec.depth)
            .rev()
            .map(|l| UpLevel {
                conv: Conv::new(&mut p, &mut rng, &format!("unet.dec{l}.up"), f(l + 1), f(l), k, 1),
                block: ResBlock::new(&mut p, &mut rng, &format!("unet.dec{l}.block"), 2 * f(l), f(l), k),
            })
            .collect();
        let out = Conv::new(&mut p, &mut rng, "unet.out", f(0), 1, 1, 1);
        Ok(Self { spec, loss_kind, params: p, stem, stem_block, down, up, out })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss_kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `h_η(x)` for inputs whose sides are divisible by `2^depth`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        let m = self.spec.multiple();
        if s.c != 1 || s.h % m != 0 || s.w % m != 0 {
            return Err(Error::ShapeMismatch(format!(
                "UNet input {s:?} must be single-channel with sides divisible by {m}"
            )));
        }
        let p = &self.params;
        let h = self.stem.forward(g, p, x);
        let h = g.relu(h);
        let mut h = self.stem_block.forward(g, p, h);
        let mut skips = vec![h];
        for (i, level) in self.down.iter().enumerate() {
            let d = level.conv.forward(g, p, h);
            let d = g.relu(d);
            h = level.block.forward(g, p, d);
            check_finite(g, h, &format!("unet.enc{}", i + 1))?;
            skips.push(h);
        }
        skips.pop();
        for (level, skip) in self.up.iter().zip(skips.into_iter().rev()) {
            let u = g.upsample_nearest2x(h);
            let u = level.conv.forward(g, p, u);
            let u = g.relu(u);
            let m = g.concat_channels(u, skip);
            h = level.block.forward(g, p, m);
        }
        let y = self.out.forward(g, p, h);
        check_finite(g, y, "unet.out")?;
        Ok(y)
    }

    /// Training loss of prediction `y` against constant targets.
    pub fn loss(&self, g: &mut Graph, y: Var, target: &Tensor) -> Result<(Var, f64)> {
        if g.shape(y) != target.shape() {
            return Err(Error::ShapeMismatch(format!("prediction {:?} vs target {:?}", g.shape(y), target.shape())));
        }
        let kind = self.loss_kind;
        let mut value = 0.0;
        let v = g.scalar_fn(&[y], |v| {
            let (l, grad) = kind.with_grad(v[0].data(), target.data());
            value = l;
            let grad = Tensor::from_vec(v[0].shape(), grad.into_iter().map(|g| g as f32).collect());
            (l as f32, vec![grad])
        });
        Ok((v, value))
    }

    /// Deterministic prediction for a normalised `[n, 1, h, w]` batch of any
    /// size at least `2^depth`; other sizes are reflect-padded and cropped.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        with_padding(x, self.spec.multiple(), |x| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = self.forward(&mut g, xv)?;
            Ok(g.value(y).clone())
        })
    }
}
