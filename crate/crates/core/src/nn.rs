//! Convolutional building blocks shared by the VAE and the UNet.

use dud_tensor::{Graph, ParamId, ParamStore, Shape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// `k × k` convolution with bias and "same" zero padding.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    /// Weights and biases are drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f32;
        let bound = 1.0 / fan_in.sqrt();
        let mut draw = |shape: Shape| {
            let data = (0..shape.numel()).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_vec(shape, data)
        };
        let weight = store.add(format!("{name}.weight"), draw(Shape::new(c_out, c_in, kernel, kernel)));
        let bias = store.add(format!("{name}.bias"), draw(Shape::new(1, c_out, 1, 1)));
        Self { weight, bias, stride, pad: kernel / 2 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Two convolutions with a ReLU in between, added to the (projected) input
/// and passed through a final ReLU.
#[derive(Clone, Debug)]
pub struct ResBlock {
    first: Conv,
    second: Conv,
    /// 1×1 projection when the channel count changes.
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Self {
        let first = Conv::new(store, rng, &format!("{name}.conv1"), c_in, c_out, kernel, 1);
        let second = Conv::new(store, rng, &format!("{name}.conv2"), c_out, c_out, kernel, 1);
        let skip = (c_in != c_out).then(|| Conv::new(store, rng, &format!("{name}.skip"), c_in, c_out, 1, 1));
        Self { first, second, skip }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.first.forward(g, store, x);
        let h = g.relu(h);
        let h = self.second.forward(g, store, h);
        let s = match &self.skip {
            Some(p) => p.forward(g, store, x),
            None => x,
        };
        let sum = g.add(h, s);
        g.relu(sum)
    }
}

pub(crate) fn check_finite(g: &Graph, v: Var, layer: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: layer.to_string() })
    }
}

/// Reflect padding `(top, bottom, left, right)` that brings `(h, w)` up to the
/// next multiple of `multiple`. The extra pixel of an odd split goes to the
/// bottom/right.
pub fn pad_to_multiple(h: usize, w: usize, multiple: usize) -> (usize, usize, usize, usize) {
    let ph = h.div_ceil(multiple) * multiple - h;
    let pw = w.div_ceil(multiple) * multiple - w;
    (ph / 2, ph - ph / 2, pw / 2, pw - pw / 2)
}

/// Runs `f` on `x` reflect-padded to a multiple of `multiple` and crops the
/// result back to the input size.
pub(crate) fn with_padding(
    x: &Tensor,
    multiple: usize,
    f: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let s = x.shape();
    if s.h < multiple || s.w < multiple {
        return Err(Error::ImageTooSmall { index: 0, height: s.h, width: s.w, required: multiple });
    }
    let (t, b, l, r) = pad_to_multiple(s.h, s.w, multiple);
    if t + b + l + r == 0 {
        return f(x);
    }
    let y = f(&x.reflect_pad(t, b, l, r))?;
    Ok(y.crop(t, l, s.h, s.w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_rule() {
        assert_eq!(pad_to_multiple(100, 100, 16), (6, 6, 6, 6));
        assert_eq!(pad_to_multiple(64, 63, 16), (0, 0, 0, 1));
        assert_eq!(pad_to_multiple(17, 31, 16), (7, 8, 0, 1));
    }
}
