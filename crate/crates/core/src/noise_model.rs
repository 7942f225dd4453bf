//! Observation likelihoods `p(x | s)`.

use serde::{Deserialize, Serialize};

use crate::data::ImagePlane;
use crate::error::{Error, Result};

/// A pixel-wise observation likelihood.
pub trait NoiseModel {
    /// `Σ_i log p(x_i | s_i)`.
    fn log_likelihood(&self, x: &ImagePlane, s: &ImagePlane) -> Result<f64>;

    /// `-Σ_i log p(x_i | s_i)` and its gradient with respect to every `s_i`.
    fn nll_with_grad<T: Copy + Into<f64>>(&self, x: &[T], s: &[T]) -> (f64, Vec<f64>);
}

/// Zero-mean Gaussian noise with known standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoiseModel {
    sigma: f64,
}

impl GaussianNoiseModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid("noise_model.sigma", format!("must be > 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// The same model expressed in units where pixels were divided by `scale`.
    pub fn rescaled(&self, scale: f64) -> Result<Self> {
        Self::new(self.sigma / scale)
    }

    fn log_norm(&self) -> f64 {
        -0.5 * (2.0 * std::f64::consts::PI * self.sigma * self.sigma).ln()
    }
}

impl NoiseModel for GaussianNoiseModel {
    fn log_likelihood(&self, x: &ImagePlane, s: &ImagePlane) -> Result<f64> {
        x.same_shape(s)?;
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let c = self.log_norm();
        Ok(x
            .pixels()
            .iter()
            .zip(s.pixels())
            .map(|(&x, &s)| {
                let d = f64::from(x) - f64::from(s);
                c - d * d * inv
            })
            .sum())
    }

    fn nll_with_grad<T: Copy + Into<f64>>(&self, x: &[T], s: &[T]) -> (f64, Vec<f64>) {
        assert_eq!(x.len(), s.len(), "noise model: length mismatch");
        let var = self.sigma * self.sigma;
        let c = self.log_norm();
        let mut total = 0.0;
        let grad = x
            .iter()
            .zip(s)
            .map(|(&x, &s)| {
                let d = s.into() - x.into();
                total += d * d / (2.0 * var) - c;
                d / var
            })
            .collect();
        (total, grad)
    }
}
