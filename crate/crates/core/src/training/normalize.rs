//! Affine pixel normalisation fitted on the noisy training images.

use dud_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::ImagePlane;
use crate::error::{Error, Result};
use crate::noise_model::GaussianNoiseModel;

/// `normalized = (raw - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    /// Population mean and standard deviation over every pixel of `images`.
    pub fn fit(images: &[ImagePlane]) -> Result<Self> {
        let count: usize = images.iter().map(ImagePlane::len).sum();
        if count == 0 {
            return Err(Error::invalid("normalization", "training set is empty"));
        }
        let n = count as f64;
        let pixels = || images.iter().flat_map(|im| im.pixels()).map(|&v| f64::from(v));
        let mean = pixels().sum::<f64>() / n;
        let var = pixels().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std.is_finite() && std > 0.0) {
            return Err(Error::invalid("normalization", format!("training pixels have standard deviation {std}")));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, image: &ImagePlane) -> ImagePlane {
        let (m, s) = (self.mean, self.std);
        image.map(|v| ((f64::from(v) - m) / s) as f32)
    }

    pub fn apply_tensor(&self, t: &Tensor) -> Tensor {
        let (m, s) = (self.mean, self.std);
        t.map(|v| ((f64::from(v) - m) / s) as f32)
    }

    pub fn denormalize(&self, image: &ImagePlane) -> ImagePlane {
        let (m, s) = (self.mean, self.std);
        image.map(|v| (f64::from(v) * s + m) as f32)
    }

    pub fn denormalize_tensor(&self, t: &Tensor) -> Tensor {
        let (m, s) = (self.mean, self.std);
        t.map(|v| (f64::from(v) * s + m) as f32)
    }

    /// The raw-unit noise model expressed in normalised units.
    pub fn noise_model(&self, raw: &GaussianNoiseModel) -> Result<GaussianNoiseModel> {
        raw.rescaled(self.std)
    }
}
