//! Synthetic datasets with known ground truth, patch sampling and the `DUD1`
//! raw-float image container.
//!
//! Layout of a `DUD1` file (all integers little-endian):
//!
//! | bytes  | content                          |
//! |--------|----------------------------------|
//! | 0..4   | ASCII `DUD1`                     |
//! | 4..8   | `u32` height                     |
//! | 8..12  | `u32` width                      |
//! | 12..16 | reserved, zero                   |
//! | 16..   | `height × width` `f32`, row-major |

use std::fs;
use std::path::{Path, PathBuf};

use dud_tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DUD1";
pub const HEADER_LEN: usize = 16;

/// Single-channel 2-D image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        Self { height, width, pixels: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { height: self.height, width: self.width, pixels: self.pixels.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ImagePlane) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Copies the `size × size` window whose top-left corner is `(top, left)`.
    pub fn window(&self, top: usize, left: usize, height: usize, width: usize) -> ImagePlane {
        assert!(top + height <= self.height && left + width <= self.width, "window out of bounds");
        let mut pixels = Vec::with_capacity(height * width);
        for y in top..top + height {
            pixels.extend_from_slice(&self.pixels[y * self.width + left..y * self.width + left + width]);
        }
        ImagePlane { height, width, pixels }
    }

    /// `[1, 1, h, w]` tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), self.pixels.clone())
    }

    /// Batch of equally sized images as a `[n, 1, h, w]` tensor.
    pub fn stack(images: &[ImagePlane]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.len());
        for img in images {
            first.same_shape(img)?;
            data.extend_from_slice(&img.pixels);
        }
        Ok(Tensor::from_vec(Shape::new(images.len(), 1, first.height, first.width), data))
    }

    /// Batch item `n` of a single-channel tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> ImagePlane {
        let s = t.shape();
        assert_eq!(s.c, 1, "expected a single-channel tensor, got {:?}", s);
        ImagePlane { height: s.h, width: s.w, pixels: t.plane(n, 0).to_vec() }
    }

    pub fn unstack(t: &Tensor) -> Vec<ImagePlane> {
        (0..t.shape().n).map(|n| Self::from_tensor(t, n)).collect()
    }
}

/// Family the clean signals are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SignalFamily {
    /// I.i.d. Gaussian pixels `N(mean, std²)`; admits a closed-form MMSE.
    Conjugate { mean: f64, std: f64 },
    /// Isotropic Gaussian bumps on a constant background.
    Blobs {
        /// Inclusive range of the number of bumps per image.
        count: [usize; 2],
        /// Range of the bump standard deviation, in pixels.
        radius: [f64; 2],
        amplitude: [f64; 2],
        background: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub signal: SignalFamily,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub count_train: usize,
    pub count_val: usize,
    pub count_test: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

fn check_range(field: &str, r: [f64; 2], positive: bool) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] {
        return Err(Error::invalid(field, format!("expected a finite range [lo, hi], got {r:?}")));
    }
    if positive && r[0] <= 0.0 {
        return Err(Error::invalid(field, "must be > 0"));
    }
    Ok(())
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(Error::invalid("dataset.image_size", "sides must be >= 1"));
        }
        for (field, v) in [
            ("dataset.count_train", self.count_train),
            ("dataset.count_val", self.count_val),
            ("dataset.count_test", self.count_test),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be >= 1"));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("dataset.noise_sigma", format!("must be >= 0, got {}", self.noise_sigma)));
        }
        match &self.signal {
            SignalFamily::Conjugate { mean, std } => {
                if !mean.is_finite() {
                    return Err(Error::invalid("dataset.signal.mean", "must be finite"));
                }
                if !(std.is_finite() && *std > 0.0) {
                    return Err(Error::invalid("dataset.signal.std", format!("must be > 0, got {std}")));
                }
            }
            SignalFamily::Blobs { count, radius, amplitude, background } => {
                if count[0] > count[1] {
                    return Err(Error::invalid("dataset.signal.count", "lower bound exceeds upper bound"));
                }
                check_range("dataset.signal.radius", *radius, true)?;
                check_range("dataset.signal.amplitude", *amplitude, false)?;
                if !background.is_finite() {
                    return Err(Error::invalid("dataset.signal.background", "must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.count_train + self.count_val + self.count_test
    }
}

/// Ground truth and its noisy observation.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub clean: ImagePlane,
    pub noisy: ImagePlane,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
    pub test: Vec<ImagePair>,
}

impl Dataset {
    pub fn noisy(split: &[ImagePair]) -> Vec<ImagePlane> {
        split.iter().map(|p| p.noisy.clone()).collect()
    }

    pub fn clean(split: &[ImagePair]) -> Vec<ImagePlane> {
        split.iter().map(|p| p.clean.clone()).collect()
    }
}

fn draw_clean(signal: &SignalFamily, h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImagePlane {
    let pixels = match signal {
        SignalFamily::Conjugate { mean, std } => (0..h * w)
            .map(|_| {
                let n: f64 = rng.sample(StandardNormal);
                (mean + std * n) as f32
            })
            .collect(),
        SignalFamily::Blobs { count, radius, amplitude, background } => {
            let k = rng.random_range(count[0]..=count[1]);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..k)
                .map(|_| {
                    let cy = rng.random::<f64>() * h as f64;
                    let cx = rng.random::<f64>() * w as f64;
                    let r = radius[0] + rng.random::<f64>() * (radius[1] - radius[0]);
                    let a = amplitude[0] + rng.random::<f64>() * (amplitude[1] - amplitude[0]);
                    (cy, cx, r, a)
                })
                .collect();
            let mut px = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let mut v = *background;
                    for &(cy, cx, r, a) in &blobs {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        v += a * (-d2 / (2.0 * r * r)).exp();
                    }
                    px.push(v as f32);
                }
            }
            px
        }
    };
    ImagePlane { height: h, width: w, pixels }
}

/// Adds zero-mean Gaussian noise of standard deviation `sigma`.
pub fn add_gaussian_noise(clean: &ImagePlane, sigma: f64, rng: &mut impl Rng) -> ImagePlane {
    if sigma == 0.0 {
        return clean.clone();
    }
    let pixels = clean
        .pixels()
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            v + (sigma * n) as f32
        })
        .collect();
    ImagePlane { height: clean.height, width: clean.width, pixels }
}

/// Draws train, validation and test splits, in that order, from one stream
/// seeded by `spec.seed`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let [h, w] = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |count: usize| -> Vec<ImagePair> {
        (0..count)
            .map(|_| {
                let clean = draw_clean(&spec.signal, h, w, &mut rng);
                let noisy = add_gaussian_noise(&clean, spec.noise_sigma, &mut rng);
                ImagePair { clean, noisy }
            })
            .collect()
    };
    let train = split(spec.count_train);
    let val = split(spec.count_val);
    let test = split(spec.count_test);
    Ok(Dataset { train, val, test })
}

/// Patches cut from training images at uniformly random positions.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub patches: Vec<ImagePlane>,
    /// `(image index, top, left)` of every patch.
    pub origins: Vec<(usize, usize, usize)>,
    pub patch_size: usize,
}

impl PatchBatch {
    pub fn to_tensor(&self) -> Tensor {
        ImagePlane::stack(&self.patches).expect("patches share one size")
    }
}

/// Samples `batch_size` square patches; the source image is chosen uniformly,
/// then the top-left corner uniformly among all positions that keep the
/// patch inside that image.
pub fn sample_patch_batch(
    images: &[ImagePlane],
    batch_size: usize,
    patch_size: usize,
    rng: &mut impl Rng,
) -> Result<PatchBatch> {
    if images.is_empty() {
        return Err(Error::invalid("images", "no images to sample patches from"));
    }
    if batch_size == 0 || patch_size == 0 {
        return Err(Error::invalid("batch_size/patch_size", "must be >= 1"));
    }
    for (index, img) in images.iter().enumerate() {
        if img.height < patch_size || img.width < patch_size {
            return Err(Error::ImageTooSmall {
                index,
                height: img.height,
                width: img.width,
                required: patch_size,
            });
        }
    }
    let mut patches = Vec::with_capacity(batch_size);
    let mut origins = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = rng.random_range(0..images.len());
        let img = &images[i];
        let top = rng.random_range(0..=img.height - patch_size);
        let left = rng.random_range(0..=img.width - patch_size);
        patches.push(img.window(top, left, patch_size, patch_size));
        origins.push((i, top, left));
    }
    Ok(PatchBatch { patches, origins, patch_size })
}

pub fn encode_image(image: &ImagePlane) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * image.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(image.height as u32).to_le_bytes());
    buf.extend_from_slice(&(image.width as u32).to_le_bytes());
    buf.extend_from_slice(&[0u8; 4]);
    for v in &image.pixels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<ImagePlane> {
    let corrupt = |reason: String| Error::Corrupt { path: path.to_path_buf(), reason };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(corrupt(format!("bad magic {:?}", &bytes[0..4])));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (height, width) = (word(4), word(8));
    if height == 0 || width == 0 {
        return Err(corrupt(format!("empty image {height}x{width}")));
    }
    let expected = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt("size overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(corrupt(format!(
            "header says {height}x{width} ({expected} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    let pixels = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(ImagePlane { height, width, pixels })
}

pub fn write_image(path: impl AsRef<Path>, image: &ImagePlane) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_image(image)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_image(&bytes, path)
}

fn image_name(index: usize) -> String {
    format!("{index:04}.dud")
}

/// Writes `clean/NNNN.dud`, `noisy/NNNN.dud` (train, then val, then test,
/// numbered consecutively) and `spec.json`.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &DatasetSpec, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["clean", "noisy"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let all = data.train.iter().chain(&data.val).chain(&data.test);
    for (i, pair) in all.enumerate() {
        write_image(dir.join("clean").join(image_name(i)), &pair.clean)?;
        write_image(dir.join("noisy").join(image_name(i)), &pair.noisy)?;
    }
    let json = serde_json::to_string_pretty(spec)?;
    let p = dir.join("spec.json");
    fs::write(&p, json).map_err(|e| Error::io(format!("writing {}", p.display()), e))
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(DatasetSpec, Dataset)> {
    let dir = dir.as_ref();
    let p = dir.join("spec.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
    let spec: DatasetSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    let mut pairs = Vec::with_capacity(spec.total());
    for i in 0..spec.total() {
        let clean = read_image(dir.join("clean").join(image_name(i)))?;
        let noisy = read_image(dir.join("noisy").join(image_name(i)))?;
        clean.same_shape(&noisy)?;
        pairs.push(ImagePair { clean, noisy });
    }
    let test = pairs.split_off(spec.count_train + spec.count_val);
    let val = pairs.split_off(spec.count_train);
    Ok((spec, Dataset { train: pairs, val, test }))
}

/// Paths of the files making up an on-disk dataset, in index order.
pub fn dataset_files(dir: impl AsRef<Path>, spec: &DatasetSpec) -> Vec<PathBuf> {
    let dir = dir.as_ref();
    let mut files = vec![dir.join("spec.json")];
    for i in 0..spec.total() {
        files.push(dir.join("clean").join(image_name(i)));
        files.push(dir.join("noisy").join(image_name(i)));
    }
    files
}
