//! Single posterior samples, N-sample consensus and direct prediction.

use dud_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImagePlane;
use crate::direct::{DirectDenoiser, LossKind};
use crate::error::{Error, Result};
use crate::training::normalize::Normalization;
use crate::vae::DenoisingVae;

/// Draws from a denoising distribution, in normalised units.
pub trait Sampler {
    /// One draw per item of a `[n, 1, h, w]` batch.
    fn sample(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

impl Sampler for DenoisingVae {
    fn sample(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        self.sample_tensor(x, rng)
    }
}

/// A deterministic image-to-image network, in normalised units.
pub trait Predictor {
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

impl Predictor for DirectDenoiser {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        DirectDenoiser::predict(self, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Mean,
    Median,
}

impl std::fmt::Display for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregator::Mean => "mean",
            Aggregator::Median => "median",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusSpec {
    pub n_samples: usize,
    pub aggregator: Aggregator,
}

impl ConsensusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid("inference.n_samples", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sample,
    Consensus,
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: Mode,
    pub n_samples: usize,
    pub aggregator: Aggregator,
    /// Master seed; sample `i` uses stream `i` of this seed.
    pub seed: u64,
    /// Above this many bytes of sample stack, medians are computed band by band.
    pub median_budget_bytes: usize,
    /// Which direct network to use in direct mode; the first trained one if unset.
    pub head: Option<LossKind>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Consensus,
            n_samples: 100,
            aggregator: Aggregator::Mean,
            seed: 0,
            median_budget_bytes: 256 << 20,
            head: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        self.consensus().validate()?;
        if self.median_budget_bytes == 0 {
            return Err(Error::invalid("inference.median_budget_bytes", "must be >= 1"));
        }
        Ok(())
    }

    pub fn consensus(&self) -> ConsensusSpec {
        ConsensusSpec { n_samples: self.n_samples, aggregator: self.aggregator }
    }
}

/// Generator for sample `index` of a consensus seeded by `master`.
pub fn sample_rng(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

fn normalized_input(norm: &Normalization, x: &ImagePlane) -> Tensor {
    norm.apply(x).to_tensor()
}

fn check_output(out: &Tensor, x: &ImagePlane) -> Result<()> {
    let s = out.shape();
    if (s.n, s.c, s.h, s.w) != (1, 1, x.height(), x.width()) {
        return Err(Error::ShapeMismatch(format!("model returned {s:?} for a {}x{} image", x.height(), x.width())));
    }
    Ok(())
}

/// One draw from the denoising distribution of a raw-unit image.
pub fn sample_solution<S: Sampler + ?Sized>(
    sampler: &S,
    norm: &Normalization,
    x: &ImagePlane,
    rng: &mut ChaCha8Rng,
) -> Result<ImagePlane> {
    let s = sampler.sample(&normalized_input(norm, x), rng)?;
    check_output(&s, x)?;
    Ok(norm.denormalize(&ImagePlane::from_tensor(&s, 0)))
}

/// Median of `values`, averaging the two central order statistics for even
/// lengths. Reorders `values`.
pub fn median_in_place(values: &mut [f32]) -> f32 {
    assert!(!values.is_empty(), "median of an empty set");
    let n = values.len();
    let (_, hi, _) = values.select_nth_unstable_by(n / 2, f32::total_cmp);
    let hi = *hi;
    if n % 2 == 1 {
        return hi;
    }
    let lo = values[..n / 2].iter().copied().fold(f32::NEG_INFINITY, f32::max);
    ((f64::from(lo) + f64::from(hi)) / 2.0) as f32
}

/// Per-pixel mean or median over `spec.n_samples` independent draws. Draw `i`
/// uses [`sample_rng`]`(master_seed, i)`, so the result does not depend on
/// evaluation order. Medians hold at most `budget_bytes` of samples at once;
/// larger stacks are processed in row bands, regenerating the draws per band.
pub fn consensus<S: Sampler + ?Sized>(
    sampler: &S,
    norm: &Normalization,
    x: &ImagePlane,
    spec: &ConsensusSpec,
    master_seed: u64,
    budget_bytes: usize,
) -> Result<ImagePlane> {
    spec.validate()?;
    let input = normalized_input(norm, x);
    let (h, w) = x.dims();
    let draw = |i: usize| -> Result<Tensor> {
        let s = sampler.sample(&input, &mut sample_rng(master_seed, i as u64))?;
        check_output(&s, x)?;
        Ok(s)
    };
    let n = spec.n_samples;
    let out = match spec.aggregator {
        Aggregator::Mean => {
            let mut acc = vec![0f64; h * w];
            for i in 0..n {
                let s = draw(i)?;
                for (a, &v) in acc.iter_mut().zip(s.data()) {
                    *a += f64::from(v);
                }
            }
            acc.into_iter().map(|a| (a / n as f64) as f32).collect()
        }
        Aggregator::Median => {
            let row_bytes = n * w * std::mem::size_of::<f32>();
            let band = (budget_bytes / row_bytes).clamp(1, h);
            let mut out = vec![0f32; h * w];
            let mut stack = vec![0f32; n * band * w];
            let mut column = vec![0f32; n];
            for r0 in (0..h).step_by(band) {
                let rows = band.min(h - r0);
                let len = rows * w;
                for i in 0..n {
                    let s = draw(i)?;
                    stack[i * len..(i + 1) * len].copy_from_slice(&s.data()[r0 * w..r0 * w + len]);
                }
                for p in 0..len {
                    for (i, c) in column.iter_mut().enumerate() {
                        *c = stack[i * len + p];
                    }
                    out[r0 * w + p] = median_in_place(&mut column);
                }
            }
            out
        }
    };
    let plane = ImagePlane::new(h, w, out)?;
    Ok(norm.denormalize(&plane))
}

/// One deterministic forward pass of the direct network.
pub fn direct_denoise<P: Predictor + ?Sized>(
    predictor: &P,
    norm: &Normalization,
    x: &ImagePlane,
) -> Result<ImagePlane> {
    let y = predictor.predict(&normalized_input(norm, x))?;
    check_output(&y, x)?;
    Ok(norm.denormalize(&ImagePlane::from_tensor(&y, 0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::cell::Cell;

    const ID: Normalization = Normalization { mean: 0.0, std: 1.0 };

    /// Returns `x` plus uniform integer offsets in `[-50, 50]`, so ties and
    /// even/odd medians both occur.
    struct Jitter;

    impl Sampler for Jitter {
        fn sample(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
            Ok(Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v + rng.random_range(-50i32..=50) as f32).collect()))
        }
    }

    /// Gaussian draws around `x`, counting calls.
    struct Counting {
        calls: Cell<usize>,
    }

    impl Sampler for Counting {
        fn sample(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
            self.calls.set(self.calls.get() + 1);
            Ok(Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v + rng.sample::<f32, _>(rand_distr::StandardNormal)).collect()))
        }
    }

    fn image(h: usize, w: usize) -> ImagePlane {
        ImagePlane::new(h, w, (0..h * w).map(|i| i as f32 * 0.25).collect()).unwrap()
    }

    fn brute_force(x: &ImagePlane, n: usize, seed: u64) -> Vec<Vec<f32>> {
        (0..n)
            .map(|i| Jitter.sample(&x.to_tensor(), &mut sample_rng(seed, i as u64)).unwrap().into_vec())
            .collect()
    }

    #[test]
    fn hand_computed_aggregates() {
        let mut v = [1.0f32, 100.0, 2.0];
        assert_eq!(median_in_place(&mut v), 2.0);
        let mut v = [4.0f32, 1.0, 3.0, 2.0];
        assert_eq!(median_in_place(&mut v), 2.5);
        let mean = [1.0f64, 2.0, 100.0].iter().sum::<f64>() / 3.0;
        assert!((mean - 34.333_333).abs() < 1e-5);
    }

    #[test]
    fn aggregators_match_brute_force() {
        let x = image(3, 4);
        for n in [1, 2, 4, 7] {
            let stack = brute_force(&x, n, 11);
            let mean = consensus(&Jitter, &ID, &x, &ConsensusSpec { n_samples: n, aggregator: Aggregator::Mean }, 11, 1 << 20)
                .unwrap();
            let median =
                consensus(&Jitter, &ID, &x, &ConsensusSpec { n_samples: n, aggregator: Aggregator::Median }, 11, 1 << 20)
                    .unwrap();
            for p in 0..12 {
                let mut col: Vec<f64> = stack.iter().map(|s| f64::from(s[p])).collect();
                let m = col.iter().sum::<f64>() / n as f64;
                assert!((f64::from(mean.pixels()[p]) - m).abs() < 1e-6);
                col.sort_by(f64::total_cmp);
                let med = if n % 2 == 1 { col[n / 2] } else { 0.5 * (col[n / 2 - 1] + col[n / 2]) };
                assert!((f64::from(median.pixels()[p]) - med).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn banded_median_equals_full_stack() {
        let x = image(9, 5);
        let spec = ConsensusSpec { n_samples: 6, aggregator: Aggregator::Median };
        let full = consensus(&Jitter, &ID, &x, &spec, 4, 1 << 20).unwrap();
        let counting = Counting { calls: Cell::new(0) };
        // Two rows per band: 6 * 5 * 4 bytes per row.
        let banded = consensus(&Jitter, &ID, &x, &spec, 4, 2 * 6 * 5 * 4).unwrap();
        assert_eq!(full, banded);
        consensus(&counting, &ID, &x, &spec, 4, 2 * 6 * 5 * 4).unwrap();
        assert_eq!(counting.calls.get(), 5 * 6);
    }

    #[test]
    fn single_sample_consensus_equals_sample() {
        let x = image(4, 4);
        let norm = Normalization { mean: 2.0, std: 3.0 };
        let counting = Counting { calls: Cell::new(0) };
        let s = sample_solution(&counting, &norm, &x, &mut sample_rng(7, 0)).unwrap();
        for aggregator in [Aggregator::Mean, Aggregator::Median] {
            let c = consensus(&counting, &norm, &x, &ConsensusSpec { n_samples: 1, aggregator }, 7, 1 << 20).unwrap();
            assert_eq!(c, s);
        }
    }

    #[test]
    fn mean_variance_shrinks_like_one_over_n() {
        let x = ImagePlane::filled(8, 8, 0.0);
        let sampler = Counting { calls: Cell::new(0) };
        let reps = 60;
        let var = |n: usize| {
            let outs: Vec<ImagePlane> = (0..reps)
                .map(|r| {
                    let spec = ConsensusSpec { n_samples: n, aggregator: Aggregator::Mean };
                    consensus(&sampler, &ID, &x, &spec, 1000 + r, 1 << 20).unwrap()
                })
                .collect();
            let mut total = 0.0;
            for p in 0..64 {
                let vals: Vec<f64> = outs.iter().map(|o| f64::from(o.pixels()[p])).collect();
                let m = vals.iter().sum::<f64>() / reps as f64;
                total += vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1) as f64;
            }
            total / 64.0
        };
        let ratio = var(1) / var(100);
        assert!((100.0 / 1.5..=150.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn draws_differ_between_streams() {
        let x = image(4, 4);
        let a = sample_solution(&Jitter, &ID, &x, &mut sample_rng(1, 0)).unwrap();
        let b = sample_solution(&Jitter, &ID, &x, &mut sample_rng(1, 1)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_samples_rejected() {
        let x = image(2, 2);
        let spec = ConsensusSpec { n_samples: 0, aggregator: Aggregator::Mean };
        assert!(consensus(&Jitter, &ID, &x, &spec, 0, 1).is_err());
    }
}
