//! Hierarchical convolutional VAE whose decoder output is the signal estimate
//! inside an explicit noise-model likelihood.
//!
//! Level 0 has a latent map at full input resolution; each further level sits
//! `downsample_per_level` stride-2 blocks deeper. Posteriors of all levels are
//! diagonal Gaussians computed bottom-up from the encoder features, the prior
//! is `N(0, I)` at every level, and the decoder runs top-down, merging each
//! level's latent after nearest-neighbour upsampling.

use dud_tensor::{Graph, ParamStore, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{check_finite, with_padding, Conv, ResBlock};
use crate::noise_model::{GaussianNoiseModel, NoiseModel};

/// Posterior log-variances are clamped to this range before use.
pub const LOGVAR_RANGE: (f32, f32) = (-10.0, 10.0);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLevel {
    /// Feature channels of the convolutions at this level.
    pub channels: usize,
    /// Channels of the latent map.
    pub latent_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSpec {
    /// Bottom (full resolution) level first.
    pub levels: Vec<LatentLevel>,
    /// Stride-2 blocks between consecutive levels.
    pub downsample_per_level: usize,
    pub kernel_size: usize,
}

impl Default for VaeSpec {
    fn default() -> Self {
        Self {
            levels: vec![
                LatentLevel { channels: 16, latent_channels: 4 },
                LatentLevel { channels: 32, latent_channels: 8 },
            ],
            downsample_per_level: 2,
            kernel_size: 3,
        }
    }
}

impl VaeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("vae.levels", "at least one latent level is required"));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.channels == 0 || l.latent_channels == 0 {
                return Err(Error::invalid(format!("vae.levels[{i}]"), "channel counts must be >= 1"));
            }
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid("vae.kernel_size", "must be odd"));
        }
        if self.downsample_per_level == 0 && self.levels.len() > 1 {
            return Err(Error::invalid("vae.downsample_per_level", "must be >= 1 with several levels"));
        }
        Ok(())
    }

    /// Input sides must be divisible by this.
    pub fn multiple(&self) -> usize {
        1 << (self.downsample_per_level * (self.levels.len() - 1))
    }
}

/// Losses of one Monte-Carlo evaluation of the noise-model ELBO, both terms
/// averaged over image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub kl_weight: f64,
    pub total: f64,
}

/// Diagonal-Gaussian posterior of one latent level, in graph form.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mu: Var,
    /// Already clamped to [`LOGVAR_RANGE`].
    pub logvar: Var,
}

/// Diagonal-Gaussian posterior of one latent level, as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: Tensor,
    pub logvar: Tensor,
}

/// Result of [`DenoisingVae::loss`].
pub struct VaeForward {
    pub total: Var,
    pub breakdown: VaeLossBreakdown,
    /// The sampled solutions `g(z)`.
    pub sample: Var,
}

#[derive(Clone, Debug)]
struct DownLevel {
    steps: Vec<(Conv, ResBlock)>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    steps: Vec<Conv>,
    latent_proj: Conv,
    merge: Conv,
    block: ResBlock,
}

#[derive(Clone, Debug)]
pub struct DenoisingVae {
    spec: VaeSpec,
    params: ParamStore,
    stem: Conv,
    stem_block: ResBlock,
    down: Vec<DownLevel>,
    heads: Vec<Conv>,
    top_in: Conv,
    top_block: ResBlock,
    up: Vec<UpLevel>,
    out: Conv,
}

/// `½ Σ (μ² + e^{lv} − 1 − lv)` with gradients for `μ` and `lv`.
pub fn kl_diag_gaussian<T: Copy + Into<f64>>(mu: &[T], logvar: &[T]) -> (f64, Vec<f64>, Vec<f64>) {
    assert_eq!(mu.len(), logvar.len());
    let mut total = 0.0;
    let mut dmu = Vec::with_capacity(mu.len());
    let mut dlv = Vec::with_capacity(mu.len());
    for (&m, &lv) in mu.iter().zip(logvar) {
        let (m, lv) = (m.into(), lv.into());
        let v = lv.exp();
        total += 0.5 * (m * m + v - 1.0 - lv);
        dmu.push(m);
        dlv.push(0.5 * (v - 1.0));
    }
    (total, dmu, dlv)
}

fn to_tensor(shape: Shape, v: Vec<f64>, scale: f64) -> Tensor {
    Tensor::from_vec(shape, v.into_iter().map(|g| (g * scale) as f32).collect())
}

fn standard_normal(shape: Shape, rng: &mut impl Rng) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_vec(shape, data)
}

/// Reparameterised draw `z = μ + exp(lv/2)·ε` outside any graph. A log-variance
/// of `-∞` gives `z = μ` exactly.
pub fn sample_latent(params: &PosteriorParams, rng: &mut impl Rng) -> Result<Tensor> {
    if params.mu.shape() != params.logvar.shape() {
        return Err(Error::ShapeMismatch("posterior mean and log-variance differ in shape".into()));
    }
    if !params.mu.all_finite() || params.logvar.data().iter().any(|v| v.is_nan() || *v == f32::INFINITY) {
        return Err(Error::NonFinite { layer: "posterior parameters".into() });
    }
    let eps = standard_normal(params.mu.shape(), rng);
    let data = params
        .mu
        .data()
        .iter()
        .zip(params.logvar.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(Tensor::from_vec(params.mu.shape(), data))
}

impl DenoisingVae {
    /// Fresh network with parameters initialised from `seed`.
    pub fn new(spec: VaeSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let k = spec.kernel_size;
        let ch = |l: usize| spec.levels[l].channels;
        let zc = |l: usize| spec.levels[l].latent_channels;
        let n = spec.levels.len();

        let stem = Conv::new(&mut p, &mut rng, "enc.stem", 1, ch(0), k, 1);
        let stem_block = ResBlock::new(&mut p, &mut rng, "enc.l0.block", ch(0), ch(0), k);
        let mut down = Vec::new();
        for l in 1..n {
            let mut steps = Vec::new();
            for j in 0..spec.downsample_per_level {
                let c_in = if j == 0 { ch(l - 1) } else { ch(l) };
                let name = format!("enc.l{l}.down{j}");
                let conv = Conv::new(&mut p, &mut rng, &name, c_in, ch(l), k, 2);
                let block = ResBlock::new(&mut p, &mut rng, &format!("{name}.block"), ch(l), ch(l), k);
                steps.push((conv, block));
            }
            down.push(DownLevel { steps });
        }
        let heads = (0..n)
            .map(|l| Conv::new(&mut p, &mut rng, &format!("enc.l{l}.posterior"), ch(l), 2 * zc(l), k, 1))
            .collect();

        let top = n - 1;
        let top_in = Conv::new(&mut p, &mut rng, &format!("dec.l{top}.in"), zc(top), ch(top), k, 1);
        let top_block = ResBlock::new(&mut p, &mut rng, &format!("dec.l{top}.block"), ch(top), ch(top), k);
        let mut up = Vec::new();
        for l in (0..top).rev() {
            let steps = (0..spec.downsample_per_level)
                .map(|j| {
                    let c_in = if j == 0 { ch(l + 1) } else { ch(l) };
                    Conv::new(&mut p, &mut rng, &format!("dec.l{l}.up{j}"), c_in, ch(l), k, 1)
                })
                .collect();
            let latent_proj = Conv::new(&mut p, &mut rng, &format!("dec.l{l}.latent"), zc(l), ch(l), 1, 1);
            let merge = Conv::new(&mut p, &mut rng, &format!("dec.l{l}.merge"), 2 * ch(l), ch(l), k, 1);
            let block = ResBlock::new(&mut p, &mut rng, &format!("dec.l{l}.block"), ch(l), ch(l), k);
            up.push(UpLevel { steps, latent_proj, merge, block });
        }
        let out = Conv::new(&mut p, &mut rng, "dec.out", ch(0), 1, 1, 1);
        Ok(Self { spec, params: p, stem, stem_block, down, heads, top_in, top_block, up, out })
    }

    pub fn spec(&self) -> &VaeSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        let m = self.spec.multiple();
        if shape.c != 1 || shape.h % m != 0 || shape.w % m != 0 {
            return Err(Error::ShapeMismatch(format!(
                "VAE input {shape:?} must be single-channel with sides divisible by {m}"
            )));
        }
        Ok(())
    }

    /// Posterior parameters of every level, bottom level first.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Vec<Posterior>> {
        self.check_input(g.shape(x))?;
        let p = &self.params;
        let h = self.stem.forward(g, p, x);
        let h = g.relu(h);
        let mut h = self.stem_block.forward(g, p, h);
        check_finite(g, h, "enc.l0")?;
        let mut features = vec![h];
        for (i, level) in self.down.iter().enumerate() {
            for (j, (conv, block)) in level.steps.iter().enumerate() {
                let d = conv.forward(g, p, h);
                let d = g.relu(d);
                h = block.forward(g, p, d);
                check_finite(g, h, &format!("enc.l{}.down{j}", i + 1))?;
            }
            features.push(h);
        }
        let (lo, hi) = LOGVAR_RANGE;
        let mut out = Vec::with_capacity(features.len());
        for (l, (f, head)) in features.into_iter().zip(&self.heads).enumerate() {
            let zc = self.spec.levels[l].latent_channels;
            let stats = head.forward(g, p, f);
            check_finite(g, stats, &format!("enc.l{l}.posterior"))?;
            let mu = g.narrow_channels(stats, 0, zc);
            let raw = g.narrow_channels(stats, zc, zc);
            let logvar = g.clamp(raw, lo, hi);
            out.push(Posterior { mu, logvar });
        }
        Ok(out)
    }

    /// Reparameterised latent draws, one per level, noise drawn level by level.
    pub fn sample_latent(&self, g: &mut Graph, posteriors: &[Posterior], rng: &mut impl Rng) -> Vec<Var> {
        posteriors
            .iter()
            .map(|q| {
                let eps = standard_normal(g.shape(q.mu), rng);
                g.reparameterize(q.mu, q.logvar, eps)
            })
            .collect()
    }

    /// Maps latents (bottom level first) to a signal estimate.
    pub fn decode(&self, g: &mut Graph, zs: &[Var]) -> Result<Var> {
        let n = self.spec.levels.len();
        if zs.len() != n {
            return Err(Error::ShapeMismatch(format!("expected {n} latent levels, got {}", zs.len())));
        }
        for (l, &z) in zs.iter().enumerate() {
            let s = g.shape(z);
            if s.c != self.spec.levels[l].latent_channels {
                return Err(Error::ShapeMismatch(format!("latent level {l} has {} channels", s.c)));
            }
            if l > 0 {
                let f = 1 << self.spec.downsample_per_level;
                let below = g.shape(zs[l - 1]);
                if below.h != s.h * f || below.w != s.w * f || below.n != s.n {
                    return Err(Error::ShapeMismatch(format!("latent level {l} shape {s:?} vs level below {below:?}")));
                }
            }
        }
        let p = &self.params;
        let h = self.top_in.forward(g, p, zs[n - 1]);
        let h = g.relu(h);
        let mut h = self.top_block.forward(g, p, h);
        for (i, level) in self.up.iter().enumerate() {
            let l = n - 2 - i;
            for conv in &level.steps {
                let u = g.upsample_nearest2x(h);
                let u = conv.forward(g, p, u);
                h = g.relu(u);
            }
            let zp = level.latent_proj.forward(g, p, zs[l]);
            let zp = g.relu(zp);
            let m = g.concat_channels(h, zp);
            let m = level.merge.forward(g, p, m);
            let m = g.relu(m);
            h = level.block.forward(g, p, m);
            check_finite(g, h, &format!("dec.l{l}"))?;
        }
        let s = self.out.forward(g, p, h);
        check_finite(g, s, "dec.out")?;
        Ok(s)
    }

    /// Single-sample Monte-Carlo estimate of
    /// `E_q[-log p_NM(x | g(z))] + KL(q(z|x) ‖ p(z))`, per pixel.
    pub fn loss(
        &self,
        g: &mut Graph,
        noise: &GaussianNoiseModel,
        x: Var,
        rng: &mut impl Rng,
        kl_weight: f64,
    ) -> Result<VaeForward> {
        let post = self.encode(g, x)?;
        let zs = self.sample_latent(g, &post, rng);
        let sample = self.decode(g, &zs)?;
        let xs = g.shape(x);
        let pixels = xs.numel() as f64;

        let mut recon_value = 0.0;
        let recon = g.scalar_fn(&[sample, x], |v| {
            let (nll, grad) = noise.nll_with_grad(v[1].data(), v[0].data());
            recon_value = nll / pixels;
            let gs = to_tensor(v[0].shape(), grad, 1.0 / pixels);
            ((nll / pixels) as f32, vec![gs, Tensor::zeros(v[1].shape())])
        });

        let mut kl_value = 0.0;
        let mut kl_total: Option<Var> = None;
        for q in &post {
            let mut level = 0.0;
            let k = g.scalar_fn(&[q.mu, q.logvar], |v| {
                let (kl, dmu, dlv) = kl_diag_gaussian(v[0].data(), v[1].data());
                level = kl / pixels;
                (
                    (kl / pixels) as f32,
                    vec![to_tensor(v[0].shape(), dmu, 1.0 / pixels), to_tensor(v[1].shape(), dlv, 1.0 / pixels)],
                )
            });
            kl_value += level;
            kl_total = Some(match kl_total {
                Some(acc) => g.add(acc, k),
                None => k,
            });
        }
        let kl = kl_total.expect("at least one level");
        let weighted = g.scale(kl, kl_weight as f32);
        let total = g.add(recon, weighted);
        Ok(VaeForward {
            total,
            breakdown: VaeLossBreakdown {
                reconstruction: recon_value,
                kl: kl_value,
                kl_weight,
                total: recon_value + kl_weight * kl_value,
            },
            sample,
        })
    }

    /// [`DenoisingVae::encode`] on a plain tensor.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Vec<PosteriorParams>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let post = self.encode(&mut g, xv)?;
        Ok(post
            .iter()
            .map(|q| PosteriorParams { mu: g.value(q.mu).clone(), logvar: g.value(q.logvar).clone() })
            .collect())
    }

    /// [`DenoisingVae::decode`] on plain tensors.
    pub fn decode_tensor(&self, zs: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = zs.iter().map(|z| g.constant(z.clone())).collect();
        let s = self.decode(&mut g, &vars)?;
        Ok(g.value(s).clone())
    }

    /// One posterior draw `g(z)`, `z ~ q(z|x)`, for a normalised `[n, 1, h, w]`
    /// input of any size at least [`VaeSpec::multiple`]; other sizes are
    /// reflect-padded and cropped back.
    pub fn sample_tensor(&self, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        with_padding(x, self.spec.multiple(), |x| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let post = self.encode(&mut g, xv)?;
            let zs = self.sample_latent(&mut g, &post, rng);
            let s = self.decode(&mut g, &zs)?;
            Ok(g.value(s).clone())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoisingVae {
        let spec = VaeSpec {
            levels: vec![
                LatentLevel { channels: 4, latent_channels: 2 },
                LatentLevel { channels: 6, latent_channels: 3 },
            ],
            downsample_per_level: 1,
            kernel_size: 3,
        };
        DenoisingVae::new(spec, 5).unwrap()
    }

    fn gaussian(shape: Shape, seed: u64) -> Tensor {
        standard_normal(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn kl_closed_forms() {
        let (zero, _, _) = kl_diag_gaussian(&[0.0f64], &[0.0f64]);
        assert_eq!(zero, 0.0);
        let (one, _, _) = kl_diag_gaussian(&[1.0f64], &[0.0f64]);
        assert!((one - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reparameterised_gradient_matches_finite_differences() {
        // One pixel: loss 0.5·(x − z)², z = μ + σ·ε, averaged over 10⁴ draws.
        let (mu0, logvar, x) = (0.3f64, 0.25f64.ln(), 2.0f64);
        let one = |v: f64| Tensor::full([1, 1, 1, 1], v as f32);
        let mut store = ParamStore::new();
        let mu_id = store.add("mu", one(mu0));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let eps: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let n = eps.len() as f64;
        let sigma = (0.5 * logvar).exp();
        let mc_loss = |mu: f64| eps.iter().map(|e| 0.5 * (x - mu - sigma * e).powi(2)).sum::<f64>() / n;

        let mut pathwise = 0.0;
        for &e in &eps {
            let mut g = Graph::new();
            let mu = g.param(&store, mu_id);
            let lv = g.constant(one(logvar));
            let z = g.reparameterize(mu, lv, one(e));
            let loss = g.scalar_fn(&[z], |v| {
                let d = v[0].data()[0] - x as f32;
                (0.5 * d * d, vec![Tensor::full([1, 1, 1, 1], d)])
            });
            pathwise += f64::from(g.backward(loss).get(&store, mu_id).unwrap().data()[0]);
        }
        pathwise /= n;
        let h = 1e-4;
        let fd = (mc_loss(mu0 + h) - mc_loss(mu0 - h)) / (2.0 * h);
        assert!((pathwise - fd).abs() / fd.abs() < 5e-2, "pathwise {pathwise}, finite difference {fd}");
        assert!((pathwise - (mu0 - x)).abs() / (x - mu0) < 5e-2);
    }

    #[test]
    fn kl_is_nonnegative_on_random_encoder_outputs() {
        let vae = tiny();
        for seed in 0..20 {
            let x = gaussian(Shape::new(2, 1, 8, 8), seed).map(|v| v * 3.0);
            for q in vae.encode_tensor(&x).unwrap() {
                let (kl, _, _) = kl_diag_gaussian(q.mu.data(), q.logvar.data());
                assert!(kl >= 0.0);
                assert!(q.logvar.all_finite());
            }
        }
    }

    #[test]
    fn encoder_is_deterministic_and_batch_independent() {
        let vae = tiny();
        let a = gaussian(Shape::new(1, 1, 8, 8), 1);
        let b = gaussian(Shape::new(1, 1, 8, 8), 2);
        let ab = Tensor::cat_batch(&[&a, &b]);
        let ba = Tensor::cat_batch(&[&b, &a]);
        let pab = vae.encode_tensor(&ab).unwrap();
        assert_eq!(pab, vae.encode_tensor(&ab).unwrap());
        let pba = vae.encode_tensor(&ba).unwrap();
        for (x, y) in pab.iter().zip(&pba) {
            assert_eq!(x.mu.narrow_batch(0, 1), y.mu.narrow_batch(1, 1));
            assert_eq!(x.logvar.narrow_batch(1, 1), y.logvar.narrow_batch(0, 1));
        }
    }

    #[test]
    fn degenerate_posterior_returns_mean() {
        let mu = gaussian(Shape::new(1, 2, 3, 3), 3);
        let params = PosteriorParams { mu: mu.clone(), logvar: Tensor::full(mu.shape(), f32::NEG_INFINITY) };
        let z = sample_latent(&params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(z, mu);
    }

    #[test]
    fn latent_draws_have_unit_moments() {
        let shape = Shape::new(1, 1, 1, 100_000);
        let params = PosteriorParams { mu: Tensor::zeros(shape), logvar: Tensor::zeros(shape) };
        let z = sample_latent(&params, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let n = z.len() as f64;
        let mean = z.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = z.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
        let other = sample_latent(&params, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_ne!(z, other);
    }

    #[test]
    fn non_finite_posterior_is_rejected() {
        let shape = Shape::new(1, 1, 1, 2);
        let params = PosteriorParams { mu: Tensor::full(shape, f32::NAN), logvar: Tensor::zeros(shape) };
        assert!(sample_latent(&params, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn decoder_shapes_and_determinism() {
        let vae = DenoisingVae::new(VaeSpec::default(), 3).unwrap();
        for size in [32, 64] {
            let x = gaussian(Shape::new(2, 1, size, size), 4);
            let post = vae.encode_tensor(&x).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let zs: Vec<Tensor> = post
                .iter()
                .map(|q| standard_normal(q.mu.shape(), &mut rng))
                .collect();
            let s = vae.decode_tensor(&zs).unwrap();
            assert_eq!(s.shape(), x.shape());
            assert!(s.all_finite());
            assert_eq!(s, vae.decode_tensor(&zs).unwrap());
        }
    }

    #[test]
    fn decode_rejects_wrong_latents() {
        let vae = tiny();
        let z0 = Tensor::zeros(Shape::new(1, 2, 8, 8));
        let z1 = Tensor::zeros(Shape::new(1, 3, 3, 3));
        assert!(matches!(vae.decode_tensor(&[z0.clone(), z1]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(vae.decode_tensor(&[z0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_input_names_a_layer() {
        let vae = tiny();
        let mut x = Tensor::zeros(Shape::new(1, 1, 4, 4));
        x.data_mut()[3] = f32::NAN;
        match vae.encode_tensor(&x) {
            Err(Error::NonFinite { layer }) => assert_eq!(layer, "enc.l0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn samples_differ_but_stay_finite() {
        let vae = tiny();
        let x = gaussian(Shape::new(1, 1, 8, 8), 6);
        let a = vae.sample_tensor(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = vae.sample_tensor(&x, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(a.all_finite() && b.all_finite());
        let max_diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn loss_terms_match_their_definitions() {
        let vae = tiny();
        let noise = GaussianNoiseModel::new(0.5).unwrap();
        let x = gaussian(Shape::new(2, 1, 4, 4), 7);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fwd = vae.loss(&mut g, &noise, xv, &mut rng, 1.0).unwrap();
        let s = g.value(fwd.sample).clone();

        // Same draw outside the graph.
        let post = vae.encode_tensor(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zs: Vec<Tensor> = post.iter().map(|q| sample_latent(q, &mut rng).unwrap()).collect();
        assert_eq!(vae.decode_tensor(&zs).unwrap(), s);

        let (nll, _) = noise.nll_with_grad(x.data(), s.data());
        let kl: f64 = post.iter().map(|q| kl_diag_gaussian(q.mu.data(), q.logvar.data()).0).sum();
        let b = fwd.breakdown;
        assert!((b.reconstruction - nll / 32.0).abs() < 1e-9);
        assert!((b.kl - kl / 32.0).abs() < 1e-6);
        assert!((f64::from(g.value(fwd.total).item()) - b.total).abs() < 1e-4 * b.total.abs().max(1.0));
    }

    #[test]
    fn reconstruction_at_perfect_fit_is_half_log_two_pi() {
        let noise = GaussianNoiseModel::new(1.0).unwrap();
        let x = [0.25f64, -1.0, 3.0];
        let (nll, _) = noise.nll_with_grad(&x, &x);
        assert!((nll / 3.0 - 0.918_938_533_204_672_7).abs() < 1e-12);
    }
}
