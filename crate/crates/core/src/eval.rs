//! PSNR, the conjugate-Gaussian oracle and the time-versus-quality benchmark.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{ImagePair, ImagePlane};
use crate::direct::LossKind;
use crate::error::{Error, Result};
use crate::inference::{consensus, direct_denoise, Aggregator, ConsensusSpec, Predictor, Sampler};
use crate::training::normalize::Normalization;

/// Returned when estimate and ground truth agree exactly.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Recorded in every benchmark row.
pub const PEAK_CONVENTION: &str = "per-image clean range (max - min)";

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(estimate: &ImagePlane, clean: &ImagePlane, peak: f64) -> Result<f64> {
    estimate.same_shape(clean)?;
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::invalid("peak", format!("must be > 0, got {peak}")));
    }
    let mse = mse(estimate.pixels(), clean.pixels());
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum();
    sum / a.len() as f64
}

/// `max - min` of an image.
pub fn dynamic_range(image: &ImagePlane) -> f64 {
    let (lo, hi) = image
        .pixels()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    f64::from(hi) - f64::from(lo)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PsnrResult {
    pub per_image: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// PSNR of every estimate against its clean image, with the clean image's
/// range as peak.
pub fn psnr_set(estimates: &[ImagePlane], clean: &[ImagePlane]) -> Result<PsnrResult> {
    if estimates.len() != clean.len() || estimates.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} estimates for {} clean images", estimates.len(), clean.len())));
    }
    let per_image = estimates
        .iter()
        .zip(clean)
        .map(|(e, c)| psnr(e, c, dynamic_range(c)))
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    let mean = per_image.iter().sum::<f64>() / n;
    let std = (per_image.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(PsnrResult { per_image, mean, std })
}

/// Exact posterior mean `(σn²·μ0 + σ0²·x) / (σ0² + σn²)` for i.i.d.
/// `N(μ0, σ0²)` pixels observed under `N(0, σn²)` noise.
pub fn conjugate_posterior_mean(x: &ImagePlane, mu0: f64, sigma0: f64, sigma_n: f64) -> Result<ImagePlane> {
    if !(sigma0.is_finite() && sigma0 > 0.0) {
        return Err(Error::invalid("sigma0", "must be > 0"));
    }
    if !(sigma_n.is_finite() && sigma_n > 0.0) {
        return Err(Error::invalid("sigma_n", "must be > 0"));
    }
    let (v0, vn) = (sigma0 * sigma0, sigma_n * sigma_n);
    Ok(x.map(|v| ((vn * mu0 + v0 * f64::from(v)) / (v0 + vn)) as f32))
}

/// Root mean squared error over all pixels of two image sets.
pub fn rmse(a: &[ImagePlane], b: &[ImagePlane]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} images against {}", a.len(), b.len())));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        x.same_shape(y)?;
        sum += mse(x.pixels(), y.pixels()) * x.len() as f64;
        count += x.len();
    }
    Ok((sum / count as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    /// RMSE of the method's outputs to the posterior mean.
    pub rmse: f64,
    /// RMSE of the noisy inputs to the posterior mean.
    pub identity_rmse: f64,
}

pub fn evaluate_against_oracle(
    outputs: &[ImagePlane],
    noisy: &[ImagePlane],
    mu0: f64,
    sigma0: f64,
    sigma_n: f64,
) -> Result<OracleReport> {
    let oracle = noisy
        .iter()
        .map(|x| conjugate_posterior_mean(x, mu0, sigma0, sigma_n))
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleReport { rmse: rmse(outputs, &oracle)?, identity_rmse: rmse(noisy, &oracle)? })
}

/// Least-squares line `y = slope·x + intercept` and its R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Consensus(Aggregator),
    Direct(LossKind),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRecord {
    pub method: Method,
    pub n_samples: usize,
    pub total_seconds: f64,
    pub mean_psnr_db: f64,
    pub std_psnr_db: f64,
}

impl BenchmarkRecord {
    pub fn label(&self) -> String {
        match self.method {
            Method::Consensus(a) => format!("consensus-{a}-{}", self.n_samples),
            Method::Direct(k) => format!("direct-{k}"),
        }
    }
}

impl fmt::Display for BenchmarkRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<24} {:>10.4}s {:>8.3} dB", self.label(), self.total_seconds, self.mean_psnr_db)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    /// Append N = 1000 to `n_list`.
    pub with_1000: bool,
    pub seed: u64,
    pub aggregators: Vec<Aggregator>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { n_list: vec![1, 10, 100], with_1000: false, seed: 0, aggregators: vec![Aggregator::Mean, Aggregator::Median] }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return Err(Error::invalid("bench.n_list", "must be a non-empty list of positive counts"));
        }
        Ok(())
    }

    pub fn effective_n_list(&self) -> Vec<usize> {
        let mut n = self.n_list.clone();
        if self.with_1000 && !n.contains(&1000) {
            n.push(1000);
        }
        n
    }
}

/// Times every method over the whole test set and scores it by PSNR.
///
/// Each method gets one untimed warm-up call. Timing brackets each per-image
/// inference call, which covers normalisation, all forward passes and the
/// aggregation, and is summed over images. Image `j` of a consensus uses
/// master seed `seed + j`, so PSNRs are reproducible; times are not.
pub fn run_benchmark<S: Sampler + ?Sized>(
    sampler: &S,
    direct: &[(LossKind, &dyn Predictor)],
    norm: &Normalization,
    test: &[ImagePair],
    n_list: &[usize],
    aggregators: &[Aggregator],
    seed: u64,
    median_budget_bytes: usize,
) -> Result<Vec<BenchmarkRecord>> {
    if test.is_empty() {
        return Err(Error::invalid("test set", "is empty"));
    }
    let clean: Vec<ImagePlane> = test.iter().map(|p| p.clean.clone()).collect();
    let mut records = Vec::new();
    let mut timed = |method: Method, n: usize, f: &dyn Fn(usize, &ImagePlane) -> Result<ImagePlane>| -> Result<()> {
        f(0, &test[0].noisy)?;
        let mut seconds = 0.0;
        let mut outputs = Vec::with_capacity(test.len());
        for (j, pair) in test.iter().enumerate() {
            let start = Instant::now();
            let out = f(j, &pair.noisy)?;
            seconds += start.elapsed().as_secs_f64();
            outputs.push(out);
        }
        let p = psnr_set(&outputs, &clean)?;
        log::info!("benchmark {method:?} n={n}: {seconds:.4}s, {:.3} dB", p.mean);
        records.push(BenchmarkRecord {
            method,
            n_samples: n,
            total_seconds: seconds,
            mean_psnr_db: p.mean,
            std_psnr_db: p.std,
        });
        Ok(())
    };
    for &aggregator in aggregators {
        for &n in n_list {
            let spec = ConsensusSpec { n_samples: n, aggregator };
            timed(Method::Consensus(aggregator), n, &|j, x| {
                consensus(sampler, norm, x, &spec, seed.wrapping_add(j as u64), median_budget_bytes)
            })?;
        }
    }
    for &(kind, p) in direct {
        timed(Method::Direct(kind), 1, &|_, x| direct_denoise(p, norm, x))?;
    }
    records.sort_by(|a, b| (a.method, a.n_samples).cmp(&(b.method, b.n_samples)));
    Ok(records)
}

pub fn write_benchmark_csv(records: &[BenchmarkRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["method", "n_samples", "total_seconds", "mean_psnr_db", "std_psnr_db", "peak_convention"])?;
    for r in records {
        w.write_record([
            r.label(),
            r.n_samples.to_string(),
            format!("{:.6}", r.total_seconds),
            format!("{:.4}", r.mean_psnr_db),
            format!("{:.4}", r.std_psnr_db),
            PEAK_CONVENTION.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.as_ref().display()), e))
}

fn color(method: Method) -> Rgb<u8> {
    match method {
        Method::Consensus(Aggregator::Mean) => Rgb([31, 119, 180]),
        Method::Consensus(Aggregator::Median) => Rgb([44, 160, 44]),
        Method::Direct(LossKind::L1) => Rgb([214, 39, 40]),
        Method::Direct(LossKind::L2) => Rgb([255, 127, 14]),
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn draw_marker(img: &mut RgbImage, (x, y): (f64, f64), c: Rgb<u8>) {
    for dy in -3i64..=3 {
        for dx in -3i64..=3 {
            let (px, py) = (x as i64 + dx, y as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
    }
}

/// Time-versus-PSNR scatter: log-scaled seconds on x, mean PSNR on y,
/// consensus points of one aggregator joined in order of N. Decades on the
/// x axis and whole decibels on the y axis get tick marks; colours follow
/// the method (mean blue, median green, direct-L1 red, direct-L2 orange).
pub fn plot_benchmark(records: &[BenchmarkRecord], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Plot("no records to plot".into()));
    }
    let (w, h, margin) = (720u32, 480u32, 60.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let lx: Vec<f64> = records.iter().map(|r| r.total_seconds.max(1e-9).log10()).collect();
    let (mut x_lo, mut x_hi) = lx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (mut y_lo, mut y_hi) = records
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.mean_psnr_db), b.max(r.mean_psnr_db)));
    x_lo = x_lo.floor();
    x_hi = x_hi.ceil().max(x_lo + 1.0);
    y_lo = y_lo.floor() - 0.5;
    y_hi = y_hi.ceil() + 0.5;
    let px = |x: f64| margin + (x - x_lo) / (x_hi - x_lo) * (f64::from(w) - 2.0 * margin);
    let py = |y: f64| f64::from(h) - margin - (y - y_lo) / (y_hi - y_lo) * (f64::from(h) - 2.0 * margin);

    let axis = Rgb([0, 0, 0]);
    let bottom = f64::from(h) - margin;
    draw_line(&mut img, (margin, bottom), (f64::from(w) - margin, bottom), axis);
    draw_line(&mut img, (margin, margin), (margin, bottom), axis);
    let mut decade = x_lo;
    while decade <= x_hi {
        draw_line(&mut img, (px(decade), bottom), (px(decade), bottom + 8.0), axis);
        decade += 1.0;
    }
    let mut db = y_lo.ceil();
    while db <= y_hi {
        draw_line(&mut img, (margin - 8.0, py(db)), (margin, py(db)), axis);
        db += 1.0;
    }

    for aggregator in [Aggregator::Mean, Aggregator::Median] {
        let method = Method::Consensus(aggregator);
        let pts: Vec<(f64, f64)> = records
            .iter()
            .zip(&lx)
            .filter(|(r, _)| r.method == method)
            .map(|(r, &x)| (px(x), py(r.mean_psnr_db)))
            .collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0], pair[1], color(method));
        }
    }
    for (r, &x) in records.iter().zip(&lx) {
        draw_marker(&mut img, (px(x), py(r.mean_psnr_db)), color(r.method));
    }
    img.save(path.as_ref()).map_err(|e| Error::Plot(e.to_string()))
}
