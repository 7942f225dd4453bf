use std::fs;
use std::path::{Path, PathBuf};

use dud_core::data::{generate_dataset, read_dataset, read_image, write_dataset, write_image};
use dud_core::eval::{evaluate_against_oracle, plot_benchmark, psnr_set, run_benchmark, write_benchmark_csv};
use dud_core::inference::{consensus, direct_denoise, sample_rng, sample_solution, Mode};
use dud_core::training::load_checkpoint;
use dud_core::{Dataset, DatasetSpec, GaussianNoiseModel, LossKind, Predictor, RunConfig, SignalFamily, TrainState, Trainer};
use serde::Serialize;

use crate::error::{CliError, Result};

fn io(context: String) -> impl FnOnce(std::io::Error) -> CliError {
    move |source| CliError::Io { context, source }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(format!("creating {}", dir.display())))
}

/// Writes the resolved configuration next to the run's artifacts.
fn echo_config(config: &RunConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(config).map_err(dud_core::Error::from)?;
    fs::write(&path, text).map_err(io(format!("writing {}", path.display())))
}

/// Reads `dataset.path` when it holds a dataset, else generates `dataset.spec`.
pub fn load_dataset(config: &RunConfig) -> Result<(DatasetSpec, Dataset)> {
    let d = &config.dataset;
    match (&d.path, &d.spec) {
        (Some(p), Some(spec)) if !p.join("spec.json").exists() => Ok((spec.clone(), generate_dataset(spec)?)),
        (Some(p), _) => Ok(read_dataset(p)?),
        (None, Some(spec)) => Ok((spec.clone(), generate_dataset(spec)?)),
        (None, None) => Err(CliError::Config("set `dataset.path` or `dataset.spec`".into())),
    }
}

pub fn synth(config: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let spec = config
        .dataset
        .spec
        .as_ref()
        .ok_or_else(|| CliError::Config("synth needs `dataset.spec`".into()))?;
    let dir = out
        .or_else(|| config.dataset.path.clone())
        .ok_or_else(|| CliError::Config("synth needs `dataset.path` or --out".into()))?;
    let data = generate_dataset(spec)?;
    write_dataset(&dir, spec, &data)?;
    println!(
        "wrote {} train / {} val / {} test images to {} (sigma {}, seed {})",
        spec.count_train,
        spec.count_val,
        spec.count_test,
        dir.display(),
        spec.noise_sigma,
        spec.seed
    );
    Ok(())
}

pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let (spec, data) = load_dataset(config)?;
    let out = config.output_dir.clone();
    echo_config(config, &out)?;
    let mut trainer = match resume {
        Some(path) => {
            let state = load_checkpoint(path)?;
            state.ensure_matches(config)?;
            log::info!("resuming from step {}", state.step);
            Trainer::with_state(config.clone(), &data, state)?
        }
        None => Trainer::new(config.clone(), &data, GaussianNoiseModel::new(spec.noise_sigma)?)?,
    }
    .with_output_dir(&out)?;
    let summary = trainer.run()?;
    let direct: Vec<String> = summary.best_direct_val.iter().map(|(k, v)| format!("{k} {v:.6}")).collect();
    println!(
        "trained {} steps; best validation: vae {:.6}, direct {}",
        summary.steps,
        summary.best_vae_val,
        direct.join(", ")
    );
    Ok(())
}

fn checkpoint_path(config: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| config.output_dir.join("last.safetensors"))
}

fn pick_head(state: &TrainState, wanted: Option<LossKind>) -> Result<&dyn Predictor> {
    let head = match wanted {
        Some(kind) => state
            .head(kind)
            .ok_or_else(|| CliError::Config(format!("checkpoint has no direct-{kind} network")))?,
        None => &state.heads[0],
    };
    Ok(&head.dd)
}

/// Expands directories into their `.dud` files, sorted by name.
fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(io(format!("listing {}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "dud"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::Config("no input images".into()));
    }
    Ok(files)
}

pub fn denoise(config: &RunConfig, checkpoint: Option<PathBuf>, inputs: &[PathBuf], output: &Path) -> Result<()> {
    let state = load_checkpoint(checkpoint_path(config, checkpoint))?;
    let inf = &config.inference;
    let norm = state.normalization;
    let files = collect_inputs(inputs)?;
    ensure_dir(output)?;
    for (j, file) in files.iter().enumerate() {
        let x = read_image(file)?;
        let seed = inf.seed.wrapping_add(j as u64);
        let y = match inf.mode {
            Mode::Sample => sample_solution(&state.vae, &norm, &x, &mut sample_rng(seed, 0))?,
            Mode::Consensus => consensus(&state.vae, &norm, &x, &inf.consensus(), seed, inf.median_budget_bytes)?,
            Mode::Direct => direct_denoise(pick_head(&state, inf.head)?, &norm, &x)?,
        };
        let name = file.file_name().ok_or_else(|| CliError::Config(format!("{} has no file name", file.display())))?;
        write_image(output.join(name), &y)?;
    }
    println!("denoised {} images into {}", files.len(), output.display());
    Ok(())
}

pub fn bench(config: &RunConfig, checkpoint: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let state = load_checkpoint(checkpoint_path(config, checkpoint))?;
    let (_, data) = load_dataset(config)?;
    let heads: Vec<(LossKind, &dyn Predictor)> =
        state.heads.iter().map(|h| (h.dd.loss_kind(), &h.dd as &dyn Predictor)).collect();
    let b = &config.bench;
    let records = run_benchmark(
        &state.vae,
        &heads,
        &state.normalization,
        &data.test,
        &b.effective_n_list(),
        &b.aggregators,
        b.seed,
        config.inference.median_budget_bytes,
    )?;
    let dir = out.unwrap_or_else(|| config.output_dir.clone());
    echo_config(config, &dir)?;
    write_benchmark_csv(&records, dir.join("benchmark.csv"))?;
    plot_benchmark(&records, dir.join("benchmark.png"))?;
    for r in &records {
        println!("{r}");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalEntry {
    method: String,
    mean_psnr_db: f64,
    std_psnr_db: f64,
    /// RMSE to the closed-form posterior mean, on conjugate data only.
    oracle_rmse: Option<f64>,
}

pub fn eval(config: &RunConfig, checkpoint: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let state = load_checkpoint(checkpoint_path(config, checkpoint))?;
    let (spec, data) = load_dataset(config)?;
    let noisy = Dataset::noisy(&data.test);
    let clean = Dataset::clean(&data.test);
    let inf = &config.inference;
    let norm = state.normalization;

    let mut methods: Vec<(String, Vec<_>)> = vec![("identity".into(), noisy.clone())];
    let spec_c = inf.consensus();
    let outputs = noisy
        .iter()
        .enumerate()
        .map(|(j, x)| consensus(&state.vae, &norm, x, &spec_c, inf.seed.wrapping_add(j as u64), inf.median_budget_bytes))
        .collect::<dud_core::Result<Vec<_>>>()?;
    methods.push((format!("consensus-{}-{}", spec_c.aggregator, spec_c.n_samples), outputs));
    for h in &state.heads {
        let outputs = noisy.iter().map(|x| direct_denoise(&h.dd, &norm, x)).collect::<dud_core::Result<Vec<_>>>()?;
        methods.push((format!("direct-{}", h.dd.loss_kind()), outputs));
    }

    let mut entries = Vec::new();
    for (method, outputs) in methods {
        let p = psnr_set(&outputs, &clean)?;
        let oracle_rmse = match spec.signal {
            SignalFamily::Conjugate { mean, std } => {
                Some(evaluate_against_oracle(&outputs, &noisy, mean, std, spec.noise_sigma)?.rmse)
            }
            SignalFamily::Blobs { .. } => None,
        };
        let rmse = oracle_rmse.map(|r| format!(", oracle rmse {r:.5}")).unwrap_or_default();
        println!("{method:<24} {:.3} dB (std {:.3}){rmse}", p.mean, p.std);
        entries.push(EvalEntry { method, mean_psnr_db: p.mean, std_psnr_db: p.std, oracle_rmse });
    }
    let dir = out.unwrap_or_else(|| config.output_dir.clone());
    ensure_dir(&dir)?;
    let path = dir.join("eval.json");
    let text = serde_json::to_string_pretty(&entries).map_err(dud_core::Error::from)?;
    fs::write(&path, text).map_err(io(format!("writing {}", path.display())))
}
