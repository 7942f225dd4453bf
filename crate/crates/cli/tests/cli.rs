use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dud_core::data::read_image;
use dud_core::inference::{median_in_place, sample_rng, sample_solution};
use dud_core::training::load_checkpoint;

fn dud(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dud"))
        .args(args)
        .env_remove("DUD_SEED_OVERRIDE")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const TINY: &str = r#"{
  "dataset": {
    "spec": {
      "signal": { "kind": "conjugate", "mean": 0.5, "std": 0.2 },
      "image_size": [16, 16],
      "count_train": 8,
      "count_val": 2,
      "count_test": 3,
      "noise_sigma": 0.2,
      "seed": 5
    }
  },
  "training": { "batch_size": 4, "patch_size": 16, "total_steps": 200, "val_interval": 50 },
  "inference": { "n_samples": 4 }
}"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    elapsed: Duration,
}

impl Run {
    fn s(&self, p: &str) -> String {
        self.root.join(p).to_str().unwrap().to_string()
    }
}

/// One synthesised dataset and one 200-step training run shared by the tests.
fn trained() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = write_config(&root, TINY);
        let c = config.to_str().unwrap();
        let data = root.join("data");
        ok(&dud(&["synth", "-c", c, "--out", data.to_str().unwrap()]));
        let path_set = format!("dataset.path={}", data.display());
        let start = Instant::now();
        ok(&dud(&["train", "-c", c, "--set", &path_set, "--out", root.join("run").to_str().unwrap()]));
        Run { _dir: dir, root, config, elapsed: start.elapsed() }
    })
}

#[test]
fn synth_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        ok(&dud(&["synth", "-c", c.to_str().unwrap(), "--out", d.to_str().unwrap()]));
    }
    assert!(a.join("spec.json").exists());
    let count = fs::read_dir(a.join("noisy")).unwrap().count();
    assert_eq!(count, 13);
    for sub in ["clean", "noisy"] {
        for entry in fs::read_dir(a.join(sub)).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(fs::read(a.join(sub).join(&name)).unwrap(), fs::read(b.join(sub).join(&name)).unwrap());
        }
    }
}

#[test]
fn seed_override_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&dud(&["synth", "-c", c.to_str().unwrap(), "--out", a.to_str().unwrap()]));
    let out = Command::new(env!("CARGO_BIN_EXE_dud"))
        .args(["synth", "-c", c.to_str().unwrap(), "--out", b.to_str().unwrap()])
        .env("DUD_SEED_OVERRIDE", "99")
        .output()
        .unwrap();
    ok(&out);
    assert_ne!(fs::read(a.join("noisy/0000.dud")).unwrap(), fs::read(b.join("noisy/0000.dud")).unwrap());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), TINY);
    let out = dud(&["synth", "-c", c.to_str().unwrap(), "--set", "dataset.spec.noise_sigma=-0.1", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise_sigma"));

    let out = dud(&["synth", "--set", "training.no_such_field=1"]);
    assert_eq!(out.status.code(), Some(2));

    let out = dud(&["synth", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.dud");
    dud_core::data::write_image(&img, &dud_core::ImagePlane::filled(16, 16, 0.5)).unwrap();
    let out = dud(&[
        "denoise",
        "--checkpoint",
        dir.path().join("nope.safetensors").to_str().unwrap(),
        "-o",
        dir.path().join("out").to_str().unwrap(),
        img.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn train_writes_metrics_checkpoints_and_config() {
    let run = trained();
    assert!(run.elapsed < Duration::from_secs(120), "took {:?}", run.elapsed);
    let metrics = fs::read_to_string(run.root.join("run/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step,vae_recon,vae_kl,direct_l1,direct_l2,lr_vae,lr_dd");
    assert_eq!(lines.len(), 1 + 4);
    for f in ["config.json", "last.safetensors", "ckpt_00000200.safetensors", "best_vae.safetensors"] {
        assert!(run.root.join("run").join(f).exists(), "{f}");
    }
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.root.join("run/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["training"]["total_steps"], 200);
}

#[test]
fn resume_continues_the_step_counter() {
    let run = trained();
    let out_dir = run.root.join("resumed");
    let out = dud(&[
        "train",
        "-c",
        run.config.to_str().unwrap(),
        "--set",
        &format!("dataset.path={}", run.s("data")),
        "--set",
        "training.total_steps=250",
        "--resume",
        &run.s("run/last.safetensors"),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    ok(&out);
    assert_eq!(load_checkpoint(out_dir.join("last.safetensors")).unwrap().step, 250);
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.lines().nth(1).unwrap().starts_with("250,"));
}

fn denoise(run: &Run, out: &str, extra: &[&str]) -> PathBuf {
    let dir = run.root.join(out);
    let ckpt = run.s("run/last.safetensors");
    let noisy = run.s("data/noisy");
    let mut args = vec!["denoise", "-c", run.config.to_str().unwrap(), "--checkpoint", &ckpt];
    args.extend_from_slice(extra);
    let d = dir.to_str().unwrap().to_string();
    args.extend_from_slice(&["-o", &d, &noisy]);
    ok(&dud(&args));
    dir
}

#[test]
fn denoise_modes() {
    let run = trained();
    let direct = denoise(run, "direct", &["--mode", "direct", "--n-samples", "1"]);
    assert_eq!(fs::read_dir(&direct).unwrap().count(), 13);
    let direct_many = denoise(run, "direct_many", &["--mode", "direct", "--n-samples", "500"]);
    let name = "0004.dud";
    assert_eq!(fs::read(direct.join(name)).unwrap(), fs::read(direct_many.join(name)).unwrap());

    let sample = denoise(run, "sample", &["--mode", "sample", "--seed", "7"]);
    let single = denoise(run, "single", &["--mode", "consensus", "--n-samples", "1", "--seed", "7"]);
    for j in 0..13 {
        let name = format!("{j:04}.dud");
        assert_eq!(fs::read(sample.join(&name)).unwrap(), fs::read(single.join(&name)).unwrap());
    }

    let median = denoise(run, "median", &["--mode", "consensus", "--aggregator", "median", "--n-samples", "4", "--seed", "7"]);
    let state = load_checkpoint(run.root.join("run/last.safetensors")).unwrap();
    let j = 2;
    let x = read_image(run.root.join(format!("data/noisy/{j:04}.dud"))).unwrap();
    let draws: Vec<_> = (0..4)
        .map(|i| sample_solution(&state.vae, &state.normalization, &x, &mut sample_rng(7 + j as u64, i)).unwrap())
        .collect();
    let got = read_image(median.join(format!("{j:04}.dud"))).unwrap();
    for p in 0..x.len() {
        let mut v: Vec<f32> = draws.iter().map(|d| d.pixels()[p]).collect();
        v.sort_by(f32::total_cmp);
        let expected = (v[1] + v[2]) / 2.0;
        assert!((got.pixels()[p] - expected).abs() < 1e-5, "pixel {p}: {} vs {expected}", got.pixels()[p]);
        assert!((got.pixels()[p] - median_in_place(&mut v)).abs() < 1e-5);
    }
}

#[test]
fn bench_and_eval_outputs() {
    let run = trained();
    let out = run.root.join("bench");
    let data = format!("dataset.path={}", run.s("data"));
    ok(&dud(&[
        "bench",
        "-c",
        run.config.to_str().unwrap(),
        "--set",
        &data,
        "--checkpoint",
        &run.s("run/last.safetensors"),
        "--out",
        out.to_str().unwrap(),
    ]));
    let mut r = csv::Reader::from_path(out.join("benchmark.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 8);
    assert!(fs::metadata(out.join("benchmark.png")).unwrap().len() > 0);
    for row in &rows {
        let seconds: f64 = row[2].parse().unwrap();
        assert!(seconds > 0.0);
        let _: f64 = row[3].parse().unwrap();
    }

    ok(&dud(&[
        "eval",
        "-c",
        run.config.to_str().unwrap(),
        "--set",
        &data,
        "--checkpoint",
        &run.s("run/last.safetensors"),
        "--out",
        out.to_str().unwrap(),
    ]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    let methods: Vec<&str> = report.as_array().unwrap().iter().map(|e| e["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["identity", "consensus-mean-4", "direct-L1", "direct-L2"]);
    assert!(report[0]["oracle_rmse"].as_f64().unwrap() > 0.0);
}
