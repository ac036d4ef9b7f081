use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn avcl(args: &[&str]) -> Output {
    avcl_env(args, &[])
}

fn avcl_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_avcl"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn last_line(out: &Output) -> String {
    text(&out.stdout).lines().last().unwrap_or_default().to_string()
}

fn kv(line: &str) -> Vec<(String, String)> {
    line.split_whitespace()
        .map(|p| {
            let (k, v) = p.split_once('=').expect("key=value");
            (k.to_string(), v.to_string())
        })
        .collect()
}

const SMALL: &str = r#"{
  "data": {"per_class": 16, "audio_seconds": 0.2},
  "train": {"epochs": 2, "batch_size": 8, "model": {"hidden_dim": 16, "embed_dim": 8},
            "probe": {"epochs": 10}}
}"#;

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_small(dir: &TempDir, out: &str, seed: &str) -> PathBuf {
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let out = dir.path().join(out);
    let o = avcl(&["train", "--config", s(&cfg), "--seed", seed, "--out", s(&out)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(last_line(&o), format!("checkpoint={}", out.join("checkpoint").display()));
    out
}

#[test]
fn missing_config_exits_2_and_names_path() {
    let o = avcl(&["train", "--config", "/nonexistent/run.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("/nonexistent/run.json"));
}

#[test]
fn unknown_key_exits_2_with_field_and_line() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.json", "{\n  \"stft\": {\"hop\": 3}\n}");
    let o = avcl(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o.stderr);
    assert!(err.contains("hop") && err.contains("line 2"), "{err}");
}

#[test]
fn invalid_value_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"train": {"momentum": 1.5}}"#);
    let o = avcl(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("momentum"));
}

#[test]
fn training_is_reproducible_file_for_file() {
    let dir = TempDir::new().unwrap();
    let a = train_small(&dir, "a", "7");
    let b = train_small(&dir, "b", "7");
    for f in ["metrics.csv", "config.json", "checkpoint/manifest.json", "checkpoint/params.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,total,cgra,selfcl_v,selfcl_a,grad_norm,wall_ms");
    assert_eq!(metrics.lines().count(), 3);
    let c = train_small(&dir, "c", "8");
    assert_ne!(std::fs::read(a.join("checkpoint/params.bin")).unwrap(), std::fs::read(c.join("checkpoint/params.bin")).unwrap());
}

#[test]
fn probe_prints_parseable_accuracy() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "zero.json", &SMALL.replace("\"audio_seconds\": 0.2", "\"audio_seconds\": 0.2, \"noise_sigma\": 0.0"));
    let out = dir.path().join("run");
    let o = avcl(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let p = avcl(&["probe", "--config", s(&cfg), "--seed", "3", "--epochs", "100", "--checkpoint", s(&out.join("checkpoint"))]);
    assert!(p.status.success(), "{}", text(&p.stderr));
    let pairs = kv(&last_line(&p));
    assert_eq!(pairs.len(), 1);
    assert_eq!(pairs[0].0, "test_accuracy");
    assert_eq!(pairs[0].1.parse::<f64>().unwrap(), 1.0);
}

#[test]
fn corrupted_checkpoint_exits_4() {
    let dir = TempDir::new().unwrap();
    let out = train_small(&dir, "run", "1");
    let params = out.join("checkpoint/params.bin");
    let mut bytes = std::fs::read(&params).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&params, bytes).unwrap();
    let cfg = dir.path().join("small.json");
    let o = avcl(&["probe", "--config", s(&cfg), "--seed", "1", "--checkpoint", s(&out.join("checkpoint"))]);
    assert_eq!(o.status.code(), Some(4), "{}", text(&o.stderr));

    std::fs::write(out.join("checkpoint/manifest.json"), "{not json").unwrap();
    let o = avcl(&["probe", "--config", s(&cfg), "--checkpoint", s(&out.join("checkpoint"))]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn dimension_mismatch_exits_4_with_shapes() {
    let dir = TempDir::new().unwrap();
    let out = train_small(&dir, "run", "1");
    let other = write_config(dir.path(), "wide.json", &SMALL.replace("\"per_class\": 16", "\"per_class\": 16, \"visual_dim\": 20"));
    let o = avcl(&["probe", "--config", s(&other), "--checkpoint", s(&out.join("checkpoint"))]);
    assert_eq!(o.status.code(), Some(4));
    let err = text(&o.stderr);
    assert!(err.contains("32") && err.contains("20"), "{err}");
}

#[test]
fn numeric_blowup_exits_3_without_partial_files() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "hot.json",
        &SMALL.replace("\"epochs\": 2,", "\"epochs\": 2, \"lr\": 1e200, \"momentum\": 0.0, \"max_grad_norm\": 0.0,"),
    );
    let out = dir.path().join("run");
    let o = avcl(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o.stderr));
    let left: Vec<_> = std::fs::read_dir(&out).map(|d| d.map(|e| e.unwrap().file_name()).collect()).unwrap_or_default();
    assert!(left.is_empty(), "{left:?}");
}

#[test]
fn spectrogram_outputs_and_decode_errors() {
    let dir = TempDir::new().unwrap();
    let silent = dir.path().join("silence.wav");
    let spec = hound::WavSpec { channels: 1, sample_rate: 24_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(&silent, spec).unwrap();
    for _ in 0..24_000 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();

    let out = dir.path().join("mel.tensor");
    let o = avcl(&["spectrogram", s(&silent), "--out", s(&out)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(last_line(&o), format!("spectrogram={}", out.display()));
    let t = avcl_core::Tensor::load(&out).unwrap();
    assert_eq!(t.shape(), [256, 256]);
    assert!(t.data().iter().all(|&x| x == 0.0));
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("mel.tensor.json")).unwrap()).unwrap();
    assert_eq!(sidecar["stft"]["n_bands"], 256);

    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"RIFF\x10\x00\x00\x00WAVEjunk").unwrap();
    let o = avcl(&["spectrogram", s(&junk), "--out", s(&dir.path().join("x.tensor"))]);
    assert_eq!(o.status.code(), Some(5));
    assert!(text(&o.stderr).contains("junk.wav"));
    assert!(!dir.path().join("x.tensor").exists());
}

#[test]
fn gradcheck_reports_named_checks_and_detects_faults() {
    let o = avcl(&["gradcheck", "--seeds", "2"]);
    assert!(o.status.success());
    let body = text(&o.stdout);
    let checks = body.lines().filter(|l| l.contains("max_rel_error=")).count();
    assert!(checks >= 12, "{body}");
    assert!(last_line(&o).starts_with("gradcheck=pass"));

    let bad = avcl(&["gradcheck", "--seeds", "2", "--inject-fault"]);
    assert!(!bad.status.success());
    assert!(last_line(&bad).starts_with("gradcheck=fail"));
}

#[test]
fn ablate_row_counts_and_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let rows = |axes: &[&str], sub: &str| {
        let out = dir.path().join(sub);
        let mut args = vec!["ablate", "--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(axes);
        let o = avcl(&args);
        assert!(o.status.success(), "{}", text(&o.stderr));
        let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
        let summary = std::fs::read_to_string(out.join("ablation_summary.csv")).unwrap();
        assert_eq!(summary.lines().next(), Some("variant,mean,sd"));
        (csv, summary)
    };
    let (base, summary) = rows(&[], "base");
    assert_eq!(base.lines().next(), Some("variant,seed,accuracy"));
    assert_eq!(base.lines().count(), 1 + 3);
    let accs: Vec<f64> = base.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let mean: f64 = summary.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((mean - accs.iter().sum::<f64>() / 3.0).abs() < 1e-12);

    let (sweep, _) = rows(&["--axes", "lambda_sweep"], "sweep");
    assert_eq!(sweep.lines().count(), 1 + 15);

    let o = avcl(&["ablate", "--axes", "everything"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_cap_is_validated() {
    assert_eq!(avcl_env(&["gradcheck", "--seeds", "1"], &[("AVCL_THREADS", "0")]).status.code(), Some(2));
    assert!(avcl_env(&["gradcheck", "--seeds", "1"], &[("AVCL_THREADS", "2")]).status.success());
}

#[test]
fn one_epoch_default_run_is_quick() {
    let dir = TempDir::new().unwrap();
    let start = std::time::Instant::now();
    let o = avcl(&["train", "--epochs", "1", "--out", s(&dir.path().join("run"))]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn shipped_default_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let cfg = avcl_cli::RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    let defaults = avcl_cli::RunConfig { paths: cfg.paths.clone(), ..Default::default() };
    assert_eq!(cfg, defaults);
}
