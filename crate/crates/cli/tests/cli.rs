use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mel_core::config::RunConfig;
use mel_core::model::{load_bundle, save_bundle, ModelBundle};
use mel_core::motion::motion_from_json;
use mel_core::pipeline::CURVES_FILE;

const SMALL: &str = r#"
seed = 5
[synth]
n_triplets = 20
frames = 16
[text]
embed_dim = 8
max_tokens = 8
[model]
latent_dim = 16
cond_layers = 1
diff_layers = 1
heads = 2
max_frames = 32
ffn_mult = 2
dropout = 0.0
[diffusion]
timesteps = 20
[train]
steps = 2
batch_size = 4
[eval]
batch_size = 2
"#;

fn mel(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("small.toml");
    if !config.exists() {
        fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_mel"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir)
        .args(args)
        .env_remove("MEL_OUT")
        .output()
        .unwrap()
}

fn ok(out: Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "status {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not a JSON error line: {text}"))
}

#[test]
fn generate_analyze_filter_at_zero_keeps_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(mel(d, &["generate"]));
    let manifest = d.join("manifest_train.jsonl");
    let m = manifest.to_str().unwrap();
    let analyzed = ok(mel(d, &["analyze", "--manifest", m, "--plots", "--plot-limit", "2"]));
    assert_eq!(analyzed["plots"], 2);
    assert!(d.join("plots").read_dir().unwrap().count() == 2);
    assert!(d.join(CURVES_FILE).exists());
    let filtered = ok(mel(d, &["filter", "--manifest", m, "--threshold", "0"]));
    let out = filtered["manifest"].as_str().unwrap();
    assert_eq!(fs::read(&manifest).unwrap(), fs::read(out).unwrap());
    assert!(d.join("config.toml").exists());
}

#[test]
fn train_with_zero_steps_saves_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(mel(d, &["generate"]));
    let manifest = d.join("manifest_train.jsonl");
    let trained = ok(mel(d, &["train", "--manifest", manifest.to_str().unwrap(), "--steps", "0"]));
    assert_eq!(trained["steps"], 0);
    let cfg = RunConfig::load(d.join("config.toml")).unwrap();
    let init = ModelBundle::new(cfg.model.clone(), cfg.seed).unwrap();
    assert_eq!(load_bundle(d.join("checkpoint.json")).unwrap(), init);
    assert_eq!(fs::read_to_string(d.join("metrics.jsonl")).unwrap(), "");
}

#[test]
fn sample_with_constant_model_returns_constant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(mel(d, &["generate"]));
    let cfg = RunConfig::from_toml(SMALL).unwrap().resolve().unwrap();
    let mut bundle = ModelBundle::new(cfg.model.clone(), 1).unwrap();
    let constant: Vec<f64> = (0..cfg.model.feature_dim).map(|j| 0.25 * j as f64 - 1.0).collect();
    {
        let params = bundle.params_mut();
        let w = params.id("diff.out.weight").unwrap();
        params.get_mut(w).fill(0.0);
        let b = params.id("diff.out.bias").unwrap();
        for (v, c) in params.get_mut(b).iter_mut().zip(&constant) {
            *v = *c;
        }
    }
    let ckpt = d.join("constant.json");
    save_bundle(&bundle, &ckpt, None).unwrap();
    let source = d.join("triplets/syn00000.json");
    let out_file = d.join("edit.json");
    let args = [
        "sample",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--source",
        source.to_str().unwrap(),
        "--instruction",
        "hold still",
        "--frames",
        "10",
        "--s-text",
        "1",
        "--s-motion",
        "1",
        "--output",
        out_file.to_str().unwrap(),
    ];
    ok(mel(d, &args));
    let edited = motion_from_json(&fs::read_to_string(&out_file).unwrap()).unwrap();
    assert_eq!(edited.len(), 10);
    for row in edited.frames().rows() {
        assert_eq!(row.to_vec(), constant);
    }
}

#[test]
fn evaluate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(mel(d, &["generate"]));
    let train = d.join("manifest_train.jsonl");
    ok(mel(d, &["train", "--manifest", train.to_str().unwrap()]));
    let test = d.join("manifest_test.jsonl");
    let ckpt = d.join("checkpoint.json");
    let summary = ok(mel(d, &["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", test.to_str().unwrap()]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["r_at"], summary["r_at"]);
    assert!(report["config_hash"].is_string());
    assert_eq!(report["truncation"], "common prefix");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let unknown = mel(d, &["generate", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert_eq!(error_line(&unknown)["error"], "usage");

    let missing = mel(d, &["train", "--manifest", "/nonexistent/manifest.jsonl"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(error_line(&missing)["message"].as_str().unwrap().contains("not found"));

    let bad_cfg = d.join("bad.toml");
    fs::write(&bad_cfg, "[train]\nstepz = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mel"))
        .args(["--config", bad_cfg.to_str().unwrap(), "generate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let broken = d.join("broken.json");
    fs::write(&broken, "{\"version\": \"mdt-0\"}").unwrap();
    let source = d.join("src.json");
    fs::write(&source, "{}").unwrap();
    let out = mel(
        d,
        &["sample", "--checkpoint", broken.to_str().unwrap(), "--source", source.to_str().unwrap(), "--instruction", "x"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "checkpoint");
}

#[test]
fn mel_out_overrides_out_flag() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("from_env");
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mel"))
        .args(["--config", config.to_str().unwrap(), "--out", dir.path().join("flag").to_str().unwrap(), "generate"])
        .env("MEL_OUT", &env_out)
        .output()
        .unwrap();
    ok(out);
    assert!(env_out.join("manifest_train.jsonl").exists());
    assert!(!dir.path().join("flag").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(mel(d, &["generate", "--workers", "2"]));
        let m = d.join("manifest_train.jsonl");
        ok(mel(d, &["train", "--manifest", m.to_str().unwrap()]));
    }
    for file in ["manifest_train.jsonl", "manifest_test.jsonl", "checkpoint.json", "metrics.jsonl"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
}
