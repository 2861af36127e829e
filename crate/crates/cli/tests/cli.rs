use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn divgen(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_divgen"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
}

/// Exit status plus the single `ERROR <code>:` line on stderr.
fn assert_err(o: &Output, exit: i32, code: &str) {
    assert_eq!(o.status.code(), Some(exit), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("ERROR ")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("ERROR {code}: ")), "{}", lines[0]);
}

fn write_config(dir: &Path, extra: serde_json::Value) -> String {
    let mut doc = json!({
        "task": {
            "preset": null,
            "name": "toy",
            "class_labels": ["automobile", "truck"],
            "native_image_size": [16, 16],
            "per_class_count": 12
        },
        "tricks": {"generation_size": [32, 32]},
        "train": {"architecture": "tiny_cnn", "epochs": 2, "batch_size": 8},
        "paths": {"work_dir": dir.join("work")},
        "master_seed": 5
    });
    if let (Some(base), Some(extra)) = (doc.as_object_mut(), extra.as_object()) {
        for (k, v) in extra {
            base.insert(k.clone(), v.clone());
        }
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn cifar10_all_combined_plan_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plan.jsonl");
    let out_s = out.display().to_string();
    let o = divgen(&["plan", "--trick", "all_combined", "--out", &out_s, "--dry-run"], &[]);
    assert_ok(&o);
    assert_eq!(stdout(&o).lines().next(), Some("200000 requests, 10 classes, 4 tricks"));
    assert!(!out.exists());

    let o = divgen(&["plan", "--trick", "all_combined", "--out", &out_s], &[]);
    assert_ok(&o);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 10 * 5000);
    assert!(stdout(&o).contains("domain photo: 5000"));
}

#[test]
fn end_to_end_pipeline_is_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let work = dir.path().join("work");

    let o = divgen(&["plan", "--config", &cfg], &[]);
    assert_ok(&o);
    assert!(stdout(&o).starts_with("24 requests, 2 classes, 1 tricks"));

    let o = divgen(&["synthesize", "--config", &cfg, "--dry-run"], &[]);
    assert_ok(&o);
    assert!(stdout(&o).contains("24 to generate"));
    assert!(!work.join("staging").exists());

    assert_ok(&divgen(&["synthesize", "--config", &cfg], &[]));
    let o = divgen(&["synthesize", "--config", &cfg], &[]);
    assert_ok(&o);
    assert!(stdout(&o).contains("24 already staged, 0 to generate"), "{}", stdout(&o));

    let o = divgen(&["assemble", "--config", &cfg, "--dry-run"], &[]);
    assert_ok(&o);
    assert!(!work.join("dataset").exists());
    assert_ok(&divgen(&["assemble", "--config", &cfg], &[]));
    let manifest = work.join("dataset/manifest.jsonl");
    let before = fs::read(&manifest).unwrap();
    assert_ok(&divgen(&["assemble", "--config", &cfg], &[]));
    assert_eq!(before, fs::read(&manifest).unwrap());

    let m = manifest.display().to_string();
    let o = divgen(&["verify", "--manifest", &m], &[]);
    assert_ok(&o);
    assert!(stdout(&o).contains("clean: 24 entries verified"));

    assert_ok(&divgen(&["train", "--config", &cfg], &[]));
    let model = work.join("models/toy_base_class_tiny_cnn.safetensors");
    assert!(model.exists());
    let o = divgen(&["train", "--config", &cfg], &[]);
    assert_ok(&o);
    assert!(stdout(&o).contains("up to date"), "{}", stdout(&o));

    let ledger = dir.path().join("ledger.json").display().to_string();
    let result = dir.path().join("result.json");
    let model_s = model.display().to_string();
    let dataset = work.join("dataset").display().to_string();
    let o = divgen(
        &["evaluate", "--model", &model_s, "--test", &dataset, "--ledger", &ledger, "--out", &result.display().to_string()],
        &[],
    );
    assert_ok(&o);
    assert!(stdout(&o).starts_with("top-1 "));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&result).unwrap()).unwrap();
    assert_eq!(doc["n_test"], 24);
    assert_eq!(doc["config_digest"].as_str().map(str::len), Some(64));

    let o = divgen(&["report", "--ledger", &ledger, "--dataset", "toy"], &[]);
    assert_ok(&o);
    assert!(stdout(&o).contains("| tiny_cnn | base_class |"), "{}", stdout(&o));
    assert!(stdout(&o).contains("+0.00"));
    let o = divgen(&["report", "--ledger", &ledger, "--format", "csv", "--dataset", "toy"], &[]);
    assert_ok(&o);
    assert_eq!(stdout(&o).lines().next(), Some("dataset,architecture,composition,top1,delta,source"));

    let feats = dir.path().join("features.csv");
    let o = divgen(
        &["features", "--model", &model_s, "--real", &dataset, "--synthetic", &m, "--out", &feats.display().to_string()],
        &[],
    );
    assert_ok(&o);
    let csv = fs::read_to_string(&feats).unwrap();
    assert!(csv.starts_with("source,label,f0,"));
    assert_eq!(csv.lines().count(), 1 + 48);

    // Damage one image: verify names it and exits with the integrity status.
    let first = fs::read_to_string(&manifest).unwrap().lines().nth(1).map(str::to_owned).unwrap();
    let entry: serde_json::Value = serde_json::from_str(&first).unwrap();
    let victim = work.join("dataset").join(entry["file_path"].as_str().unwrap());
    let mut bytes = fs::read(&victim).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&victim, bytes).unwrap();
    let o = divgen(&["verify", "--manifest", &m], &[]);
    assert_err(&o, 4, "IntegrityViolation");
    assert!(stdout(&o).contains(entry["file_path"].as_str().unwrap()));
    assert_err(&divgen(&["train", "--config", &cfg, "--out", &dir.path().join("x.safetensors").display().to_string()], &[]), 4, "ManifestInvalid");
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({"trainer": {}}));
    assert_err(&divgen(&["plan", "--config", &cfg, "--dry-run"], &[]), 2, "ConfigInvalid");
}

#[test]
fn environment_overrides_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let o = divgen(&["plan", "--config", &cfg, "--dry-run"], &[("DIVGEN_TASK_PER_CLASS_COUNT", "3")]);
    assert_ok(&o);
    assert!(stdout(&o).starts_with("6 requests, 2 classes"));
    let o = divgen(&["plan", "--config", &cfg, "--dry-run"], &[("DIVGEN_TRAIN_EPOCHS", "many")]);
    assert_err(&o, 2, "ConfigInvalid");
}

#[test]
fn usage_errors_exit_one() {
    assert_err(&divgen(&["frobnicate"], &[]), 1, "Usage");
    assert_err(&divgen(&["plan", "--trick", "all_the_things", "--dry-run"], &[]), 1, "Usage");
    assert!(divgen(&["--help"], &[]).status.success());
}

#[test]
fn unknown_architecture_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    assert_ok(&divgen(&["synthesize", "--config", &cfg], &[]));
    assert_ok(&divgen(&["assemble", "--config", &cfg], &[]));
    let o = divgen(&["train", "--config", &cfg, "--arch", "lenet", "--dry-run"], &[]);
    assert_err(&o, 2, "UnknownArchitecture");
    assert!(stderr(&o).contains("tiny_cnn"));
}

#[test]
fn unreachable_backend_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = json!({
        "kind": "remote_diffusion",
        "endpoint": format!("http://127.0.0.1:{port}"),
        "retry_limit": 0,
        "retry_backoff": 0.0,
        "max_in_flight": 1
    });
    let cfg = write_config(dir.path(), json!({"backend": backend}));
    assert_err(&divgen(&["synthesize", "--config", &cfg], &[]), 3, "PlanAborted");
}

#[test]
fn demo_sampling_contrast() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("points.csv");
    let o = divgen(&["demo-sampling", "--n", "60", "--draws", "2000", "--out", &csv.display().to_string()], &[]);
    assert_ok(&o);
    let radius = |prefix: &str| -> f64 {
        let line = stdout(&o).lines().find(|l| l.starts_with(prefix)).unwrap().to_string();
        line.split("mean radius ").nth(1).unwrap().split(',').next().unwrap().parse().unwrap()
    };
    assert!(radius("k_subset") > radius("full_hull"));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 2 * 2000);
}

#[test]
fn interpolation_plan_from_embedding_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let set = json!({
        "vectors": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]],
        "source_ids": ["a", "b", "c", "d"],
        "encoder_fingerprint": "test"
    });
    let emb = dir.path().join("emb.json");
    fs::write(&emb, set.to_string()).unwrap();
    let out = dir.path().join("interp.jsonl");
    let args = |dry: bool| {
        let mut v = vec![
            "interp-plan".to_string(),
            "--config".into(),
            cfg.clone(),
            "--embeddings".into(),
            emb.display().to_string(),
            "--scheme".into(),
            "k3".into(),
            "--class".into(),
            "truck".into(),
            "--count".into(),
            "5".into(),
            "--out".into(),
            out.display().to_string(),
        ];
        if dry {
            v.push("--dry-run".into());
        }
        v
    };
    let dry = args(true);
    let o = divgen(&dry.iter().map(String::as_str).collect::<Vec<_>>(), &[]);
    assert_ok(&o);
    assert!(stdout(&o).starts_with("5 requests for class truck"));
    assert!(!out.exists());
    let real = args(false);
    assert_ok(&divgen(&real.iter().map(String::as_str).collect::<Vec<_>>(), &[]));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 6);
    let req: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    let v: Vec<f64> = req["conditioning_embedding"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(req["prompt"], "an image of a truck");

    let bad = divgen(
        &["interp-plan", "--config", &cfg, "--embeddings", &emb.display().to_string(), "--scheme", "k3", "--class", "horse"],
        &[],
    );
    assert_err(&bad, 2, "UnknownClass");
}

#[test]
fn verify_missing_manifest_fails() {
    assert_err(&divgen(&["verify", "--manifest", "/nonexistent/manifest.jsonl"], &[]), 4, "IntegrityViolation");
}
