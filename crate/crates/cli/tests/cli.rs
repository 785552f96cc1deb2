//! Runs the `unitlab` binary end to end on small synthetic data.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "model": {"kind": "translation", "arch": {"width": 2, "res_width": 8, "front_kernel": 3, "res_blocks": 1, "disc_layers": 2, "disc_width": 2, "shared_blocks": 1}},
  "data": {"kind": "synthetic", "count": 12, "resolution": 16},
  "trainer": {"log_interval": 5, "checkpoint_interval": 0},
  "ablation": {"seeds": [0]}
}"#;

fn unitlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unitlab")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    std::fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

fn digest_line(stdout: &str) -> String {
    stdout.lines().find(|l| l.starts_with("checkpoint ")).unwrap().rsplit(' ').next().unwrap().to_string()
}

#[test]
fn train_writes_a_checkpoint_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut digests = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let stdout = ok(&unitlab(&["train", "--config", &cfg, "--iterations", "10", "--seed", "3", "--output", out_dir.to_str().unwrap()]));
        assert!(stdout.contains("accuracy "), "{stdout}");
        assert!(out_dir.join("checkpoints/ckpt_10.bin").exists());
        for f in ["config.json", "loss.jsonl", "report.json", "grid.png", "checkpoints/manifest.json"] {
            assert!(out_dir.join(f).exists(), "{f} missing");
        }
        digests.push(digest_line(&stdout));
    }
    assert_eq!(digests[0], digests[1]);

    // non-empty output directory needs --overwrite
    let again = unitlab(&["train", "--config", &cfg, "--iterations", "1", "--output", dir.path().join("a").to_str().unwrap()]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--overwrite"));

    let ckpt = dir.path().join("a/checkpoints/ckpt_10.bin");
    let pred = dir.path().join("a/images");
    let translated = dir.path().join("t");
    let stdout = ok(&unitlab(&[
        "translate",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        pred.to_str().unwrap(),
        "--direction",
        "2to1",
        "--output",
        translated.to_str().unwrap(),
    ]));
    let n = std::fs::read_dir(&pred).unwrap().count();
    assert!(stdout.starts_with(&format!("translated {n} skipped 0")), "{stdout}");
    assert!(translated.join("images/manifest.json").exists());
}

#[test]
fn eval_of_identical_folders_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    ok(&unitlab(&["train", "--config", &cfg, "--iterations", "2", "--output", run.to_str().unwrap()]));
    let images = run.join("images");
    let stdout = ok(&unitlab(&[
        "eval",
        "--pred",
        images.to_str().unwrap(),
        "--gt",
        images.to_str().unwrap(),
        "--output",
        dir.path().join("eval").to_str().unwrap(),
    ]));
    assert_eq!(stdout.trim(), "accuracy 1.000000");
}

#[test]
fn missing_data_folder_names_its_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"data": {"kind": "folders", "domain1": "/no/such/dir", "domain2": "/tmp", "resolution": 16}}"#).unwrap();
    let out = unitlab(&["train", "--config", p.to_str().unwrap(), "--output", dir.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("data.domain1") && err.contains("/no/such/dir"), "{err}");
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("typo.json");
    std::fs::write(&p, r#"{"trainer": {"iteratons": 5}}"#).unwrap();
    let out = unitlab(&["train", "--config", p.to_str().unwrap(), "--output", dir.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteratons"));
}

#[test]
fn ablate_reports_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("ablate");
    let stdout = ok(&unitlab(&["ablate", "--config", &cfg, "--iterations", "2", "--output", out_dir.to_str().unwrap()]));
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows.len(), 4, "{stdout}");
    for (row, name) in rows[1..].iter().zip(["full", "ws", "cc"]) {
        assert!(row.starts_with(name), "{row}");
    }
}

#[test]
fn sweep_emits_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("sweep");
    let stdout = ok(&unitlab(&[
        "sweep",
        "--config",
        &cfg,
        "--iterations",
        "2",
        "--axis",
        "kl-weight",
        "--values",
        "0.01,0.1",
        "--output",
        out_dir.to_str().unwrap(),
    ]));
    assert!(stdout.starts_with("kl-weight,seed,accuracy\n0.01,"), "{stdout}");
    assert!(out_dir.join("sweep.csv").exists());
}

#[test]
fn help_lists_flags_and_defaults() {
    let top = ok(&unitlab(&["--help"]));
    for cmd in ["train", "translate", "eval", "ablate", "sweep", "adapt", "defaults"] {
        assert!(top.contains(cmd), "{cmd}");
    }
    assert!(top.contains("lambda0"));
    let train = ok(&unitlab(&["train", "--help"]));
    for flag in ["--config", "--output", "--seed", "--iterations", "--device", "--resume"] {
        assert!(train.contains(flag), "{flag}");
    }
    let bad = unitlab(&["train", "--device", "cuda", "--output", "/tmp/unused-unitlab-run"]);
    assert!(!bad.status.success());
}

#[test]
fn defaults_parse_back() {
    let stdout = ok(&unitlab(&["defaults"]));
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["trainer"]["learning_rate"], 0.0001);
}
