//! End-to-end smoke tests of the binary surface.

use std::path::PathBuf;
use std::process::Command;

fn dart() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dart"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dart-cli-{}-{}", std::process::id(), name));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn schedule_emits_exact_field_names() {
    let out = dart().args(["schedule", "--T", "4"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: serde_json::Value = serde_json::from_str(&text).unwrap();
    let first = &rows[0];
    for key in ["t", "ᾱ_t", "γ_t", "η_t", "η̄_t", "ω_t", "ρ_t"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(rows.as_array().unwrap().len(), 4);
    // Terminal level: zero SNR, no chain coefficient.
    assert!(rows[3]["ρ_t"].is_null());
    assert_eq!(rows[3]["γ_t"], 0.0);
}

#[test]
fn masks_print_block_and_token_causal_rows() {
    let out = dart()
        .args(["masks", "--T", "2", "--K", "2", "--variant", "dart"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().collect::<Vec<_>>(), vec!["1100", "1100", "1111", "1111"]);

    let out = dart()
        .args(["masks", "--T", "2", "--K", "2", "--variant", "ar"])
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().collect::<Vec<_>>(), vec!["1000", "1100", "1110", "1111"]);
}

#[test]
fn verify_passes_and_fails_loudly() {
    let out = dart()
        .args(["verify", "--T", "4", "--N", "20000", "--seed", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
}

#[test]
fn train_sample_eval_round_trip() {
    let run_dir = tmp("run");
    let sample_dir = tmp("samples");
    let config = serde_json::json!({
        "dataset": {"kind": "gauss-mixture-2d", "modes": 4, "size": 256, "std": 0.15},
        "model": {
            "num_layers": 1, "hidden": 24, "num_heads": 4, "patch_size": 1,
            "channels": 2, "t_levels": 2, "tokens_per_level": 1, "grid": [1, 1],
            "rope_axes_dims": [2, 2, 2], "variant": "dart",
            "conditioning": {"kind": "none"}, "use_qk_norm": true
        },
        "schedule": {"base": "cosine", "t": 2},
        "objective": "dart",
        "optim": {"lr": 0.003, "beta1": 0.9, "beta2": 0.95, "eps": 1e-8, "weight_decay": 0.01},
        "warmup_steps": 5,
        "total_steps": 30,
        "batch_size": 8,
        "seed": 3,
        "weighting": "snr-plus-one",
        "log_every": 10,
        "out_dir": run_dir,
    });
    let cfg_path = tmp("cfg").join("cfg.json");
    std::fs::write(&cfg_path, config.to_string()).unwrap();

    let out = dart()
        .args(["train", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run_dir.join("weights.json").exists());
    assert!(run_dir.join("loss_log.jsonl").exists());

    let out = dart()
        .args([
            "sample",
            "--ckpt",
            run_dir.to_str().unwrap(),
            "--num",
            "3",
            "--seed",
            "5",
            "--out",
            sample_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let samples: Vec<Vec<f32>> = serde_json::from_str(
        &std::fs::read_to_string(sample_dir.join("samples.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(samples.len(), 3);
    assert_eq!(samples[0].len(), 2);

    let out = dart()
        .args([
            "eval",
            "--ckpt",
            run_dir.to_str().unwrap(),
            "--metric",
            "swd",
            "--num",
            "128",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert!(report["value"].as_f64().unwrap() >= 0.0);

    // num = 0 produces an empty report and still succeeds.
    let out = dart()
        .args([
            "eval",
            "--ckpt",
            run_dir.to_str().unwrap(),
            "--metric",
            "swd",
            "--num",
            "0",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert!(report["value"].is_null());

    for d in [run_dir, sample_dir] {
        std::fs::remove_dir_all(d).ok();
    }
}

#[test]
fn tiny_grid_sampling_writes_ppm() {
    let run_dir = tmp("grid-run");
    let sample_dir = tmp("grid-samples");
    let config = serde_json::json!({
        "dataset": {"kind": "tiny-grid", "size": 64, "height": 4, "width": 4, "channels": 1},
        "model": {
            "num_layers": 1, "hidden": 24, "num_heads": 4, "patch_size": 2,
            "channels": 4, "t_levels": 2, "tokens_per_level": 4, "grid": [2, 2],
            "rope_axes_dims": [2, 2, 2], "variant": "dart",
            "conditioning": {"kind": "none"}, "use_qk_norm": true
        },
        "schedule": {"base": "cosine", "t": 2},
        "objective": "dart",
        "warmup_steps": 5,
        "total_steps": 20,
        "batch_size": 4,
        "seed": 3,
        "out_dir": run_dir,
    });
    let cfg_path = tmp("grid-cfg").join("cfg.json");
    std::fs::write(&cfg_path, config.to_string()).unwrap();
    assert!(dart()
        .args(["train", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap()
        .status
        .success());
    assert!(dart()
        .args([
            "sample",
            "--ckpt",
            run_dir.to_str().unwrap(),
            "--num",
            "2",
            "--out",
            sample_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap()
        .status
        .success());
    let ppm = std::fs::read(sample_dir.join("sample_0000.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n4 4\n255\n"));
    assert_eq!(ppm.len(), b"P6\n4 4\n255\n".len() + 4 * 4 * 3);
    for d in [run_dir, sample_dir] {
        std::fs::remove_dir_all(d).ok();
    }
}

#[test]
fn unknown_config_keys_fail_fast() {
    let cfg_path = tmp("bad-cfg").join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"dataset": {"kind": "gauss-mixture-2d", "modes": 4, "size": 16}, "typo_key": 1}"#,
    )
    .unwrap();
    let out = dart()
        .args(["train", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
