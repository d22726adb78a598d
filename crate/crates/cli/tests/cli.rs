//! End-to-end tests of the `sidecar` binary: exit codes, file handling, and
//! machine-readable output.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use sidecar_cli::format;
use sidecar_core::{HybridModel, ModelConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sidecar"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-tests");
    fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 256,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 32,
        sidecar_layers: [0usize, 1].into_iter().collect(),
        ssm_channels: 4,
        n_states: 4,
        lora_rank: 2,
        lora_alpha: 4.0,
        seed: 99,
        ..ModelConfig::default()
    }
}

fn write_config(name: &str) -> PathBuf {
    let path = tmp(name);
    fs::write(
        &path,
        serde_json::to_string_pretty(&small_config()).unwrap(),
    )
    .unwrap();
    path
}

fn write_probes(name: &str) -> PathBuf {
    let path = tmp(name);
    fs::write(&path, "{\"bytes\": \"abcd\"}\n{\"bytes\": \"a b a b\"}\n").unwrap();
    path
}

fn write_copy_data(name: &str) -> PathBuf {
    let path = tmp(name);
    let mut lines = String::new();
    for b in [
        "aaaaaaaaaaaa",
        "bbbbbbbbbbbb",
        "cccccccccccc",
        "!!!!!!!!!!!!",
    ] {
        lines.push_str(&format!("{{\"bytes\": \"{b}\"}}\n"));
    }
    fs::write(&path, lines).unwrap();
    path
}

fn stdout_str(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_str(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn model_init_is_deterministic_across_runs() {
    let config = write_config("det-config.json");
    let out_a = tmp("det-a.bin");
    let out_b = tmp("det-b.bin");
    for out in [&out_a, &out_b] {
        let status = bin()
            .args(["model-init", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(fs::read(&out_a).unwrap(), fs::read(&out_b).unwrap());
}

#[test]
fn model_init_seed_flag_changes_the_file() {
    let config = write_config("seed-config.json");
    let out_a = tmp("seed-a.bin");
    let out_b = tmp("seed-b.bin");
    bin()
        .args(["model-init", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_a)
        .status()
        .unwrap();
    bin()
        .args(["model-init", "--seed", "7", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_b)
        .status()
        .unwrap();
    assert_ne!(fs::read(&out_a).unwrap(), fs::read(&out_b).unwrap());
}

#[test]
fn validate_passes_on_fresh_model_and_fails_at_zero_lr() {
    let config = write_config("val-config.json");
    let model = tmp("val-model.bin");
    bin()
        .args(["model-init", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&model)
        .status()
        .unwrap();
    let probes = write_probes("val-probes.jsonl");
    let data = write_copy_data("val-data.jsonl");

    let output = bin()
        .args([
            "validate",
            "--json",
            "--steps",
            "120",
            "--lr",
            "0.02",
            "--budget-cap",
            "20",
        ])
        .arg("--model")
        .arg(&model)
        .arg("--base")
        .arg(&model)
        .arg("--probes")
        .arg(&probes)
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        stderr_str(&output)
    );
    let report: serde_json::Value = serde_json::from_str(&stdout_str(&output)).unwrap();
    assert_eq!(report["overall_pass"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 6);

    // lr = 0 cannot reduce the loss; the pipeline must stop at train_smoke.
    let output = bin()
        .args(["validate", "--json", "--steps", "20", "--lr", "0"])
        .arg("--model")
        .arg(&model)
        .arg("--base")
        .arg(&model)
        .arg("--probes")
        .arg(&probes)
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(&stdout_str(&output)).unwrap();
    assert_eq!(report["overall_pass"], false);
    let checks = report["checks"].as_array().unwrap();
    let last = checks.last().unwrap();
    assert_eq!(last["check"], "train_smoke");
    assert!(last["detail"]
        .as_str()
        .unwrap()
        .contains("loss did not decrease"));
    assert!(report["not_run"].as_array().unwrap().len() >= 2);
}

#[test]
fn audit_gates_distinguishes_clean_from_contaminated() {
    let clean_path = tmp("audit-clean.bin");
    let clean = HybridModel::init(small_config()).unwrap();
    fs::write(&clean_path, format::encode(&clean)).unwrap();
    let status = bin()
        .args(["audit-gates", "--model"])
        .arg(&clean_path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let mut cfg = small_config();
    cfg.n_layers = 3;
    cfg.sidecar_layers = [0usize, 1, 2].into_iter().collect();
    let dirty = HybridModel::init_with_gate_values(cfg, &[0.0, 0.01, 1.0]).unwrap();
    let dirty_path = tmp("audit-dirty.bin");
    fs::write(&dirty_path, format::encode(&dirty)).unwrap();
    let output = bin()
        .args(["audit-gates", "--json", "--model"])
        .arg(&dirty_path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let violations: serde_json::Value = serde_json::from_str(&stdout_str(&output)).unwrap();
    let list = violations.as_array().unwrap();
    assert_eq!(list.len(), 2);
    assert_eq!(list[0]["actual"], 1.0);
    assert_eq!(list[1]["actual"], 0.01);

    // A tolerance above the contamination clears the smaller violation.
    let output = bin()
        .args(["audit-gates", "--json", "--tolerance", "0.02", "--model"])
        .arg(&dirty_path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let violations: serde_json::Value = serde_json::from_str(&stdout_str(&output)).unwrap();
    assert_eq!(violations.as_array().unwrap().len(), 1);
}

fn write_suite(name: &str, count: usize, scores: (u8, u8, u8)) -> PathBuf {
    let categories = [
        "Baseline",
        "SocialPressure",
        "AuthoritySpoofing",
        "GradualEscalation",
        "Philosophical",
    ];
    let mut lines = String::new();
    let mut written = 0;
    'outer: for cat in categories {
        for i in 0..10 {
            if written == count {
                break 'outer;
            }
            lines.push_str(&format!(
                "{{\"prompt_id\": \"{cat}-{i}\", \"category\": \"{cat}\", \"consistency\": {}, \"engagement\": {}, \"reasoning\": {}}}\n",
                scores.0, scores.1, scores.2
            ));
            written += 1;
        }
    }
    let path = tmp(name);
    fs::write(&path, lines).unwrap();
    path
}

#[test]
fn ics_score_strict_contract() {
    let full = write_suite("ics-full.jsonl", 50, (4, 3, 5));
    let output = bin()
        .args(["ics-score", "--strict", "--json", "--in"])
        .arg(&full)
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        stderr_str(&output)
    );
    let result: serde_json::Value = serde_json::from_str(&stdout_str(&output)).unwrap();
    assert_eq!(result["composite"], 80.0);

    // 49 records in strict mode: nonzero exit, issue list on stderr.
    let short = write_suite("ics-short.jsonl", 49, (4, 3, 5));
    let output = bin()
        .args(["ics-score", "--strict", "--json", "--in"])
        .arg(&short)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4));
    let err = stderr_str(&output);
    assert!(err.contains("wrong_total"), "stderr: {err}");

    // Non-strict accepts the partial suite.
    let output = bin()
        .args(["ics-score", "--json", "--in"])
        .arg(&short)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
}

#[test]
fn hippo_demo_emits_csv() {
    let output = bin()
        .args([
            "hippo-demo",
            "--n-states",
            "8",
            "--dt",
            "0.05",
            "--steps",
            "100",
            "--points",
            "50",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let csv = stdout_str(&output);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,input,reconstruction");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 50);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 3);
        for f in fields {
            f.parse::<f64>().unwrap();
        }
    }
}

#[test]
fn train_reduces_loss_and_roundtrips_model() {
    let config = write_config("train-config.json");
    let model = tmp("train-model.bin");
    bin()
        .args(["model-init", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&model)
        .status()
        .unwrap();
    let data = write_copy_data("train-data.jsonl");
    let out = tmp("train-out.bin");

    let output = bin()
        .args(["train", "--json", "--steps", "80", "--lr", "0.02"])
        .arg("--model")
        .arg(&model)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        stderr_str(&output)
    );
    let report: serde_json::Value = serde_json::from_str(&stdout_str(&output)).unwrap();
    let initial = report["initial_loss"].as_f64().unwrap();
    let final_loss = report["final_loss"].as_f64().unwrap();
    assert!(final_loss < initial);
    assert!((report["perplexity"].as_f64().unwrap() - final_loss.exp()).abs() <= 1e-9);

    // The trained file loads and differs from the fresh one.
    let trained = format::decode(&fs::read(&out).unwrap()).unwrap();
    let fresh = format::decode(&fs::read(&model).unwrap()).unwrap();
    assert!(!trained.bit_identical(&fresh));
}

#[test]
fn validate_default_model_with_bundled_copy_task() {
    // No --config and no --data: desk-scale defaults end to end, with the
    // smoke training running on the bundled copy task.
    let model = tmp("bundled-model.bin");
    let status = bin()
        .args(["model-init", "--out"])
        .arg(&model)
        .status()
        .unwrap();
    assert!(status.success());
    let probes = write_probes("bundled-probes.jsonl");
    let output = bin()
        .args(["validate", "--json", "--budget-cap", "20"])
        .arg("--model")
        .arg(&model)
        .arg("--base")
        .arg(&model)
        .arg("--probes")
        .arg(&probes)
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        stderr_str(&output)
    );
    let report: serde_json::Value = serde_json::from_str(&stdout_str(&output)).unwrap();
    assert_eq!(report["overall_pass"], true);
}

#[test]
fn train_mask_flag_restricts_updates() {
    let config = write_config("mask-config.json");
    let model = tmp("mask-model.bin");
    bin()
        .args(["model-init", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&model)
        .status()
        .unwrap();
    let data = write_copy_data("mask-data.jsonl");
    let out = tmp("mask-out.bin");
    let status = bin()
        .args(["train", "--steps", "10", "--lr", "0.02", "--mask", "gates"])
        .arg("--model")
        .arg(&model)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());

    let fresh = format::decode(&fs::read(&model).unwrap()).unwrap();
    let trained = format::decode(&fs::read(&out).unwrap()).unwrap();
    for ((name, was), (_, now)) in fresh
        .extension_parameters()
        .iter()
        .zip(trained.extension_parameters())
    {
        let same = was
            .iter()
            .zip(now.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if name.ends_with(".gate") {
            assert!(!same, "{name} should have moved");
        } else {
            assert!(same, "{name} should be untouched under --mask gates");
        }
    }
}

#[test]
fn eval_divergence_flags_identical_models() {
    let config = write_config("div-config.json");
    let model = tmp("div-model.bin");
    bin()
        .args(["model-init", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&model)
        .status()
        .unwrap();
    let probes = write_probes("div-probes.jsonl");
    let output = bin()
        .args(["eval-divergence", "--json"])
        .arg("--model")
        .arg(&model)
        .arg("--base")
        .arg(&model)
        .arg("--probes")
        .arg(&probes)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&stdout_str(&output)).unwrap();
    assert_eq!(report["mean_kl"], 0.0);
    assert_eq!(report["identical_models"], true);
}

#[test]
fn corrupt_and_mismatched_model_files_are_rejected() {
    let config = write_config("bad-config.json");
    let model = tmp("bad-model.bin");
    bin()
        .args(["model-init", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&model)
        .status()
        .unwrap();

    let mut bytes = fs::read(&model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let corrupt = tmp("bad-corrupt.bin");
    fs::write(&corrupt, &bytes).unwrap();
    let output = bin()
        .args(["audit-gates", "--model"])
        .arg(&corrupt)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    assert!(stderr_str(&output).contains("corrupt_model"));

    let mut bytes = fs::read(&model).unwrap();
    bytes[8..12].copy_from_slice(&9u32.to_le_bytes());
    let wrong_version = tmp("bad-version.bin");
    fs::write(&wrong_version, &bytes).unwrap();
    let output = bin()
        .args(["audit-gates", "--model"])
        .arg(&wrong_version)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    assert!(stderr_str(&output).contains("version_mismatch"));

    let missing = tmp("does-not-exist.bin");
    let output = bin()
        .args(["audit-gates", "--model"])
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    assert!(stderr_str(&output).contains("\"error\":\"io\""));
}

#[test]
fn usage_errors_exit_two() {
    let output = bin().arg("no-such-subcommand").output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let output = bin().args(["validate", "--nonsense"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn overlong_probe_is_a_data_error() {
    let config = write_config("long-config.json");
    let model = tmp("long-model.bin");
    bin()
        .args(["model-init", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&model)
        .status()
        .unwrap();
    let probes = tmp("long-probes.jsonl");
    fs::write(&probes, format!("{{\"bytes\": \"{}\"}}\n", "x".repeat(200))).unwrap();
    let output = bin()
        .args(["eval-divergence", "--model"])
        .arg(&model)
        .arg("--base")
        .arg(&model)
        .arg("--probes")
        .arg(&probes)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4));
    assert!(stderr_str(&output).contains("probe_too_long"));
}
