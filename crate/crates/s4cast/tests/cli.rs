//! Black-box tests of the `s4cast` binary: flag surfaces, file outputs,
//! exit codes, and the output-root environment variable.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_s4cast"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "command failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn simulate_small(dir: &Path) {
    run_ok(
        bin()
            .args(["simulate", "--n", "10", "--kappa", "2", "--gamma-c", "3"])
            .args(["--gamma-r", "3", "--horizon", "15", "--seed", "1"])
            .arg("--out")
            .arg(dir),
    );
}

fn train_small(data: &Path, out: &Path) -> Output {
    run_ok(
        bin()
            .args(["train", "--epochs", "2", "--layers", "1", "--latent", "4"])
            .args(["--state-size", "4", "--max-len", "16", "--fixed-timing"])
            .arg("--data")
            .arg(data)
            .arg("--out")
            .arg(out),
    )
}

#[test]
fn simulate_writes_three_splits_and_a_manifest() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let dir = tmp.path().join("data");
    simulate_small(&dir);
    for file in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
        assert!(dir.join(file).exists(), "{file} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).expect("read"))
            .expect("json");
    assert_eq!(manifest["counts"]["train"], serde_json::json!(8));
    assert_eq!(manifest["counts"]["val"], serde_json::json!(1));
    assert_eq!(manifest["counts"]["test"], serde_json::json!(1));
    assert!(manifest["config_hash"].as_str().expect("hash").len() == 64);
}

#[test]
fn simulate_rejects_bad_observation_dial_with_exit_2() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = bin()
        .args(["simulate", "--n", "5", "--kappa", "0.5"])
        .arg("--out")
        .arg(tmp.path().join("x"))
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn unknown_flag_exits_2() {
    let out = bin()
        .args(["simulate", "--frobnicate"])
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_emits_history_checkpoint_and_final_json_line() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    simulate_small(&data);
    let out = train_small(&data, &run);

    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().last().expect("stdout");
    let report: serde_json::Value = serde_json::from_str(line).expect("final report is JSON");
    for key in [
        "loss_y",
        "loss_a",
        "loss_total",
        "nrmse",
        "rmse_treated",
        "rmse_untreated",
        "lvcf_nrmse",
    ] {
        assert!(report.get(key).is_some(), "missing key {key}");
    }

    let history = std::fs::read_to_string(run.join("history.csv")).expect("history");
    let mut lines = history.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,loss_y,loss_a,loss_total,nrmse,rmse_treated,rmse_untreated,wall_seconds")
    );
    assert_eq!(lines.count(), 2, "one row per epoch");
    assert!(run.join("checkpoint.json").exists());
    assert!(run.join("config.json").exists());
    assert!(run.join("checkpoints").join("epoch_002.json").exists());
}

#[test]
fn train_on_missing_dataset_exits_2() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = bin()
        .arg("train")
        .arg("--data")
        .arg(tmp.path().join("nope"))
        .arg("--out")
        .arg(tmp.path().join("run"))
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_unknown_axis_exits_2_and_valid_axis_writes_table() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = bin()
        .args(["ablate", "--axis", "depth", "--values", "1,2"])
        .arg("--out")
        .arg(tmp.path().join("x"))
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(2));

    let dir = tmp.path().join("ab");
    run_ok(
        bin()
            .args(["ablate", "--axis", "layers", "--values", "1,2"])
            .args(["--n", "8", "--kappa", "2", "--epochs", "1", "--fixed-timing"])
            .arg("--out")
            .arg(&dir),
    );
    let table = std::fs::read_to_string(dir.join("ablate_layers.csv")).expect("table");
    let mut lines = table.lines();
    assert_eq!(
        lines.next(),
        Some("layers,treatment_loss,outcome_loss,total_loss")
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn sweep_runs_grid_and_resumes_without_recomputing() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let spec_path = tmp.path().join("spec.json");
    let out_dir = tmp.path().join("grid");
    let spec = serde_json::json!({
        "kappas": [1.0, 4.0],
        "gammas": [0.0],
        "seeds": [0],
        "sim": { "n": 8, "horizon": 12.0 },
        "train": {
            "epochs": 1, "batch_size": 8, "lr_ssm": 5e-4, "lr_other": 1e-3,
            "mu": 0.5, "seed": 0, "max_len": 16, "fixed_timing": true
        },
        "model": {
            "layers": 1, "latent_dim": 4, "state_size": 4, "feature_dim": 9, "mu": 0.5
        },
        "out_dir": out_dir,
    });
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec).expect("json")).expect("write");

    let out = run_ok(bin().arg("sweep").arg("--spec").arg(&spec_path));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("completed 2, skipped 0, failed 0"), "{text}");

    let results = std::fs::read_to_string(out_dir.join("results.csv")).expect("results");
    assert_eq!(results.lines().count(), 3, "header + 2 cells");
    assert!(out_dir.join("pivot_nrmse.csv").exists());
    assert!(out_dir.join("manifest.json").exists());

    let again = run_ok(bin().arg("sweep").arg("--spec").arg(&spec_path));
    let text = String::from_utf8_lossy(&again.stdout);
    assert!(text.contains("completed 0, skipped 2, failed 0"), "{text}");
}

#[test]
fn report_renders_wellformed_svg_for_multiple_runs() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let data = tmp.path().join("data");
    simulate_small(&data);
    let run_a = tmp.path().join("run_a");
    let run_b = tmp.path().join("run_b");
    train_small(&data, &run_a);
    train_small(&data, &run_b);

    let figs = tmp.path().join("figs");
    run_ok(
        bin()
            .arg("report")
            .arg(&run_a)
            .arg(&run_b)
            .arg("--out")
            .arg(&figs),
    );
    for name in ["loss_curves.svg", "rmse_bars.svg"] {
        let svg = std::fs::read_to_string(figs.join(name)).expect("svg");
        let doc = roxmltree::Document::parse(&svg).expect("well-formed XML");
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }
    // The run label comes from the stored config: kappa 2, gamma 3.
    let curves = std::fs::read_to_string(figs.join("loss_curves.svg")).expect("svg");
    assert!(curves.contains("2-3"), "legend label missing");

    // Linear-axis variant also renders.
    run_ok(
        bin()
            .arg("report")
            .arg(&run_a)
            .arg("--linear")
            .arg("--out")
            .arg(tmp.path().join("figs_lin")),
    );
}

#[test]
fn report_on_directory_without_history_exits_2() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = bin()
        .arg("report")
        .arg(tmp.path())
        .arg("--out")
        .arg(tmp.path().join("figs"))
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_root_env_var_relocates_relative_paths() {
    let tmp = tempfile::tempdir().expect("tempdir");
    run_ok(
        bin()
            .env("S4CAST_OUT_ROOT", tmp.path())
            .args(["simulate", "--n", "4", "--horizon", "10", "--out", "nested/data"]),
    );
    assert!(
        tmp.path().join("nested/data/train.jsonl").exists(),
        "relative --out should land under S4CAST_OUT_ROOT"
    );
}

#[test]
fn sweep_write_default_spec_emits_loadable_grid() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let spec_path = tmp.path().join("default_spec.json");
    run_ok(
        bin()
            .args(["sweep", "--write-default-spec"])
            .arg("--spec")
            .arg(&spec_path)
            .arg("--out")
            .arg(tmp.path().join("grid")),
    );
    let spec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&spec_path).expect("read")).expect("json");
    assert_eq!(spec["kappas"].as_array().expect("kappas").len(), 5);
    assert_eq!(spec["gammas"].as_array().expect("gammas").len(), 5);
}
