//! Runs the built binary end to end in temporary directories.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tgpssm(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgpssm")).args(args).env("TGPSSM_OUTPUT_ROOT", root).output().expect("binary runs")
}

fn metric(path: &Path, key: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v[key].as_f64().unwrap_or_else(|| panic!("{key} missing in {}", path.display()))
}

#[test]
fn train_then_evaluate_kink_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();
    let r = tgpssm(tmp.path(), &["train", "--config", "kink_co_tgpssm", "--out", out_s]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("checkpoint.json").is_file());
    assert!(out.join("config.toml").is_file());
    let log = fs::read_to_string(out.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1500);
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["total"].as_f64().unwrap().is_finite());
    }

    // Re-running from the persisted configuration reproduces the checkpoint.
    let again = tmp.path().join("again");
    let r = tgpssm(tmp.path(), &["train", "--config", out.join("config.toml").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read(out.join("checkpoint.json")).unwrap(), fs::read(again.join("checkpoint.json")).unwrap());
    assert_eq!(fs::read(out.join("log.jsonl")).unwrap(), fs::read(again.join("log.jsonl")).unwrap());

    let r = tgpssm(tmp.path(), &["evaluate", "--config", "kink_co_tgpssm", "--out", out_s]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let r = tgpssm(tmp.path(), &["evaluate", "--config", "kink_co_tgpssm", "--out", out_s, "--untrained"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let trained = metric(&out.join("metrics.json"), "transition_mse");
    let untrained = metric(&out.join("metrics_untrained.json"), "transition_mse");
    assert!(untrained > trained, "untrained {untrained}, trained {trained}");
    assert!(out.join("transition_curve.csv").is_file());
    assert!(out.join("report.json").is_file());

    let r = tgpssm(tmp.path(), &["sample-prior", "--config", "kink_co_tgpssm", "--out", out_s, "--samples", "2", "--checkpoint", out.join("checkpoint.json").to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("prior_samples/trajectory_001.csv").is_file());
}

#[test]
fn generated_data_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    for kind in ["--kink", "--kink-step", "--lorenz"] {
        let a = tmp.path().join(format!("a{kind}"));
        let b = tmp.path().join(format!("b{kind}"));
        for dir in [&a, &b] {
            let r = tgpssm(tmp.path(), &["generate-data", kind, "--seed", "4", "--steps", "50", "--out", dir.to_str().unwrap()]);
            assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        }
        let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{kind} {name:?}");
        }
    }
}

#[test]
fn ekf_reports_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ekf");
    let r = tgpssm(tmp.path(), &["filter-ekf", "--steps", "200", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(metric(&out.join("ekf.json"), "state_mse") < metric(&out.join("ekf.json"), "observation_mse"));
    assert!(out.join("filtered_states.csv").is_file());
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "name = \"bad\"\n[dataset]\nstandardize = 3\n").unwrap();
    let r = tgpssm(tmp.path(), &["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("error"));

    let r = tgpssm(tmp.path(), &["train", "--config", "kink_co_tgpssm", "--learning-rate", "-1"]);
    assert_eq!(r.status.code(), Some(2));

    let r = tgpssm(tmp.path(), &["evaluate", "--config", "kink_co_tgpssm", "--checkpoint", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
}
