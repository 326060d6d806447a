use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lagkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lagkit"))
        .args(args)
        .current_dir(dir)
        .env("LAGKIT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lagkit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    lagkit(dir, args).status.code().unwrap()
}

const SMALL: [&str; 4] = ["--num-sequences", "24", "--frames", "20"];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(SMALL);
    v
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_reproducible_and_records_the_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(d.path(), &with_small(&["gen-data", "--seed", "7"]));
    }
    let da = a.path().join("data/pendulum");
    let mut names: Vec<_> = fs::read_dir(&da).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 2 * 24 + 2);
    for n in &names {
        assert_eq!(fs::read(da.join(n)).unwrap(), fs::read(b.path().join("data/pendulum").join(n)).unwrap(), "{n:?}");
    }
    let split = read_json(&da.join("split.json"));
    assert_eq!(split["validation"].as_array().unwrap().len(), 2);

    // Re-running from the recorded configuration reproduces the hash.
    let manifest = read_json(&da.join("manifest.json"));
    fs::write(a.path().join("cfg.json"), manifest["config"].to_string()).unwrap();
    ok(a.path(), &["gen-data", "--config", "cfg.json"]);
    assert_eq!(read_json(&da.join("manifest.json"))["config_hash"], manifest["config_hash"]);
}

#[test]
fn actuator_count_sets_input_columns() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &with_small(&["gen-data", "--system", "cartpole", "--actuators", "2"]));
    let text = fs::read_to_string(d.path().join("data/cartpole/seq_0000.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.iter().filter(|c| c.starts_with('u')).count(), 2);
    assert_eq!(header.len(), 1 + 4 + 2);
}

#[test]
fn training_improves_and_resume_matches_an_uninterrupted_run() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &with_small(&["gen-data"]));
    let base = with_small(&["train", "--batch", "4", "--lr", "3e-3"]);
    let mut full = base.clone();
    full.extend(["--epochs", "4", "--params", "full.json", "--out-dir", "full"]);
    ok(p, &full);
    let log: Vec<Value> = fs::read_to_string(p.join("full/train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log.len(), 5);
    let val = |r: &Value| r["val_Ld"].as_f64().unwrap();
    assert!(val(&log[4]) < val(&log[0]), "{} vs {}", val(&log[4]), val(&log[0]));

    let mut first = base.clone();
    first.extend(["--epochs", "2", "--params", "part.json", "--out-dir", "part"]);
    ok(p, &first);
    let mut rest = base.clone();
    rest.extend(["--epochs", "4", "--params", "part.json", "--out-dir", "part", "--resume", "part.json"]);
    ok(p, &rest);
    assert_eq!(fs::read(p.join("full.json")).unwrap(), fs::read(p.join("part.json")).unwrap());
    assert_eq!(fs::read_to_string(p.join("part/train_log.jsonl")).unwrap().lines().count(), 5);
}

#[test]
fn numeric_blow_up_exits_with_code_3() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &with_small(&["gen-data"]));
    ok(p, &with_small(&["train", "--epochs", "1"]));
    let mut params = read_json(&p.join("params.json"));
    for row in params["potential"]["layers"][0]["w"].as_array_mut().unwrap() {
        for w in row.as_array_mut().unwrap() {
            *w = Value::from(1e300);
        }
    }
    fs::write(p.join("params.json"), params.to_string()).unwrap();
    let out = lagkit(p, &with_small(&["train", "--epochs", "2", "--resume", "params.json"]));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sequences"));
}

#[test]
fn config_errors_exit_with_code_2() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("bad.json"), r#"{"epoch": 3}"#).unwrap();
    assert_eq!(code(p, &["gen-data", "--config", "bad.json"]), 2);
    assert_eq!(code(p, &["gen-data", "--lr", "-1"]), 2);
    assert_eq!(code(p, &["gen-data", "--system", "unicycle"]), 2);
    assert_eq!(code(p, &["--system", "cartpole", "--actuators", "3", "gen-data"]), 2);
    assert_eq!(code(p, &["control", "--params", "analytic", "--target-state", "0,1,2"]), 2);
    assert_eq!(code(p, &["train"]), 1);
}

#[test]
fn prediction_with_the_analytic_model_tracks_the_data() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-data", "--num-sequences", "10", "--frames", "60"]);
    let out = ok(p, &["predict", "--params", "analytic", "--frames", "60", "--num-sequences", "10", "--sequence", "3", "--render"]);
    let summary: Value = serde_json::from_str(out.trim()).unwrap();
    assert!(summary["final_error"].as_f64().unwrap() <= 1e-4, "{summary}");
    let frames = fs::read_dir(p.join("out/frames")).unwrap().count();
    assert_eq!(frames, 50);
    let csv = fs::read_to_string(p.join("out/predict_0003.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 51);
}

#[test]
fn control_swings_up_from_a_state_or_a_frame_target() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let out = ok(p, &["control", "--params", "analytic", "--actuators", "1", "--target-state", "0,1"]);
    let s: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(s["success"], Value::Bool(true));
    let csv = fs::read_to_string(p.join("out/control.csv")).unwrap();
    assert!(csv.lines().next().unwrap().ends_with("u0,E_shaped"));

    // A rendered upright frame as the target.
    let frame = lagkit::keypoints::WorldFrame::square(64, lagkit::keypoints::DEFAULT_EXTENT);
    let b = lagkit::Benchmark::pendulum();
    let img = lagkit::keypoints::synth_render(&b.links, &b.upright(), &frame);
    lagkit::keypoints::write_pgm(&p.join("target.pgm"), &img).unwrap();
    let out = ok(p, &["control", "--params", "analytic", "--actuators", "1", "--target-frame", "target.pgm"]);
    let s: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(s["success"], Value::Bool(true));
    let t: Vec<f64> = s["target"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(t[0].abs() < 0.05 && (t[1] - 1.0).abs() < 0.05, "{t:?}");
}

#[test]
fn underactuated_control_exits_with_code_4() {
    let d = tempfile::tempdir().unwrap();
    let out = lagkit(
        d.path(),
        &["control", "--system", "cartpole", "--actuators", "1", "--params", "analytic", "--target-state", "0,0,0,1"],
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("actuation deficiency"));
}

#[test]
fn evaluation_reports_every_validation_sequence_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-data", "--num-sequences", "40", "--actuators", "1"]);
    let args = ["eval", "--num-sequences", "40", "--actuators", "1", "--params", "analytic"];
    ok(p, &args);
    let first = fs::read(p.join("out/metrics.json")).unwrap();
    ok(p, &args);
    assert_eq!(first, fs::read(p.join("out/metrics.json")).unwrap());
    let m: Value = serde_json::from_slice(&first).unwrap();
    let per_seq = m["image"]["per_seq"].as_array().unwrap();
    assert_eq!(per_seq.len(), 4);
    assert!(per_seq.iter().all(|v| v.as_u64() == Some(50)));
    let names: Vec<String> = fs::read_dir(p.join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.starts_with("energy_")));
    assert!(names.iter().any(|n| n.starts_with("input_field_")));
}

#[test]
fn export_writes_frames_and_heatmaps() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &with_small(&["gen-data", "--system", "acrobot"]));
    ok(p, &with_small(&["export", "--system", "acrobot", "--sequence", "1", "--heatmaps"]));
    assert!(p.join("out/frames/frame_0001_019.pgm").exists());
    assert!(p.join("out/heatmaps/kp1/frame_0001_000.pgm").exists());
}
