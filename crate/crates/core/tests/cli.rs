//! End-to-end checks of the `hbtrack` binary.

use std::path::Path;
use std::process::{Command, Output};

use hbtrack::io::{self, DetectionFile, DetectionRecord};
use hbtrack::pairing::Part;
use serde_json::Value;

fn hbtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hbtrack")).args(args).env("HBTRACK_WORKERS", "2").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hbtrack(args);
    assert!(out.status.success(), "hbtrack {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// A small scene written to `dir`, then paired.
fn small_scene(dir: &Path) {
    let spec = dir.join("spec_in.json");
    std::fs::write(&spec, r#"{"seed": 3, "num_pedestrians": 14, "num_frames": 80}"#).unwrap();
    ok(&["synth", "--spec", s(&spec), "--out", s(dir)]);
    ok(&["pair", "--detections", s(&dir.join("detections.jsonl")), "--out", s(&dir.join("paired.jsonl"))]);
}

#[test]
fn missing_input_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("paired.jsonl");
    let res = hbtrack(&["pair", "--detections", s(&dir.path().join("nope.jsonl")), "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("nope.jsonl"));
    assert!(!out.exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let res = hbtrack(&["track", "--detections", "a", "--out", "b", "--no-such-flag"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn malformed_detection_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let det = dir.path().join("d.jsonl");
    std::fs::write(
        &det,
        "{\"format\":\"hbtrack-detections\",\"version\":1,\"embedding_dim\":2}\n{\"frame\":1,\"part\":\"body\",\"x\":0,\"y\":0,\"w\":1,\"h\":1,\"score\":1,\"embedding\":[1]}\n",
    )
    .unwrap();
    let res = hbtrack(&["pair", "--detections", s(&det), "--out", s(&dir.path().join("p.jsonl"))]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("line 2") || err.contains("header"), "{err}");
}

#[test]
fn synth_pair_track_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_scene(d);
    let gt = d.join("gt.txt");
    for f in ["detections.jsonl", "gt.txt", "gt_heads.txt", "spec.json", "paired.jsonl"] {
        assert!(d.join(f).exists(), "{f} missing");
    }

    ok(&["track", "--detections", s(&d.join("paired.jsonl")), "--out", s(&d.join("hb.txt"))]);
    ok(&["track", "--detections", s(&d.join("paired.jsonl")), "--out", s(&d.join("body.txt")), "--body-only"]);
    let echoed = json(&d.join("body.txt.config.json"));
    assert_eq!(echoed["body_only"], Value::Bool(true));

    let eval = |res: &str, name: &str| {
        let out = d.join(name);
        ok(&["eval", "--gt", s(&gt), "--results", s(&d.join(res)), "--out", s(&out)]);
        json(&out)
    };
    let hb = eval("hb.txt", "hb.json");
    let body = eval("body.txt", "body.json");
    assert!(hb["mota"].as_f64().unwrap() > 0.5, "{hb}");
    assert!(hb["id_switches"].as_u64().unwrap() <= body["id_switches"].as_u64().unwrap(), "{hb} vs {body}");

    let perfect = eval("gt.txt", "self.json");
    assert_eq!(perfect["mota"].as_f64(), Some(1.0));
    assert_eq!(perfect["idf1"].as_f64(), Some(1.0));

    // Without --out the report goes to stdout.
    let printed = ok(&[
        "eval",
        "--gt",
        s(&gt),
        "--results",
        s(&d.join("hb.txt")),
        "--gt-heads",
        s(&d.join("gt_heads.txt")),
        "--paired",
        s(&d.join("paired.jsonl")),
    ]);
    let report: Value = serde_json::from_slice(&printed.stdout).unwrap();
    assert!(report["pair_mismatch_rate"].as_f64().unwrap() < 0.05, "{report}");
}

#[test]
fn render_writes_requested_frames() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_scene(d);
    ok(&["track", "--detections", s(&d.join("paired.jsonl")), "--out", s(&d.join("r.txt"))]);
    let frames = d.join("frames");
    ok(&["render", "--results", s(&d.join("r.txt")), "--width", "1280", "--height", "720", "--out-dir", s(&frames), "--gt", s(&d.join("gt.txt")), "--frames", "2-4"]);
    let mut names: Vec<_> = std::fs::read_dir(&frames).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["frame_000002.png", "frame_000003.png", "frame_000004.png"]);
}

#[test]
fn tile_then_fuse_merges_overlap_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let plan_path = d.join("plan.json");
    ok(&["tile", "--width", "1000", "--height", "400", "--scales", "400", "--overlap", "0.5", "--out", s(&plan_path)]);
    let plan = json(&plan_path);
    let windows = plan["windows"].as_array().unwrap();
    assert!(windows.len() >= 2);
    let (x0, x1) = (windows[0]["x"].as_f64().unwrap(), windows[1]["x"].as_f64().unwrap());

    // The same object seen from the first two tiles, at frame position 250.
    let rec = |tile: usize, x: f64, score: f64| DetectionRecord {
        frame: 1,
        part: Part::Body,
        x,
        y: 100.0,
        w: 40.0,
        h: 90.0,
        score,
        tile_id: Some(tile),
        pair_hint: None,
        embedding: vec![0.0, 1.0],
    };
    let det = d.join("tiles.jsonl");
    io::write_detections(&det, &DetectionFile::new(2, vec![rec(0, 250.0 - x0, 0.9), rec(1, 250.0 - x1 + 1.0, 0.8)])).unwrap();
    let fused_path = d.join("fused.jsonl");
    ok(&["fuse", "--plan", s(&plan_path), "--detections", s(&det), "--out", s(&fused_path)]);
    let fused = io::read_detections(&fused_path).unwrap();
    assert_eq!(fused.records.len(), 1);
    assert_eq!((fused.records[0].x, fused.records[0].score), (250.0, 0.9));
    assert_eq!(fused.records[0].tile_id, None);

    // A scale larger than the image is skipped with a warning, not an error.
    let res = ok(&["tile", "--width", "1000", "--height", "400", "--scales", "400,5000", "--out", s(&d.join("p2.json"))]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("5000"));
}

#[test]
fn loss_check_random_batches_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("loss.json");
    ok(&["loss-check", "--random", "10", "--seed", "7", "--out", s(&out)]);
    assert_eq!(json(&out)["passed"], Value::Bool(true));

    let res = hbtrack(&["loss-check", "--random", "3", "--tolerance", "0"]);
    assert!(!res.status.success());
}
