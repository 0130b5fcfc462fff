use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elbo-align")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of(args: &[&str]) -> (i32, String) {
    let out = run(args);
    (out.status.code().unwrap(), String::from_utf8(out.stderr).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, scenes: &str) {
    ok(&["synth", "--out", s(dir), "--scenes", scenes, "--bias-suite", "--force"]);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "10");
    assert_eq!(fs::read_dir(data.join("gt")).unwrap().count(), 50);
    let first = fs::read(data.join("manifest.json")).unwrap();
    synth(&data, "10");
    assert_eq!(fs::read(data.join("manifest.json")).unwrap(), first);
}

#[test]
fn synth_rejects_empty_dataset_and_existing_output() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let (code, err) = stderr_of(&["synth", "--out", s(&data), "--scenes", "0"]);
    assert_eq!(code, 2);
    assert!(err.contains("at least one scene"), "{err}");
    assert!(!data.exists());

    synth(&data, "1");
    let (code, err) = stderr_of(&["synth", "--out", s(&data), "--scenes", "1"]);
    assert_eq!(code, 2);
    assert!(err.contains("--force"), "{err}");
}

#[test]
fn unit_gamma_matches_no_calibration_on_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["segment", "--data", s(&data), "--out", s(&a), "--gamma", "1"]);
    ok(&["segment", "--data", s(&data), "--out", s(&b), "--no-calibration"]);
    for sub in ["masks", "heatmaps"] {
        assert_eq!(files(&a.join(sub)), files(&b.join(sub)), "{sub}");
    }
}

#[test]
fn segment_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1");
    let self_eval = ok(&["eval", "--pred", s(&data), "--gt", s(&data)]);
    let v: serde_json::Value = serde_json::from_str(&self_eval).unwrap();
    assert_eq!(v["scenes"], 5);
    assert_eq!(v["aggregate"]["miou"], 1.0);

    let seg = tmp.path().join("seg");
    ok(&["segment", "--data", s(&data), "--out", s(&seg)]);
    for f in ["report.json", "scenes.csv"] {
        assert!(seg.join(f).is_file(), "{f}");
    }
    let v: serde_json::Value = serde_json::from_str(&ok(&["eval", "--pred", s(&seg), "--gt", s(&data)])).unwrap();
    let miou = v["aggregate"]["miou"].as_f64().unwrap();
    assert!(miou > 0.5 && miou <= 1.0, "{miou}");
}

#[test]
fn eval_needs_overlapping_scene_names() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    fs::write(a.join("x.pgm"), "P2\n2 1\n1\n0 1\n").unwrap();
    fs::write(b.join("y.pgm"), "P2\n2 1\n1\n0 1\n").unwrap();
    let (code, err) = stderr_of(&["eval", "--pred", s(&a), "--gt", s(&b)]);
    assert_eq!(code, 2);
    assert!(err.contains("share no scene"), "{err}");
}

#[test]
fn malformed_manifest_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1");
    let path = data.join("manifest.json");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"scenes\"", "\"scenes\" oops", 1)).unwrap();
    let (code, err) = stderr_of(&["segment", "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code, 2);
    assert!(err.contains("line"), "{err}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn bad_flag_values_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1");
    let out = tmp.path().join("o");
    for bad in [["--gamma", "0"], ["--elbo-steps", "0"], ["--objective", "nope"], ["--fixed-s", "2"]] {
        let mut args = vec!["segment", "--data", s(&data), "--out", s(&out)];
        args.extend(bad);
        let (code, _) = stderr_of(&args);
        assert_eq!(code, 2, "{bad:?}");
        assert!(!out.exists(), "{bad:?}");
    }
}

#[test]
fn verify_passes_and_filters() {
    let all = ok(&["verify", "--trials", "20"]);
    assert!(all.trim_end().ends_with("0 failed"), "{all}");
    let one = ok(&["verify", "--trials", "20", "--objective", "velocity", "--schedule", "rectified-flow"]);
    let cells = one.lines().last().unwrap();
    assert!(cells.starts_with("2 cells"), "{one}");
}

#[test]
fn sweep_writes_one_row_per_value_plus_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1");
    let csv = ok(&["sweep", "--param", "gamma", "--values", "1,1/2", "--data", s(&data)]);
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "value,miou,precision,f1");
    assert_eq!(lines.len(), 4);
    let tail = |l: &str| l.split_once(',').unwrap().1.to_string();
    assert_eq!(tail(lines[1]), tail(lines[2]), "gamma 1 should equal the baseline");
}
