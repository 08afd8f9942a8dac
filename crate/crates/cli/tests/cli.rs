use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gradiseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradiseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = gradiseg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(root: &Path) -> PathBuf {
    std::fs::create_dir_all(root).unwrap();
    let spec_path = root.join("spec.json");
    let mut spec: serde_json::Value = serde_json::from_str(include_str!("../specs/desk.json")).unwrap();
    spec["views"] = 6.into();
    spec["test_views"] = 2.into();
    spec["width"] = 32.into();
    spec["height"] = 32.into();
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let data = root.join("data");
    ok(&["gen", "--spec", s(&spec_path), "--out", s(&data)]);
    data
}

#[test]
fn generate_train_evaluate_edit() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = small_dataset(root);
    assert!(data.join("manifest.json").exists());
    assert!(data.join("run.json").exists());

    // the ground-truth scene scores perfectly on its own data
    let gt = data.join("gt_scene.gseg");
    let gt_eval = root.join("gt_eval.json");
    ok(&["eval", "--scene", s(&gt), "--data", s(&data), "--out", s(&gt_eval), "--split", "all"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&gt_eval).unwrap()).unwrap();
    assert_eq!(report["miou"], 1.0);

    let cfg = root.join("train.toml");
    std::fs::write(&cfg, "total_iters = 30\ninit_points = 200\nm = 50\ncheckpoint_interval = 15\nlog_interval = 10\n").unwrap();
    let run = root.join("run");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run)]);
    for f in ["scene.gseg", "metrics.csv", "ckpt_15.gseg", "ckpt_30.gseg", "run.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let scene = run.join("scene.gseg");
    let eval = root.join("eval.json");
    ok(&["eval", "--scene", s(&scene), "--data", s(&data), "--out", s(&eval)]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&eval).unwrap()).unwrap();
    assert_eq!(report["views"].as_array().unwrap().len(), 2);

    let ppm = root.join("view.ppm");
    ok(&["render", "--scene", s(&scene), "--data", s(&data), "--view", "0", "--out", s(&ppm)]);
    assert!(std::fs::read(&ppm).unwrap().starts_with(b"P6\n32 32\n255\n"));
    let pgm = root.join("mask.pgm");
    ok(&["segment", "--scene", s(&gt), "--data", s(&data), "--view", "1", "--out", s(&pgm)]);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let gt_mask = data.join(manifest["views"][1]["mask"].as_str().unwrap());
    assert_eq!(std::fs::read(&pgm).unwrap(), std::fs::read(gt_mask).unwrap());

    let edited = root.join("edited.gseg");
    ok(&["edit", "--scene", s(&gt), "--remove", "2", "--out", s(&edited)]);
    ok(&["edit", "--scene", s(&gt), "--extract", "1", "--out", s(&edited)]);
    ok(&["edit", "--scene", s(&gt), "--recolor", "3:0,0,1", "--out", s(&edited)]);
    // an absent group is not an error
    ok(&["edit", "--scene", s(&gt), "--remove", "99", "--out", s(&edited)]);
    assert_eq!(std::fs::read(&edited).unwrap(), std::fs::read(&gt).unwrap());
}

#[test]
fn same_seed_same_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_dataset(&dir.path().join("a"));
    let b = small_dataset(&dir.path().join("b"));
    assert_eq!(std::fs::read(a.join("gt_scene.gseg")).unwrap(), std::fs::read(b.join("gt_scene.gseg")).unwrap());
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.gseg");
    let out = gradiseg(&["edit", "--scene", s(&missing), "--remove", "1", "--out", s(&dir.path().join("x.gseg"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = gradiseg(&["edit", "--scene", s(&missing), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2), "missing operation is a usage error");
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "alpha = -1.0\n").unwrap();
    let data = small_dataset(dir.path());
    let out = gradiseg(&["train", "--data", s(&data), "--config", s(&bad_cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    let gt = data.join("gt_scene.gseg");
    let out = gradiseg(&["edit", "--scene", s(&gt), "--recolor", "1:2,0,0", "--out", s(&dir.path().join("y.gseg"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = gradiseg(&["render", "--scene", s(&gt), "--data", s(&data), "--view", "99", "--out", s(&dir.path().join("z.ppm"))]);
    assert_eq!(out.status.code(), Some(2));
}
