use std::path::Path;
use std::process::{Command, Output};

fn tryon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tryon")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn show_config_applies_overrides() {
    let out = tryon(&["--set", "optim.batch_size=3", "--seed", "11", "show-config"]);
    assert!(out.status.success());
    let cfg: tryon_pipeline::PipelineConfig = toml::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!((cfg.optim.batch_size, cfg.seed), (3, 11));
}

#[test]
fn config_errors_exit_2() {
    assert_eq!(tryon(&["--set", "no.such=1", "show-config"]).status.code(), Some(2));
    assert_eq!(tryon(&["--config", "/nonexistent.toml", "show-config"]).status.code(), Some(2));
}

#[test]
fn toygen_then_fid() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("viton");
    let root_s = root.to_str().unwrap();
    let summary = json(&tryon(&["--set", "geometry.height=48", "--set", "geometry.width=32", "toygen", "--out", root_s, "--count", "12"]));
    assert_eq!(summary["train"].as_u64().unwrap() + summary["val"].as_u64().unwrap(), 12);
    for sub in ["image", "cloth", "parse", "pose"] {
        assert_eq!(std::fs::read_dir(root.join(sub)).unwrap().count(), 12, "{sub}");
    }
    let lists = std::fs::read_to_string(root.join("train.txt")).unwrap() + &std::fs::read_to_string(root.join("val.txt")).unwrap();
    assert_eq!(lists.lines().count(), 12);

    let images = root.join("image");
    let images = images.to_str().unwrap();
    let fid = json(&tryon(&["metrics", "fid", "--real", images, "--fake", images]));
    assert!(fid["fid"].as_f64().unwrap().abs() < 1e-4, "{fid}");
    assert_eq!(fid["n_real"], 12);
    let is = json(&tryon(&["metrics", "is", "--images", images, "--splits", "2"]));
    assert!(is["is_mean"].as_f64().unwrap() >= 1.0 - 1e-9);
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent");
    let m = missing.to_str().unwrap();
    assert_eq!(tryon(&["metrics", "fid", "--real", m, "--fake", m]).status.code(), Some(3));
    assert_eq!(tryon(&["metrics", "fid", "--real", m, "--fake", m, "--backbone", "nope"]).status.code(), Some(3));
}

#[test]
fn train_and_infer_from_viton_layout() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("viton");
    let run = dir.path().join("run");
    let out = dir.path().join("out");
    let set = |k: &str, v: &dyn AsRef<Path>| format!("{k}={:?}", v.as_ref().to_str().unwrap());
    let common: Vec<String> = [
        "geometry.height=48", "geometry.width=32", "shape.widths.base=4", "shape.widths.max=8", "shape.disc_width=4",
        "appearance.widths.base=4", "appearance.widths.max=8", "appearance.disc_width=4", "appearance.spade_hidden=4",
        "alignment.widths.base=4", "alignment.widths.max=8", "optim.batch_size=2", "train.shape_steps=2",
        "train.appearance_steps=2", "data.source=\"viton\"",
    ]
    .into_iter()
    .map(String::from)
    .chain([set("data.root", &root), set("run_dir", &run)])
    .collect();
    let mut args: Vec<&str> = common.iter().flat_map(|s| ["--set", s.as_str()]).collect();
    let base = args.len();

    args.extend(["toygen", "--out", root.to_str().unwrap(), "--count", "20"]);
    json(&tryon(&args));
    for cmd in ["train-shape", "train-appearance"] {
        args.truncate(base);
        args.push(cmd);
        assert_eq!(json(&tryon(&args))["end_step"], 2);
    }
    args.truncate(base);
    let val = std::fs::read_to_string(root.join("val.txt")).unwrap();
    let id = val.lines().next().expect("at least one validation id").to_string();
    args.extend(["infer", "--person", &id, "--garment", &id, "--out", out.to_str().unwrap()]);
    let r = json(&tryon(&args));
    assert_eq!(r["person_id"], id.as_str());
    for f in ["output.png", "seg.png", "warped_cloth.png"] {
        assert!(out.join(f).exists(), "{f}");
    }
    args.truncate(base);
    args.extend(["infer", "--person", "999999", "--garment", &id, "--out", out.to_str().unwrap()]);
    assert_eq!(tryon(&args).status.code(), Some(3));
}
