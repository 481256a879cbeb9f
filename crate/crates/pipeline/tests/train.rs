mod common;

use common::tiny_config;
use tryon_pipeline::checkpoint::Checkpoint;
use tryon_pipeline::train::{checkpoint_path, log_path, read_log, train, RunLock, Stage, TrainOptions};
use tryon_pipeline::PipelineError;

#[test]
fn shape_loss_falls_on_toy_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.train.shape_steps = 500;
    cfg.train.checkpoint_every = 500;
    let mut pp = Vec::new();
    train(&cfg, Stage::Shape, TrainOptions::default(), |r| pp.push(r.losses["per_pixel"])).unwrap();
    let early = pp[..10].iter().sum::<f64>() / 10.0;
    let late = pp[pp.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(late < early, "per-pixel {early} -> {late}");
}

#[test]
fn resume_replays_an_uninterrupted_run() {
    for stage in [Stage::Shape, Stage::Appearance] {
        let straight = tempfile::tempdir().unwrap();
        let split = tempfile::tempdir().unwrap();
        let mut a = tiny_config(straight.path());
        let mut b = tiny_config(split.path());
        for cfg in [&mut a, &mut b] {
            cfg.train.shape_steps = 6;
            cfg.train.appearance_steps = 6;
            cfg.train.checkpoint_every = 3;
        }
        train(&a, stage, TrainOptions::default(), |_| {}).unwrap();

        b.train.shape_steps = 3;
        b.train.appearance_steps = 3;
        train(&b, stage, TrainOptions::default(), |_| {}).unwrap();
        b.train.shape_steps = 6;
        b.train.appearance_steps = 6;
        let summary = train(&b, stage, TrainOptions::default(), |_| {}).unwrap();
        assert_eq!((summary.start_step, summary.end_step), (3, 6));

        let ca = Checkpoint::load(&checkpoint_path(&a, stage)).unwrap();
        let cb = Checkpoint::load(&checkpoint_path(&b, stage)).unwrap();
        assert_eq!(ca.tensors, cb.tensors, "{stage} parameters differ after resume");
        let strip = |cfg| read_log(&log_path(cfg, stage)).unwrap().into_iter().map(|r| (r.step, r.losses)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
    }
}

#[test]
fn log_lines_are_json_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    train(&cfg, Stage::Appearance, TrainOptions::default(), |_| {}).unwrap();
    let text = std::fs::read_to_string(log_path(&cfg, Stage::Appearance)).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i as u64 + 1);
        assert_eq!(l["stage"], "appearance");
        for key in ["tps", "per_pixel", "perceptual", "g_total", "d_total"] {
            assert!(l["losses"][key].as_f64().unwrap().is_finite(), "{key}");
        }
    }
}

#[test]
fn fresh_discards_progress() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    train(&cfg, Stage::Shape, TrainOptions::default(), |_| {}).unwrap();
    let again = train(&cfg, Stage::Shape, TrainOptions::default(), |_| {}).unwrap();
    assert_eq!(again.start_step, 4);
    assert!(again.last.is_none());
    let fresh = train(&cfg, Stage::Shape, TrainOptions { fresh: true }, |_| {}).unwrap();
    assert_eq!(fresh.start_step, 0);
    assert_eq!(read_log(&log_path(&cfg, Stage::Shape)).unwrap().len(), 4);
}

#[test]
fn concurrent_runs_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let _held = RunLock::acquire(dir.path()).unwrap();
    assert!(matches!(train(&cfg, Stage::Shape, TrainOptions::default(), |_| {}), Err(PipelineError::Locked(_))));
}

#[test]
fn corrupt_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    std::fs::write(checkpoint_path(&cfg, Stage::Shape), b"not a checkpoint").unwrap();
    assert!(matches!(train(&cfg, Stage::Shape, TrainOptions::default(), |_| {}), Err(PipelineError::Checkpoint { .. })));
}
