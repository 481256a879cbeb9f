//! Training orchestration for both stages: batching, loss logs, periodic
//! checkpoints, resume and the single-writer lock.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use fs2::FileExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tryon_core::appearance::{AppearanceBatch, AppearanceTrainer};
use tryon_core::backbone::RandomConvBackbone;
use tryon_core::masking::default_pad;
use tryon_core::sample::PreparedSample;
use tryon_core::shape::{ShapeBatch, ShapeTrainer};

use crate::checkpoint::Checkpoint;
use crate::config::PipelineConfig;
use crate::dataset::Dataset;
use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Shape,
    Appearance,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Shape => "shape",
            Stage::Appearance => "appearance",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Stage::Shape => 1,
            Stage::Appearance => 2,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn checkpoint_path(cfg: &PipelineConfig, stage: Stage) -> PathBuf {
    cfg.run_dir.join(format!("{stage}.safetensors"))
}

pub fn log_path(cfg: &PipelineConfig, stage: Stage) -> PathBuf {
    cfg.run_dir.join(format!("{stage}_loss.jsonl"))
}

/// Randomness for one step depends only on (seed, stage, step), so a resumed
/// run replays exactly what an uninterrupted one would have done.
pub fn step_rng(seed: u64, stage: Stage, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage.stream() << 48) | step);
    rng
}

/// One JSON line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: u64,
    pub elapsed_ms: f64,
    pub losses: std::collections::BTreeMap<String, f64>,
}

/// Exclusive lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    _file: File,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir).map_err(|e| PipelineError::io_at(run_dir, e))?;
        let path = run_dir.join("train.lock");
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path).map_err(|e| PipelineError::io_at(&path, e))?;
        file.try_lock_exclusive().map_err(|_| PipelineError::Locked(run_dir.to_path_buf()))?;
        Ok(RunLock { _file: file })
    }
}

/// The trainers of both stages behind one interface.
pub enum StageTrainer {
    Shape(Box<ShapeTrainer>),
    Appearance(Box<AppearanceTrainer>),
}

impl StageTrainer {
    pub fn new(cfg: &PipelineConfig, stage: Stage) -> Result<Self> {
        match stage {
            Stage::Shape => {
                let mut t = ShapeTrainer::new(cfg.shape, cfg.shape_loss, cfg.optim.adam(), cfg.seed);
                t.use_gp = cfg.optim.use_gp;
                Ok(StageTrainer::Shape(Box::new(t)))
            }
            Stage::Appearance => {
                let mut t = AppearanceTrainer::new(
                    cfg.appearance,
                    cfg.alignment,
                    cfg.geometry()?,
                    Arc::new(RandomConvBackbone::standard()),
                    cfg.appearance_loss,
                    cfg.optim.adam(),
                    cfg.optim.align_adam(),
                    cfg.seed,
                )?;
                t.use_gp = cfg.optim.use_gp;
                Ok(StageTrainer::Appearance(Box::new(t)))
            }
        }
    }

    pub fn stage(&self) -> Stage {
        match self {
            StageTrainer::Shape(_) => Stage::Shape,
            StageTrainer::Appearance(_) => Stage::Appearance,
        }
    }

    pub fn step(&mut self, batch: &[&PreparedSample], rng: &mut impl Rng) -> Result<Vec<(&'static str, f64)>> {
        Ok(match self {
            StageTrainer::Shape(t) => t.train_step(&ShapeBatch::from_samples(batch)?, rng)?.values().to_vec(),
            StageTrainer::Appearance(t) => t.train_step(&AppearanceBatch::from_samples(batch)?, rng)?.values().to_vec(),
        })
    }

    pub fn to_checkpoint(&self, step: u64, cfg: &PipelineConfig) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.metadata.insert("stage".into(), self.stage().name().into());
        c.metadata.insert("step".into(), step.to_string());
        c.metadata.insert("config".into(), cfg.to_toml());
        match self {
            StageTrainer::Shape(t) => {
                c.put_store("gen", &t.gen.store);
                c.put_adam("gen", &t.opt_g, &t.gen.store);
                c.put_store("disc", &t.disc.store);
                c.put_adam("disc", &t.opt_d, &t.disc.store);
            }
            StageTrainer::Appearance(t) => {
                c.put_store("gen", &t.gen.store);
                c.put_adam("gen", &t.opt_g, &t.gen.store);
                c.put_store("align", &t.align.store);
                c.put_adam("align", &t.opt_a, &t.align.store);
                c.put_store("disc", &t.disc.store);
                c.put_adam("disc", &t.opt_d, &t.disc.store);
            }
        }
        c
    }

    /// Restore all state and return the step the archive was written at.
    pub fn restore(&mut self, c: &Checkpoint, path: &Path) -> Result<u64> {
        if c.metadata.get("stage").map(String::as_str) != Some(self.stage().name()) {
            return Err(PipelineError::Checkpoint { path: path.to_path_buf(), reason: format!("not a {} checkpoint", self.stage()) });
        }
        match self {
            StageTrainer::Shape(t) => {
                c.load_store(path, "gen", &mut t.gen.store)?;
                c.load_adam(path, "gen", &mut t.opt_g, &t.gen.store)?;
                c.load_store(path, "disc", &mut t.disc.store)?;
                c.load_adam(path, "disc", &mut t.opt_d, &t.disc.store)?;
            }
            StageTrainer::Appearance(t) => {
                c.load_store(path, "gen", &mut t.gen.store)?;
                c.load_adam(path, "gen", &mut t.opt_g, &t.gen.store)?;
                c.load_store(path, "align", &mut t.align.store)?;
                c.load_adam(path, "align", &mut t.opt_a, &t.align.store)?;
                c.load_store(path, "disc", &mut t.disc.store)?;
                c.load_adam(path, "disc", &mut t.opt_d, &t.disc.store)?;
            }
        }
        c.meta_u64(path, "step")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Ignore and overwrite an existing checkpoint and log.
    pub fresh: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub stage: Stage,
    pub start_step: u64,
    pub end_step: u64,
    pub checkpoint: PathBuf,
    pub last: Option<StepRecord>,
}

/// Draw and prepare the batch for `step`.
pub fn sample_batch(data: &Dataset, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<PreparedSample>> {
    let n = data.train_len();
    if n == 0 {
        return Err(PipelineError::Core(tryon_core::TryonError::InsufficientData("no training samples".into())));
    }
    let pad = default_pad(data.geometry());
    (0..batch_size)
        .map(|_| {
            let sample = data.train_sample(rng.gen_range(0..n))?;
            Ok(PreparedSample::new(sample, pad)?)
        })
        .collect()
}

/// Keep only log lines up to and including `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let Ok(file) = File::open(path) else { return Ok(()) };
    let kept: Vec<String> = BufReader::new(file)
        .lines()
        .map_while(|l| l.ok())
        .filter(|l| serde_json::from_str::<StepRecord>(l).map(|r| r.step <= step).unwrap_or(false))
        .collect();
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| PipelineError::io_at(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let file = File::open(path).map_err(|e| PipelineError::io_at(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| PipelineError::io_at(path, e))?;
            serde_json::from_str(&l).map_err(|e| PipelineError::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })
        })
        .collect()
}

/// Train `stage` up to the configured step count, resuming from the stage
/// checkpoint when one exists. `on_step` sees every logged record.
pub fn train(cfg: &PipelineConfig, stage: Stage, opts: TrainOptions, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainSummary> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.run_dir)?;
    let data = Dataset::from_config(cfg)?;
    let ckpt_path = checkpoint_path(cfg, stage);
    let log = log_path(cfg, stage);
    let mut trainer = StageTrainer::new(cfg, stage)?;
    let mut start = 0;
    if !opts.fresh && ckpt_path.exists() {
        start = trainer.restore(&Checkpoint::load(&ckpt_path)?, &ckpt_path)?;
        truncate_log(&log, start)?;
    } else {
        std::fs::write(&log, "").map_err(|e| PipelineError::io_at(&log, e))?;
    }
    let total = match stage {
        Stage::Shape => cfg.train.shape_steps,
        Stage::Appearance => cfg.train.appearance_steps,
    };
    let mut log_file = OpenOptions::new().append(true).open(&log).map_err(|e| PipelineError::io_at(&log, e))?;
    let mut last = None;
    for step in start + 1..=total {
        let t0 = Instant::now();
        let mut rng = step_rng(cfg.seed, stage, step);
        let batch = sample_batch(&data, cfg.optim.batch_size, &mut rng)?;
        let refs: Vec<&PreparedSample> = batch.iter().collect();
        let losses = trainer.step(&refs, &mut rng)?;
        let record = StepRecord {
            stage,
            step,
            elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
            losses: losses.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        };
        let line = serde_json::to_string(&record).expect("finite losses serialise");
        writeln!(log_file, "{line}").map_err(|e| PipelineError::io_at(&log, e))?;
        on_step(&record);
        if step % cfg.train.checkpoint_every == 0 || step == total {
            trainer.to_checkpoint(step, cfg).save(&ckpt_path)?;
        }
        last = Some(record);
    }
    if start >= total && !ckpt_path.exists() {
        trainer.to_checkpoint(start, cfg).save(&ckpt_path)?;
    }
    Ok(TrainSummary { stage, start_step: start, end_step: total.max(start), checkpoint: ckpt_path, last })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_rng_depends_on_all_three_inputs() {
        let draw = |s, st, k| step_rng(s, st, k).gen::<u64>();
        let base = draw(0, Stage::Shape, 5);
        assert_eq!(base, draw(0, Stage::Shape, 5));
        assert_ne!(base, draw(1, Stage::Shape, 5));
        assert_ne!(base, draw(0, Stage::Appearance, 5));
        assert_ne!(base, draw(0, Stage::Shape, 6));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(PipelineError::Locked(_))));
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn log_truncation_keeps_earlier_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let line = |step| serde_json::to_string(&StepRecord { stage: Stage::Shape, step, elapsed_ms: 1.0, losses: Default::default() }).unwrap();
        std::fs::write(&path, format!("{}\n{}\n{}\n", line(1), line(2), line(3))).unwrap();
        truncate_log(&path, 2).unwrap();
        let steps: Vec<u64> = read_log(&path).unwrap().iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![1, 2]);
    }
}
