//! Run configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tryon_core::alignment::AlignmentConfig;
use tryon_core::appearance::{AppearanceLossWeights, AppearanceNetConfig};
use tryon_core::data::ImageGeometry;
use tryon_core::nets::Widths;
use tryon_core::shape::{ShapeLossWeights, ShapeNetConfig};
use tryon_tensor::AdamConfig;

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate of the alignment regressor during stage two.
    pub align_lr: f64,
    pub batch_size: usize,
    /// Gradient penalty on both critics.
    pub use_gp: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        OptimConfig { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, align_lr: 1e-4, batch_size: 4, use_gp: true }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn align_adam(&self) -> AdamConfig {
        AdamConfig { lr: self.align_lr, ..self.adam() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub shape_steps: u64,
    pub appearance_steps: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { shape_steps: 2000, appearance_steps: 2000, checkpoint_every: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Toy,
    Viton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Toy scenes drawn from seeds `0..toy_scenes`.
    pub toy_scenes: u64,
    /// Root of a VITON-layout directory.
    pub root: PathBuf,
    /// Optional id lists (one id per line) under `root`.
    pub train_list: Option<PathBuf>,
    pub val_list: Option<PathBuf>,
    /// Reference split sizes of the full dataset; informational.
    pub reference_train_size: usize,
    pub reference_val_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Toy,
            toy_scenes: 1000,
            root: PathBuf::from("data/viton"),
            train_list: None,
            val_list: None,
            reference_train_size: 14221,
            reference_val_size: 2032,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub addr: String,
    /// Allowed browser origin; `*` allows any.
    pub cors_origin: String,
    pub catalog_persons: usize,
    pub catalog_garments: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig { addr: "127.0.0.1:8080".into(), cors_origin: "*".into(), catalog_persons: 8, catalog_garments: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub shape: ShapeNetConfig,
    pub appearance: AppearanceNetConfig,
    pub alignment: AlignmentConfig,
    pub shape_loss: ShapeLossWeights,
    pub appearance_loss: AppearanceLossWeights,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub serve: ServeConfig,
    /// Checkpoints, loss logs and the lock file.
    pub run_dir: PathBuf,
}

impl Default for PipelineConfig {
    /// The desk-scale toy setup: 64 x 48, depth 3.
    fn default() -> Self {
        let w = Widths { base: 16, max: 64 };
        PipelineConfig {
            seed: 0,
            geometry: GeometryConfig { height: 64, width: 48 },
            shape: ShapeNetConfig { widths: w, disc_width: 16, res_blocks: 2, ..Default::default() },
            appearance: AppearanceNetConfig { widths: w, disc_width: 16, spade_hidden: 16, ..Default::default() },
            alignment: AlignmentConfig { widths: w, ..Default::default() },
            shape_loss: ShapeLossWeights::default(),
            appearance_loss: AppearanceLossWeights::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            serve: ServeConfig::default(),
            run_dir: PathBuf::from("runs/toy"),
        }
    }
}

impl PipelineConfig {
    /// Full-resolution setup: 256 x 192, depth 5, base width 64.
    pub fn full_scale() -> Self {
        let w = Widths { base: 64, max: 512 };
        PipelineConfig {
            geometry: GeometryConfig { height: 256, width: 192 },
            shape: ShapeNetConfig { depth: 5, widths: w, res_blocks: 4, disc_layers: 3, disc_width: 64 },
            appearance: AppearanceNetConfig { depth: 5, widths: w, spade_hidden: 128, disc_width: 64, ..Default::default() },
            alignment: AlignmentConfig { downsamples: 5, widths: Widths { base: 64, max: 512 }, regressor_width: 256, ..Default::default() },
            data: DataConfig { source: DataSource::Viton, ..Default::default() },
            run_dir: PathBuf::from("runs/viton"),
            ..Default::default()
        }
    }

    pub fn geometry(&self) -> Result<ImageGeometry> {
        ImageGeometry::new(self.geometry.height, self.geometry.width).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Apply `key.path=value` overrides. Values parse as TOML, falling back
    /// to a bare string. Keys must already exist.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = toml::Value::try_from(self).map_err(|e| PipelineError::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| PipelineError::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut tree, key.trim(), value)?;
        }
        let cfg: PipelineConfig = tree.try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let g = self.geometry()?;
        if let Err(e) = g.check_depth(self.shape.depth) {
            return bad(format!("shape network: {e}"));
        }
        if let Err(e) = g.check_depth(self.appearance.depth) {
            return bad(format!("appearance network: {e}"));
        }
        if let Err(e) = g.check_depth(self.alignment.downsamples) {
            return bad(format!("alignment network: {e}"));
        }
        let sl = self.shape_loss;
        if [sl.gamma1, sl.gamma2, sl.gamma3].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("shape loss weights must be finite and non-negative".into());
        }
        if let Err(e) = self.appearance_loss.validate() {
            return bad(e.to_string());
        }
        let o = self.optim;
        if !(o.lr >= 0.0 && o.align_lr >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad("optimizer settings out of range".into());
        }
        if o.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.alignment.grid < 2 {
            return bad("alignment grid must be at least 2".into());
        }
        for (name, w) in [("shape", self.shape.widths), ("appearance", self.appearance.widths), ("alignment", self.alignment.widths)] {
            if w.base == 0 || w.max < w.base {
                return bad(format!("{name} widths need 0 < base <= max"));
            }
        }
        if self.train.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(tree: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let unknown = || PipelineError::Config(format!("unknown config key {key:?}"));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            // Optional fields are absent from the serialised tree.
            let optional = matches!(*part, "train_list" | "val_list");
            if !table.contains_key(*part) && !optional {
                return Err(unknown());
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.get_mut(*part).ok_or_else(unknown)?;
    }
    Err(unknown())
}
