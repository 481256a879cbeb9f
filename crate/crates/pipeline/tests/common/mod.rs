//! Small configurations shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use tryon_core::nets::Widths;
use tryon_pipeline::PipelineConfig;

/// 48 x 32 toy run with the narrowest networks that still learn.
pub fn tiny_config(run_dir: &Path) -> PipelineConfig {
    let w = Widths { base: 4, max: 8 };
    let mut cfg = PipelineConfig::default();
    cfg.geometry.height = 48;
    cfg.geometry.width = 32;
    cfg.shape.widths = w;
    cfg.shape.disc_width = 4;
    cfg.shape.res_blocks = 1;
    cfg.appearance.widths = w;
    cfg.appearance.disc_width = 4;
    cfg.appearance.spade_hidden = 4;
    cfg.alignment.widths = w;
    cfg.optim.batch_size = 2;
    cfg.data.toy_scenes = 40;
    cfg.train.shape_steps = 4;
    cfg.train.appearance_steps = 4;
    cfg.train.checkpoint_every = 2;
    cfg.serve.catalog_persons = 3;
    cfg.serve.catalog_garments = 3;
    cfg.run_dir = run_dir.to_path_buf();
    cfg
}
