//! End-to-end try-on with trained networks.

use std::time::Instant;

use serde::Serialize;
use tryon_core::alignment::{regress_theta, warp_with, AlignmentNet, TpsParams};
use tryon_core::appearance::{appearance_forward, AppearanceGenerator};
use tryon_core::data::{onehot_encode, person_representation, ImageGeometry, KeypointSet, ParseLabelMap, RgbImage, SegMap};
use tryon_core::masking::{default_pad, mask_person_image, mask_segmentation};
use tryon_core::sample::TrainingSample;
use tryon_core::shape::{compose_shape, shape_forward, ShapeGenerator};

use crate::checkpoint::Checkpoint;
use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};
use crate::train::{checkpoint_path, Stage};

/// Everything known about the person to re-dress.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonAsset {
    pub image: RgbImage,
    pub parse: ParseLabelMap,
    pub keypoints: KeypointSet,
}

impl From<&TrainingSample> for PersonAsset {
    fn from(s: &TrainingSample) -> Self {
        PersonAsset { image: s.person.clone(), parse: s.parse.clone(), keypoints: s.keypoints.clone() }
    }
}

/// Wall time of each phase, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timing {
    pub shape_ms: f64,
    pub alignment_ms: f64,
    pub appearance_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TryonResult {
    pub output: RgbImage,
    /// Composed stage-one layout used to condition the renderer.
    pub seg: SegMap,
    pub warped_cloth: RgbImage,
    pub theta: TpsParams,
    pub timing: Timing,
}

/// The three inference networks, read-only after loading.
#[derive(Debug, Clone)]
pub struct TryonModel {
    pub geometry: ImageGeometry,
    pub shape: ShapeGenerator,
    pub align: AlignmentNet,
    pub appearance: AppearanceGenerator,
}

impl TryonModel {
    /// Freshly initialised networks for `cfg`.
    pub fn untrained(cfg: &PipelineConfig) -> Result<Self> {
        let geometry = cfg.geometry()?;
        let shape = ShapeGenerator::new(cfg.shape, cfg.seed);
        shape.check_geometry(geometry)?;
        let appearance = AppearanceGenerator::new(cfg.appearance, cfg.seed);
        appearance.check_geometry(geometry)?;
        let align = AlignmentNet::new(cfg.alignment, geometry, cfg.seed ^ 0xa11e)?;
        Ok(TryonModel { geometry, shape, align, appearance })
    }

    /// Load both stage checkpoints from the run directory.
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let mut m = Self::untrained(cfg)?;
        let shape_path = checkpoint_path(cfg, Stage::Shape);
        let app_path = checkpoint_path(cfg, Stage::Appearance);
        let shape = Checkpoint::load(&shape_path)?;
        let app = Checkpoint::load(&app_path)?;
        shape.load_store(&shape_path, "gen", &mut m.shape.store)?;
        app.load_store(&app_path, "gen", &mut m.appearance.store)?;
        app.load_store(&app_path, "align", &mut m.align.store)?;
        Ok(m)
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// mask -> layout -> compose -> align -> warp -> mask person -> render.
pub fn infer_tryon(model: &TryonModel, person: &PersonAsset, garment: &RgbImage) -> Result<TryonResult> {
    let g = model.geometry;
    for (what, got) in [("person", person.image.geometry()), ("parse", person.parse.geometry()), ("garment", garment.geometry())] {
        if got != g {
            return Err(PipelineError::Core(tryon_core::TryonError::ShapeMismatch(format!("{what} is {got:?}, model expects {g:?}"))));
        }
    }
    person.keypoints.validate(g)?;
    let start = Instant::now();
    let seg = onehot_encode(&person.parse);
    let masked = mask_segmentation(&seg, &person.keypoints, default_pad(g))?;
    let rep = person_representation(&seg, &person.keypoints)?;
    let pred = shape_forward(&model.shape, &masked, &rep, garment)?;
    let composed = compose_shape(&pred, &seg, &masked.region);
    let shape_ms = ms(start);

    let t = Instant::now();
    let theta = regress_theta(&model.align, &rep, garment)?;
    let warped_cloth = warp_with(model.align.basis(), garment, &theta)?;
    let alignment_ms = ms(t);

    let t = Instant::now();
    let masked_person = mask_person_image(&person.image, &seg, &masked.region)?;
    let output = appearance_forward(&model.appearance, &masked_person, &warped_cloth, &rep, &composed)?;
    let appearance_ms = ms(t);

    let timing = Timing { shape_ms, alignment_ms, appearance_ms, total_ms: ms(start) };
    Ok(TryonResult { output, seg: composed, warped_cloth, theta, timing })
}
