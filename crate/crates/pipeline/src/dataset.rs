//! Training data: VITON-layout directories and procedural toy scenes.
//!
//! A VITON root holds `image/{id}.png`, `cloth/{id}.png`, `parse/{id}.png`
//! (8-bit grayscale label ids) and `pose/{id}.json` with
//! `{"keypoints": [[row, col, visibility], ...]}` in image pixels.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use tryon_core::data::{bilinear_resize, ImageGeometry, Keypoint, KeypointSet, ParseLabelMap, RgbImage, NUM_KEYPOINTS};
use tryon_core::sample::TrainingSample;
use tryon_core::toy;

use crate::config::{DataSource, PipelineConfig};
use crate::error::{PipelineError, Result};
use crate::imageio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoseFile {
    keypoints: Vec<[f64; 3]>,
}

fn asset(root: &Path, dir: &str, id: &str, ext: &str) -> PathBuf {
    root.join(dir).join(format!("{id}.{ext}"))
}

/// Bilinear per-channel resize with half-pixel centres.
pub fn resize_rgb(img: &RgbImage, geom: ImageGeometry) -> RgbImage {
    if img.geometry() == geom {
        return img.clone();
    }
    let mut out = Array3::zeros((3, geom.height, geom.width));
    for ch in 0..3 {
        let plane = img.data().index_axis(ndarray::Axis(0), ch).to_owned();
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&bilinear_resize(&plane, geom.height, geom.width));
    }
    RgbImage::from_clamped(out).expect("resized image keeps three channels")
}

/// Nearest-neighbour resize of a label map (pixel-centre sampling).
pub fn resize_labels(parse: &ParseLabelMap, geom: ImageGeometry) -> ParseLabelMap {
    let src = parse.geometry();
    if src == geom {
        return parse.clone();
    }
    let pick = |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let labels = Array2::from_shape_fn((geom.height, geom.width), |(r, c)| {
        parse.get(pick(r, src.height, geom.height), pick(c, src.width, geom.width))
    });
    ParseLabelMap::new(labels).expect("labels copied from a valid map")
}

/// Scale keypoints from `src` to `dst` pixels, clamping into the frame.
pub fn rescale_keypoints(kp: &KeypointSet, src: ImageGeometry, dst: ImageGeometry) -> KeypointSet {
    let scaled = kp.scaled(dst.height as f64 / src.height as f64, dst.width as f64 / src.width as f64);
    let mut out = scaled.clone();
    for (i, p) in scaled.points().iter().enumerate() {
        if p.visible {
            out.set(i, Keypoint::new(p.row.clamp(0.0, (dst.height - 1) as f64), p.col.clamp(0.0, (dst.width - 1) as f64)));
        }
    }
    out
}

pub fn parse_pose(text: &str) -> Result<KeypointSet> {
    let pose: PoseFile = serde_json::from_str(text).map_err(|e| PipelineError::InvalidPose(e.to_string()))?;
    if pose.keypoints.len() != NUM_KEYPOINTS {
        return Err(PipelineError::InvalidPose(format!("expected {NUM_KEYPOINTS} keypoints, got {}", pose.keypoints.len())));
    }
    let points = pose
        .keypoints
        .iter()
        .map(|&[r, c, v]| if v > 0.0 { Keypoint::new(r, c) } else { Keypoint::hidden() })
        .collect();
    KeypointSet::new(points).map_err(|e| PipelineError::InvalidPose(e.to_string()))
}

pub fn pose_json(kp: &KeypointSet) -> String {
    let keypoints = kp.points().iter().map(|p| [p.row, p.col, if p.visible { 1.0 } else { 0.0 }]).collect();
    serde_json::to_string(&PoseFile { keypoints }).expect("pose serialises")
}

/// Load one VITON sample and resample it to `geom`.
pub fn load_viton_sample(root: &Path, id: &str, geom: ImageGeometry) -> Result<TrainingSample> {
    let person = imageio::read_rgb(&asset(root, "image", id, "png"))?;
    let cloth = imageio::read_rgb(&asset(root, "cloth", id, "png"))?;
    let parse = imageio::read_labels(&asset(root, "parse", id, "png"))?;
    let pose_path = asset(root, "pose", id, "json");
    let pose_text = std::fs::read_to_string(&pose_path).map_err(|e| PipelineError::io_at(&pose_path, e))?;
    let kp = parse_pose(&pose_text)?;
    let src = person.geometry();
    if parse.geometry() != src {
        return Err(PipelineError::Image {
            path: asset(root, "parse", id, "png"),
            reason: format!("parse is {:?}, image is {:?}", parse.geometry(), src),
        });
    }
    kp.validate(src).map_err(|e| PipelineError::InvalidPose(e.to_string()))?;
    let sample = TrainingSample::new(
        resize_rgb(&person, geom),
        resize_rgb(&cloth, geom),
        resize_labels(&parse, geom),
        rescale_keypoints(&kp, src, geom),
    )?;
    Ok(sample)
}

/// Write a sample in VITON layout under `root`.
pub fn save_viton_sample(root: &Path, id: &str, sample: &TrainingSample) -> Result<()> {
    for dir in ["image", "cloth", "parse", "pose"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| PipelineError::io_at(&d, e))?;
    }
    imageio::write_rgb(&asset(root, "image", id, "png"), &sample.person)?;
    imageio::write_rgb(&asset(root, "cloth", id, "png"), &sample.cloth)?;
    imageio::write_labels(&asset(root, "parse", id, "png"), &sample.parse)?;
    let pose = asset(root, "pose", id, "json");
    std::fs::write(&pose, pose_json(&sample.keypoints)).map_err(|e| PipelineError::io_at(&pose, e))
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io_at(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// FNV-1a, used to split unlisted VITON ids with the toy split rule.
fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn scan_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("image");
    let entries = std::fs::read_dir(&dir).map_err(|e| PipelineError::io_at(&dir, e))?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "png").then(|| p.file_stem()?.to_str().map(String::from)).flatten()
        })
        .collect();
    ids.sort();
    Ok(ids)
}

/// Where samples come from, with a fixed train/validation split.
#[derive(Debug, Clone)]
pub enum Dataset {
    Toy { geometry: ImageGeometry, train: Vec<u64>, val: Vec<u64> },
    Viton { geometry: ImageGeometry, root: PathBuf, train: Vec<String>, val: Vec<String> },
}

impl Dataset {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let geometry = cfg.geometry()?;
        match cfg.data.source {
            DataSource::Toy => Ok(Self::toy(geometry, cfg.data.toy_scenes)),
            DataSource::Viton => {
                let root = cfg.data.root.clone();
                let (train, val) = match (&cfg.data.train_list, &cfg.data.val_list) {
                    (Some(t), Some(v)) => (read_id_list(&root.join(t))?, read_id_list(&root.join(v))?),
                    (None, None) => {
                        let ids = scan_ids(&root)?;
                        ids.into_iter().partition(|id| !toy::is_validation(id_hash(id)))
                    }
                    _ => return Err(PipelineError::Config("set both data.train_list and data.val_list, or neither".into())),
                };
                Ok(Dataset::Viton { geometry, root, train, val })
            }
        }
    }

    /// Toy scenes with seeds `0..scenes`, split by seed hash.
    pub fn toy(geometry: ImageGeometry, scenes: u64) -> Self {
        let (val, train) = (0..scenes).partition(|&s| toy::is_validation(s));
        Dataset::Toy { geometry, train, val }
    }

    pub fn geometry(&self) -> ImageGeometry {
        match self {
            Dataset::Toy { geometry, .. } | Dataset::Viton { geometry, .. } => *geometry,
        }
    }

    pub fn train_len(&self) -> usize {
        match self {
            Dataset::Toy { train, .. } => train.len(),
            Dataset::Viton { train, .. } => train.len(),
        }
    }

    pub fn train_sample(&self, i: usize) -> Result<TrainingSample> {
        match self {
            Dataset::Toy { geometry, train, .. } => Ok(toy::generate_toy_scene(train[i], *geometry)?),
            Dataset::Viton { geometry, root, train, .. } => load_viton_sample(root, &train[i], *geometry),
        }
    }

    pub fn val_ids(&self) -> Vec<String> {
        match self {
            Dataset::Toy { val, .. } => val.iter().map(u64::to_string).collect(),
            Dataset::Viton { val, .. } => val.clone(),
        }
    }

    /// Any sample by id, training or validation.
    pub fn sample(&self, id: &str) -> Result<TrainingSample> {
        match self {
            Dataset::Toy { geometry, .. } => {
                let seed: u64 = id.parse().map_err(|_| PipelineError::UnknownId { kind: "toy scene", id: id.to_string() })?;
                Ok(toy::generate_toy_scene(seed, *geometry)?)
            }
            Dataset::Viton { geometry, root, .. } => {
                if !asset(root, "image", id, "png").exists() {
                    return Err(PipelineError::UnknownId { kind: "sample", id: id.to_string() });
                }
                load_viton_sample(root, id, *geometry)
            }
        }
    }
}
