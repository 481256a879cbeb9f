//! Evaluation helpers: image folders, a toy-fitted classifier head and the
//! garment colour-transfer check.

use std::path::Path;

use ndarray::{Array3, IxDyn};
use tryon_core::backbone::RandomConvBackbone;
use tryon_core::data::{label, stack_chw, ImageGeometry, ParseLabelMap, RgbImage, SegMap};
use tryon_core::toy;
use tryon_tensor::Array;

use crate::error::{PipelineError, Result};
use crate::imageio;

/// Load every `*.png` in `dir` (sorted by name) as one `[n, 3, H, W]` batch.
pub fn images_from_dir(dir: &Path) -> Result<Array> {
    let entries = std::fs::read_dir(dir).map_err(|e| PipelineError::io_at(dir, e))?;
    let mut paths: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.extension().is_some_and(|x| x == "png")).collect();
    paths.sort();
    if paths.is_empty() {
        return Err(PipelineError::MissingAsset(dir.join("*.png")));
    }
    let images = paths.iter().map(|p| imageio::read_rgb(p)).collect::<Result<Vec<_>>>()?;
    let g = images[0].geometry();
    if let Some((p, img)) = paths.iter().zip(&images).find(|(_, i)| i.geometry() != g) {
        return Err(PipelineError::Image { path: p.clone(), reason: format!("{:?} differs from {:?}", img.geometry(), g) });
    }
    Ok(stack_chw(images.iter().map(|i| i.data())))
}

/// Hue of a signed RGB colour, bucketed into `classes` bins.
pub fn hue_class(rgb: [f64; 3], classes: usize) -> usize {
    let [r, g, b] = rgb.map(|v| (v + 1.0) / 2.0);
    let max = r.max(g).max(b);
    let d = max - r.min(g).min(b);
    let hue = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    ((hue * classes as f64) as usize).min(classes - 1)
}

/// The standard backbone with its classifier head fitted to garment hue on
/// `scenes` toy people (seeds from 10 000 upward, away from training seeds).
pub fn toy_probe_backbone(geom: ImageGeometry, scenes: usize) -> Result<RandomConvBackbone> {
    let mut backbone = RandomConvBackbone::standard();
    let mut images = Vec::with_capacity(scenes);
    let mut labels = Vec::with_capacity(scenes);
    for seed in 10_000..10_000 + scenes as u64 {
        images.push(toy::generate_toy_scene(seed, geom)?.person.into_data());
        labels.push(hue_class(toy::toy_garment(seed).base, 10));
    }
    backbone.fit_probe(&stack_chw(&images), &labels, 300, 0.05)?;
    Ok(backbone)
}

/// Mean colour over pixels where `keep(row, col)` holds.
pub fn masked_mean(img: &RgbImage, keep: impl Fn(usize, usize) -> bool) -> Option<[f64; 3]> {
    let g = img.geometry();
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for r in 0..g.height {
        for c in 0..g.width {
            if keep(r, c) {
                for (ch, s) in sum.iter_mut().enumerate() {
                    *s += img.data()[[ch, r, c]];
                }
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}

/// Product-shot garment pixels: everything that is not the near-white backdrop.
pub fn product_mean(cloth: &RgbImage) -> Option<[f64; 3]> {
    masked_mean(cloth, |r, c| (0..3).any(|ch| cloth.data()[[ch, r, c]] < 0.95))
}

pub fn worn_mean(person: &RgbImage, parse: &ParseLabelMap) -> Option<[f64; 3]> {
    masked_mean(person, |r, c| parse.get(r, c) == label::TOP_CLOTHES)
}

pub fn l1(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

/// Outcome of one colour-transfer comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorTransfer {
    pub to_target: f64,
    pub to_original: f64,
}

impl ColorTransfer {
    pub fn closer_to_target(&self) -> bool {
        self.to_target < self.to_original
    }
}

/// Compare the output's garment-region mean (top-clothes pixels of the layout
/// it was rendered from) with the target and the originally worn garment.
pub fn color_transfer(output: &RgbImage, layout: &SegMap, target_garment: &RgbImage, person: &RgbImage, parse: &ParseLabelMap) -> Option<ColorTransfer> {
    let out = masked_mean(output, |r, c| layout.label_at(r, c) == label::TOP_CLOTHES)?;
    let target = product_mean(target_garment)?;
    let original = worn_mean(person, parse)?;
    Some(ColorTransfer { to_target: l1(out, target), to_original: l1(out, original) })
}

/// `[n, 3, H, W]` uniform noise in `[-1, 1]`.
pub fn uniform_noise(n: usize, geom: ImageGeometry, seed: u64) -> Array {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Array::from_shape_simple_fn(IxDyn(&[n, 3, geom.height, geom.width]), || rng.gen_range(-1.0..=1.0))
}

pub fn to_batch(images: &[RgbImage]) -> Array {
    let data: Vec<&Array3<f64>> = images.iter().map(|i| i.data()).collect();
    stack_chw(data)
}
