//! Procedural person/garment scenes for desk-scale training and tests.
//!
//! Shapes are laid out in a 64 x 48 reference frame and rasterised at any
//! geometry. The worn garment is the product garment's texture mapped onto
//! the torso box, so each scene has a genuine garment correspondence.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{coco, label, ImageGeometry, Keypoint, KeypointSet, ParseLabelMap, RgbImage, NUM_KEYPOINTS};
use crate::error::Result;
use crate::sample::TrainingSample;

const REF_H: f64 = 64.0;
const REF_W: f64 = 48.0;

/// Garment texture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Stripes,
    Checker,
    Patch,
}

/// A garment's colours and print, independent of any image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyGarment {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub pattern: Pattern,
    /// Repeats of the print across the garment.
    pub repeats: usize,
}

fn hsv_to_signed_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m].map(|u| 2.0 * u - 1.0)
}

impl ToyGarment {
    pub fn random(rng: &mut impl Rng) -> Self {
        let hue = rng.gen::<f64>();
        let base = hsv_to_signed_rgb(hue, rng.gen_range(0.65..1.0), rng.gen_range(0.55..0.95));
        let accent = hsv_to_signed_rgb(hue + rng.gen_range(0.3..0.7), rng.gen_range(0.2..0.8), rng.gen_range(0.3..1.0));
        let pattern = [Pattern::Stripes, Pattern::Checker, Pattern::Patch][rng.gen_range(0..3)];
        ToyGarment { base, accent, pattern, repeats: rng.gen_range(3..6) }
    }

    /// Colour at garment coordinates `(u, v)` in `[0, 1]^2` (`v` runs downwards).
    pub fn color_at(&self, u: f64, v: f64) -> [f64; 3] {
        let n = self.repeats as f64;
        let accent = match self.pattern {
            Pattern::Stripes => ((v * n * 2.0).floor() as i64) % 2 == 1,
            Pattern::Checker => ((u * n).floor() as i64 + (v * n).floor() as i64) % 2 == 1,
            Pattern::Patch => (0.3..0.7).contains(&u) && (0.3..0.65).contains(&v),
        };
        if accent {
            self.accent
        } else {
            self.base
        }
    }

    /// Inside the neckline cut-out.
    pub fn in_neckline(u: f64, v: f64) -> bool {
        ((u - 0.5) / 0.2).powi(2) + (v / 0.12).powi(2) < 1.0
    }
}

/// Garment box in the product shot, reference rows/cols.
const PRODUCT_BOX: [f64; 4] = [10.0, 8.0, 54.0, 40.0];

/// Flat product shot of `garment` on white.
pub fn render_product(garment: &ToyGarment, geom: ImageGeometry) -> RgbImage {
    let [top, left, bottom, right] = PRODUCT_BOX;
    let (sy, sx) = (geom.height as f64 / REF_H, geom.width as f64 / REF_W);
    let mut data = Array3::from_elem((3, geom.height, geom.width), 1.0);
    for r in 0..geom.height {
        for c in 0..geom.width {
            let (y, x) = (r as f64 / sy, c as f64 / sx);
            let (u, v) = ((x - left) / (right - left), (y - top) / (bottom - top));
            if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) && !ToyGarment::in_neckline(u, v) {
                let col = garment.color_at(u, v);
                for ch in 0..3 {
                    data[[ch, r, c]] = col[ch];
                }
            }
        }
    }
    RgbImage::new(data).expect("palette colours are in range")
}

/// Pose and body proportions of a toy person, reference units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyBody {
    pub center: f64,
    pub shoulder_row: f64,
    pub hip_row: f64,
    pub half_width: f64,
    /// Shoulder, elbow, wrist, hand tip; index 0 is the image-left arm.
    pub arms: [[[f64; 2]; 4]; 2],
    pub knee_row: f64,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub bottom: [f64; 3],
    pub background: [f64; 3],
    pub hat: Option<[f64; 3]>,
}

const ARM_RADIUS: f64 = 2.0;
const LEG_HALF_WIDTH: f64 = 2.5;
const UPPER_ARM: f64 = 10.0;
const FOREARM: f64 = 8.0;
const HAND: f64 = 3.0;

impl ToyBody {
    pub fn random(rng: &mut impl Rng) -> Self {
        let center = REF_W / 2.0 + rng.gen_range(-3.0..3.0);
        let shoulder_row = 17.0 + rng.gen_range(-1.0..1.0);
        let hip_row = rng.gen_range(36.0..40.0);
        let half_width = rng.gen_range(7.0..9.5);
        let mut arms = [[[0.0; 2]; 4]; 2];
        for (side, arm) in arms.iter_mut().enumerate() {
            let out = if side == 0 { -1.0 } else { 1.0 };
            let shoulder = [shoulder_row + 1.0, center + out * (half_width + 1.5)];
            let a1 = rng.gen_range(5f64..35.0).to_radians();
            let a2 = rng.gen_range(-25f64..45.0).to_radians();
            let elbow = [shoulder[0] + UPPER_ARM * a1.cos(), shoulder[1] + out * UPPER_ARM * a1.sin()];
            let dir = [a2.cos(), out * a2.sin()];
            let wrist = [elbow[0] + FOREARM * dir[0], elbow[1] + FOREARM * dir[1]];
            let tip = [wrist[0] + HAND * dir[0], wrist[1] + HAND * dir[1]];
            *arm = [shoulder, elbow, wrist, tip];
        }
        let skins = [[0.75, 0.35, 0.1], [0.45, 0.05, -0.2], [0.1, -0.3, -0.5], [0.85, 0.6, 0.4]];
        let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.05..0.05);
        let mut inner = ChaCha8Rng::seed_from_u64(rng.gen());
        let skin = skins[inner.gen_range(0..skins.len())].map(|v: f64| (v + jitter(&mut inner)).clamp(-1.0, 1.0));
        let hair = [-0.8, -0.4, 0.2].map(|v: f64| (v + rng.gen_range(-0.2..0.2)).clamp(-1.0, 1.0));
        let bottom = hsv_to_signed_rgb(rng.gen(), rng.gen_range(0.2..0.6), rng.gen_range(0.15..0.45));
        let gray = rng.gen_range(-0.3..0.5);
        let background = [gray + rng.gen_range(-0.1..0.1), gray + rng.gen_range(-0.1..0.1), gray + rng.gen_range(-0.1..0.1)];
        let hat = (rng.gen::<f64>() < 0.3).then(|| hsv_to_signed_rgb(rng.gen(), 0.6, 0.7));
        ToyBody {
            center,
            shoulder_row,
            hip_row,
            half_width,
            arms,
            knee_row: hip_row + rng.gen_range(9.0..12.0),
            skin,
            hair,
            bottom,
            background,
            hat,
        }
    }

    fn leg_cols(&self) -> [f64; 2] {
        [self.center - self.half_width / 2.0, self.center + self.half_width / 2.0]
    }

    /// Keypoints in reference units, COCO order.
    fn keypoints(&self) -> [[f64; 2]; NUM_KEYPOINTS] {
        let c = self.center;
        let mut k = [[0.0; 2]; NUM_KEYPOINTS];
        k[coco::NOSE] = [10.0, c];
        k[coco::LEFT_EYE] = [8.0, c + 1.5];
        k[coco::RIGHT_EYE] = [8.0, c - 1.5];
        k[coco::LEFT_EAR] = [9.0, c + 4.0];
        k[coco::RIGHT_EAR] = [9.0, c - 4.0];
        // COCO "left" is the person's left, which is image-right for a front view.
        for (side, (sh, el, wr)) in [(1, (coco::LEFT_SHOULDER, coco::LEFT_ELBOW, coco::LEFT_WRIST)), (0, (coco::RIGHT_SHOULDER, coco::RIGHT_ELBOW, coco::RIGHT_WRIST))] {
            k[sh] = self.arms[side][0];
            k[el] = self.arms[side][1];
            k[wr] = self.arms[side][2];
        }
        let legs = self.leg_cols();
        k[coco::LEFT_HIP] = [self.hip_row - 1.0, legs[1]];
        k[coco::RIGHT_HIP] = [self.hip_row - 1.0, legs[0]];
        k[coco::LEFT_KNEE] = [self.knee_row + 1.0, legs[1]];
        k[coco::RIGHT_KNEE] = [self.knee_row + 1.0, legs[0]];
        k[coco::LEFT_ANKLE] = [58.0, legs[1]];
        k[coco::RIGHT_ANKLE] = [58.0, legs[0]];
        k
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 { (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((p[0] - a[0] - t * d[0]).powi(2) + (p[1] - a[1] - t * d[1]).powi(2)).sqrt()
}

/// Render `body` wearing `garment`. Deterministic given its inputs and `noise_seed`.
pub fn render_person(body: &ToyBody, garment: &ToyGarment, geom: ImageGeometry, noise_seed: u64) -> Result<TrainingSample> {
    let (sy, sx) = (geom.height as f64 / REF_H, geom.width as f64 / REF_W);
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut labels = Array2::from_elem((geom.height, geom.width), label::BACKGROUND);
    let mut img = Array3::zeros((3, geom.height, geom.width));
    let (top, bottom) = (body.shoulder_row, body.hip_row);
    let (left, right) = (body.center - body.half_width, body.center + body.half_width);
    let legs = body.leg_cols();
    for r in 0..geom.height {
        for c in 0..geom.width {
            let p = [r as f64 / sy, c as f64 / sx];
            let mut l = label::BACKGROUND;
            let mut col = body.background.map(|v| v + noise.gen_range(-0.08..0.08));
            let head = ((p[0] - 9.5) / 6.0).powi(2) + ((p[1] - body.center) / 4.8).powi(2);
            if head < 1.0 {
                l = label::FACE_HAIR;
                col = if p[0] < 6.0 { body.hair } else { body.skin };
                if let Some(h) = body.hat {
                    if p[0] < 5.5 {
                        l = label::HAT;
                        col = h;
                    }
                }
            }
            if (14.0..top + 0.5).contains(&p[0]) && (p[1] - body.center).abs() < 2.2 {
                l = label::TORSO;
                col = body.skin;
            }
            if (top..bottom).contains(&p[0]) && (left..right).contains(&p[1]) {
                let (u, v) = ((p[1] - left) / (right - left), (p[0] - top) / (bottom - top));
                if ToyGarment::in_neckline(u, v) {
                    l = label::TORSO;
                    col = body.skin;
                } else {
                    l = label::TOP_CLOTHES;
                    col = garment.color_at(u, v);
                }
            }
            if (bottom..body.knee_row).contains(&p[0]) && (left + 1.0..right - 1.0).contains(&p[1]) {
                l = label::BOTTOM_CLOTHES;
                col = body.bottom;
            }
            if p[0] >= body.knee_row && p[0] < 60.0 && legs.iter().any(|&x| (p[1] - x).abs() < LEG_HALF_WIDTH) {
                l = label::LEGS;
                col = body.skin;
            }
            if (60.0..63.0).contains(&p[0]) && legs.iter().any(|&x| (p[1] - x).abs() < LEG_HALF_WIDTH + 0.8) {
                l = label::SHOES;
                col = [-0.7, -0.7, -0.65];
            }
            for (side, arm) in body.arms.iter().enumerate() {
                let d = (0..3).map(|i| segment_distance(p, arm[i], arm[i + 1])).fold(f64::INFINITY, f64::min);
                if d < ARM_RADIUS {
                    l = if side == 1 { label::LEFT_ARM } else { label::RIGHT_ARM };
                    col = body.skin;
                }
            }
            labels[[r, c]] = l;
            for ch in 0..3 {
                img[[ch, r, c]] = col[ch];
            }
        }
    }
    let kps = body
        .keypoints()
        .iter()
        .map(|k| Keypoint::new((k[0] * sy).clamp(0.0, (geom.height - 1) as f64), (k[1] * sx).clamp(0.0, (geom.width - 1) as f64)))
        .collect();
    TrainingSample::new(
        RgbImage::from_clamped(img)?,
        render_product(garment, geom),
        ParseLabelMap::new(labels)?,
        KeypointSet::new(kps)?,
    )
}

/// Person, garment and background drawn from `seed`.
pub fn generate_toy_scene(seed: u64, geom: ImageGeometry) -> Result<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70e_5ce4e);
    let garment = ToyGarment::random(&mut rng);
    let body = ToyBody::random(&mut rng);
    render_person(&body, &garment, geom, rng.gen())
}

/// The garment of scene `seed`.
pub fn toy_garment(seed: u64) -> ToyGarment {
    ToyGarment::random(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x70e_5ce4e))
}

/// Scene `person_seed` re-dressed in the garment of scene `garment_seed`.
pub fn redress(person_seed: u64, garment_seed: u64, geom: ImageGeometry) -> Result<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(person_seed ^ 0x70e_5ce4e);
    let _ = ToyGarment::random(&mut rng);
    let body = ToyBody::random(&mut rng);
    render_person(&body, &toy_garment(garment_seed), geom, rng.gen())
}

/// 90/10 split by a hash of the seed: `true` for validation scenes.
pub fn is_validation(seed: u64) -> bool {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    z.is_multiple_of(10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::onehot_encode;

    fn g() -> ImageGeometry {
        ImageGeometry::new(64, 48).unwrap()
    }

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(generate_toy_scene(5, g()).unwrap(), generate_toy_scene(5, g()).unwrap());
        assert_ne!(generate_toy_scene(5, g()).unwrap(), generate_toy_scene(6, g()).unwrap());
    }

    #[test]
    fn arm_keypoints_lie_on_arm_pixels() {
        for seed in 0..100 {
            for geom in [g(), ImageGeometry::new(256, 192).unwrap()] {
                let s = generate_toy_scene(seed, geom).unwrap();
                for (k, arm) in [
                    (coco::LEFT_ELBOW, label::LEFT_ARM),
                    (coco::LEFT_WRIST, label::LEFT_ARM),
                    (coco::RIGHT_ELBOW, label::RIGHT_ARM),
                    (coco::RIGHT_WRIST, label::RIGHT_ARM),
                ] {
                    let kp = s.keypoints.get(k);
                    let l = s.parse.get(kp.row.round() as usize, kp.col.round() as usize);
                    assert_eq!(l, arm, "seed {seed} keypoint {k} at {kp:?} on {geom:?}");
                }
            }
        }
    }

    #[test]
    fn label_maps_are_valid_one_hot() {
        for seed in 0..20 {
            let s = generate_toy_scene(seed, g()).unwrap();
            let seg = onehot_encode(&s.parse);
            assert_eq!(seg.max_channel_sum_error(), 0.0);
            assert!(s.parse.labels().iter().any(|&l| l == label::TOP_CLOTHES));
            for ((r, c), &l) in s.parse.labels().indexed_iter() {
                if l != label::TOP_CLOTHES {
                    assert!((0..3).all(|ch| s.worn_cloth.data()[[ch, r, c]] == 0.0));
                }
            }
        }
    }

    #[test]
    fn redress_keeps_the_body() {
        let a = redress(3, 3, g()).unwrap();
        assert_eq!(a, generate_toy_scene(3, g()).unwrap());
        let b = redress(3, 8, g()).unwrap();
        assert_eq!(a.parse, b.parse);
        assert_ne!(a.person, b.person);
        assert_eq!(b.cloth, render_product(&toy_garment(8), g()));
    }

    #[test]
    fn split_is_roughly_ninety_ten() {
        let val = (0..10_000u64).filter(|&s| is_validation(s)).count();
        assert!((800..1200).contains(&val), "{val}");
    }
}
