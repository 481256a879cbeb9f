//! Clothing-agnostic masking of the segmentation map and the person image.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{coco, label, ImageGeometry, KeypointSet, RgbImage, SegMap, NUM_LABELS};
use crate::error::{Result, TryonError};

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r <= self.bottom && c >= self.left && c <= self.right
    }

    pub fn full(geom: ImageGeometry) -> Self {
        Rect { top: 0, left: 0, bottom: geom.height - 1, right: geom.width - 1 }
    }
}

/// Square with one pair of sides parallel to `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedSquare {
    pub center: (f64, f64),
    pub axis: (f64, f64),
    pub side: f64,
}

impl OrientedSquare {
    /// Closed containment test for a point given as `(row, col)`.
    pub fn contains(&self, row: f64, col: f64) -> bool {
        let (dr, dc) = (row - self.center.0, col - self.center.1);
        let along = dr * self.axis.0 + dc * self.axis.1;
        let across = -dr * self.axis.1 + dc * self.axis.0;
        let half = self.side / 2.0 + 1e-9;
        along.abs() <= half && across.abs() <= half
    }

    /// Corners in order: near-left, near-right, far-right, far-left
    /// (near = closer to the elbow).
    pub fn corners(&self) -> [(f64, f64); 4] {
        let h = self.side / 2.0;
        let (ar, ac) = self.axis;
        let (nr, nc) = (-ac, ar);
        let at = |s: f64, t: f64| (self.center.0 + s * ar + t * nr, self.center.1 + s * ac + t * nc);
        [at(-h, -h), at(-h, h), at(h, h), at(h, -h)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRegion {
    pub rect: Rect,
    pub hand_squares: Vec<OrientedSquare>,
    /// `true` where the pixel is masked.
    pub region_mask: Array2<bool>,
}

impl MaskRegion {
    /// A region that masks nothing.
    pub fn empty(geom: ImageGeometry) -> Self {
        MaskRegion {
            rect: Rect::full(geom),
            hand_squares: Vec::new(),
            region_mask: Array2::from_elem((geom.height, geom.width), false),
        }
    }

    pub fn masked_count(&self) -> usize {
        self.region_mask.iter().filter(|&&m| m).count()
    }

    pub fn is_masked(&self, r: usize, c: usize) -> bool {
        self.region_mask[[r, c]]
    }

    /// The mask as `0.0 / 1.0` values.
    pub fn as_f64(&self) -> Array2<f64> {
        self.region_mask.mapv(|m| if m { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSegMap {
    pub geometry: ImageGeometry,
    pub data: Array3<f64>,
    pub region: MaskRegion,
}

/// Padding around the target rectangle: 8 px at 256-pixel height.
pub fn default_pad(geom: ImageGeometry) -> usize {
    (8.0 * geom.height as f64 / 256.0).round() as usize
}

/// Smallest rectangle around torso, arm and top-clothes pixels, grown by `pad`.
pub fn target_bounding_rect(seg: &SegMap, pad: usize) -> Result<Rect> {
    let g = seg.geometry();
    let mut bounds: Option<Rect> = None;
    for r in 0..g.height {
        for c in 0..g.width {
            if !label::is_target(seg.label_at(r, c)) {
                continue;
            }
            let b = bounds.get_or_insert(Rect { top: r, left: c, bottom: r, right: c });
            b.top = b.top.min(r);
            b.bottom = b.bottom.max(r);
            b.left = b.left.min(c);
            b.right = b.right.max(c);
        }
    }
    let b = bounds.ok_or(TryonError::EmptyTargetRegion)?;
    Ok(Rect {
        top: b.top.saturating_sub(pad),
        left: b.left.saturating_sub(pad),
        bottom: (b.bottom + pad).min(g.height - 1),
        right: (b.right + pad).min(g.width - 1),
    })
}

/// One square per arm whose elbow and wrist are both visible and distinct.
/// The square starts at the wrist and extends one forearm length past it.
pub fn hand_retention_squares(kp: &KeypointSet) -> Vec<OrientedSquare> {
    [(coco::LEFT_ELBOW, coco::LEFT_WRIST), (coco::RIGHT_ELBOW, coco::RIGHT_WRIST)]
        .iter()
        .filter_map(|&(e, w)| {
            let (elbow, wrist) = (kp.get(e), kp.get(w));
            if !(elbow.visible && wrist.visible) {
                return None;
            }
            let (dr, dc) = (wrist.row - elbow.row, wrist.col - elbow.col);
            let len = (dr * dr + dc * dc).sqrt();
            if len < 1e-9 {
                return None;
            }
            let axis = (dr / len, dc / len);
            Some(OrientedSquare {
                center: (wrist.row + axis.0 * len / 2.0, wrist.col + axis.1 * len / 2.0),
                axis,
                side: len,
            })
        })
        .collect()
}

/// Build the masked segmentation: inside the target rectangle, zero the
/// torso, arm, top-clothes and background channels, except for arm pixels
/// covered by a hand square.
pub fn mask_segmentation(seg: &SegMap, kp: &KeypointSet, pad: usize) -> Result<MaskedSegMap> {
    let g = seg.geometry();
    let rect = target_bounding_rect(seg, pad)?;
    let hand_squares = hand_retention_squares(kp);
    let region_mask = Array2::from_shape_fn((g.height, g.width), |(r, c)| {
        if !rect.contains(r, c) {
            return false;
        }
        let retained = label::is_arm(seg.label_at(r, c))
            && hand_squares.iter().any(|s| s.contains(r as f64, c as f64));
        !retained
    });
    let mut data = seg.data().clone();
    for ((r, c), &m) in region_mask.indexed_iter() {
        if m {
            for &k in &label::MASKABLE {
                data[[k as usize, r, c]] = 0.0;
            }
        }
    }
    debug_assert_eq!(data.shape()[0], NUM_LABELS);
    Ok(MaskedSegMap { geometry: g, data, region: MaskRegion { rect, hand_squares, region_mask } })
}

/// Zero the person image on masked torso, arm and top-clothes pixels.
pub fn mask_person_image(img: &RgbImage, seg: &SegMap, region: &MaskRegion) -> Result<RgbImage> {
    let g = img.geometry();
    if seg.geometry() != g || region.region_mask.dim() != (g.height, g.width) {
        return Err(TryonError::ShapeMismatch(format!(
            "image {:?}, seg {:?}, region {:?}",
            g,
            seg.geometry(),
            region.region_mask.dim()
        )));
    }
    let mut data = img.data().clone();
    for ((r, c), &m) in region.region_mask.indexed_iter() {
        if m && label::is_target(seg.label_at(r, c)) {
            for ch in 0..3 {
                data[[ch, r, c]] = 0.0;
            }
        }
    }
    RgbImage::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{onehot_encode, Keypoint, ParseLabelMap};
    use proptest::prelude::*;

    fn seg_from(f: impl Fn(usize, usize) -> u8, h: usize, w: usize) -> SegMap {
        onehot_encode(&ParseLabelMap::new(Array2::from_shape_fn((h, w), |(r, c)| f(r, c))).unwrap())
    }

    fn arm_kp(elbow: (f64, f64), wrist: (f64, f64)) -> KeypointSet {
        let mut k = KeypointSet::all_hidden();
        k.set(coco::LEFT_ELBOW, Keypoint::new(elbow.0, elbow.1));
        k.set(coco::LEFT_WRIST, Keypoint::new(wrist.0, wrist.1));
        k
    }

    #[test]
    fn rect_single_pixel_and_full_frame() {
        let seg = seg_from(|r, c| if (r, c) == (10, 20) { 2 } else { 9 }, 64, 48);
        assert_eq!(target_bounding_rect(&seg, 0).unwrap(), Rect { top: 10, left: 20, bottom: 10, right: 20 });
        let seg = seg_from(|r, c| if (r, c) == (0, 0) || (r, c) == (63, 47) { 2 } else { 9 }, 64, 48);
        assert_eq!(target_bounding_rect(&seg, 0).unwrap(), Rect { top: 0, left: 0, bottom: 63, right: 47 });
        let seg = seg_from(|_, _| 1, 64, 48);
        assert_eq!(target_bounding_rect(&seg, 0).unwrap_err(), TryonError::EmptyTargetRegion);
        assert_eq!(default_pad(ImageGeometry::new(64, 48).unwrap()), 2);
    }

    #[test]
    fn horizontal_forearm_square() {
        let sq = hand_retention_squares(&arm_kp((0.0, 0.0), (0.0, 10.0)));
        assert_eq!(sq.len(), 1);
        let s = sq[0];
        // rows [-5, 5] x cols [10, 20]
        for r in -6..=6 {
            for c in 8..=22 {
                let inside = (-5..=5).contains(&r) && (10..=20).contains(&c);
                assert_eq!(s.contains(r as f64, c as f64), inside, "({r},{c})");
            }
        }
    }

    #[test]
    fn diagonal_forearm_corners() {
        let s = hand_retention_squares(&arm_kp((0.0, 0.0), (10.0, 10.0)))[0];
        // side = forearm length 10*sqrt(2); half-side offset along the normal is (5, -5)
        let len = 10.0 * 2f64.sqrt();
        let axis = (1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt());
        let near = [(15.0, 5.0), (5.0, 15.0)];
        let mut expected: Vec<(f64, f64)> = near.to_vec();
        expected.extend(near.iter().map(|&(r, c)| (r + len * axis.0, c + len * axis.1)));
        for e in expected {
            assert!(
                s.corners().iter().any(|p| (p.0 - e.0).abs() < 1e-9 && (p.1 - e.1).abs() < 1e-9),
                "missing corner {e:?} in {:?}",
                s.corners()
            );
        }
    }

    #[test]
    fn no_squares_without_visible_wrists_or_forearm_length() {
        let mut k = arm_kp((5.0, 5.0), (9.0, 9.0));
        k.set(coco::LEFT_WRIST, Keypoint::hidden());
        assert!(hand_retention_squares(&k).is_empty());
        assert!(hand_retention_squares(&arm_kp((5.0, 5.0), (5.0, 5.0))).is_empty());
    }

    #[test]
    fn retained_arm_pixel_keeps_all_channels() {
        let seg = seg_from(
            |r, c| match (r, c) {
                (20..=40, 10..=30) => 2,
                (30, 34) => 3,
                _ => 9,
            },
            64,
            48,
        );
        let kp = arm_kp((30.0, 28.0), (30.0, 32.0));
        let m = mask_segmentation(&seg, &kp, 4).unwrap();
        assert!(m.region.rect.contains(30, 34));
        assert!(!m.region.is_masked(30, 34));
        for k in 0..NUM_LABELS {
            assert_eq!(m.data[[k, 30, 34]], seg.data()[[k, 30, 34]]);
        }
        // a torso pixel inside the same square is still masked
        assert!(m.region.is_masked(30, 30));
    }

    #[test]
    fn mask_person_image_cases() {
        let geom = ImageGeometry::new(16, 16).unwrap();
        let img = RgbImage::filled(geom, [0.5, -0.25, 1.0]);
        let bg = seg_from(|_, _| 9, 16, 16);
        let full = MaskRegion {
            rect: Rect::full(geom),
            hand_squares: vec![],
            region_mask: Array2::from_elem((16, 16), true),
        };
        assert_eq!(mask_person_image(&img, &bg, &full).unwrap(), img);
        let top = seg_from(|_, _| 5, 16, 16);
        assert!(mask_person_image(&img, &top, &full).unwrap().data().iter().all(|&v| v == 0.0));
        let small = seg_from(|_, _| 5, 8, 8);
        assert!(matches!(mask_person_image(&img, &small, &full), Err(TryonError::ShapeMismatch(_))));
    }

    fn rotate(p: (f64, f64), a: f64) -> (f64, f64) {
        (p.0 * a.cos() - p.1 * a.sin(), p.0 * a.sin() + p.1 * a.cos())
    }

    proptest! {
        #[test]
        fn squares_rotate_with_keypoints(
            er in -20.0..20.0f64, ec in -20.0..20.0f64,
            wr in -20.0..20.0f64, wc in -20.0..20.0f64,
            angle in 0.0..std::f64::consts::TAU,
        ) {
            prop_assume!(((wr - er).powi(2) + (wc - ec).powi(2)).sqrt() > 0.5);
            let a = hand_retention_squares(&arm_kp((er, ec), (wr, wc)))[0];
            let b = hand_retention_squares(&arm_kp(rotate((er, ec), angle), rotate((wr, wc), angle)))[0];
            for (ca, cb) in a.corners().iter().zip(b.corners().iter()) {
                let ra = rotate(*ca, angle);
                prop_assert!((ra.0 - cb.0).abs() < 1e-6 && (ra.1 - cb.1).abs() < 1e-6);
            }
        }

        #[test]
        fn masking_preserves_identity_channels_and_outside(
            labels in proptest::collection::vec(0u8..10, 16 * 12),
            er in 0.0..15.0f64, ec in 0.0..11.0f64, wr in 0.0..15.0f64, wc in 0.0..11.0f64,
        ) {
            let parse = ParseLabelMap::new(Array2::from_shape_vec((16, 12), labels).unwrap()).unwrap();
            let seg = onehot_encode(&parse);
            let Ok(m) = mask_segmentation(&seg, &arm_kp((er, ec), (wr, wc)), 2) else {
                prop_assert!(parse.labels().iter().all(|&l| !label::is_target(l)));
                return Ok(());
            };
            for r in 0..16 {
                for c in 0..12 {
                    for k in 0..NUM_LABELS {
                        let keep = label::IDENTITY.contains(&(k as u8)) || !m.region.rect.contains(r, c);
                        if keep {
                            prop_assert_eq!(m.data[[k, r, c]], seg.data()[[k, r, c]]);
                        }
                    }
                    let l = parse.get(r, c);
                    if label::is_arm(l) && m.region.hand_squares.iter().any(|s| s.contains(r as f64, c as f64)) {
                        prop_assert!(!m.region.is_masked(r, c));
                    }
                    if m.region.is_masked(r, c) {
                        for &k in &label::MASKABLE {
                            prop_assert_eq!(m.data[[k as usize, r, c]], 0.0);
                        }
                    }
                }
            }
        }
    }
}
