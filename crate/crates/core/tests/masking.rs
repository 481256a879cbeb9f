use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tryon_core::data::{coco, label, onehot_encode, ImageGeometry, Keypoint, KeypointSet, ParseLabelMap};
use tryon_core::masking::*;
use tryon_core::toy::generate_toy_scene;

const KEPT: [usize; 5] = [0, 1, 6, 7, 8];
const CLEARED: [usize; 5] = [2, 3, 4, 5, 9];

#[test]
fn two_hundred_toy_scenes() {
    let g = ImageGeometry::new(64, 48).unwrap();
    let mut retained = 0;
    for seed in 0..200 {
        let s = generate_toy_scene(seed, g).unwrap();
        let seg = onehot_encode(&s.parse);
        let m = mask_segmentation(&seg, &s.keypoints, default_pad(g)).unwrap();
        let src = seg.data();
        for r in 0..g.height {
            for c in 0..g.width {
                for &ch in &KEPT {
                    assert_eq!(m.data[[ch, r, c]].to_bits(), src[[ch, r, c]].to_bits(), "seed {seed} ({r},{c}) ch {ch}");
                }
                if !m.region.rect.contains(r, c) {
                    assert!((0..10).all(|ch| m.data[[ch, r, c]] == src[[ch, r, c]]));
                    assert!(!m.region.is_masked(r, c));
                }
                let l = s.parse.get(r, c);
                if label::is_arm(l) && m.region.hand_squares.iter().any(|q| q.contains(r as f64, c as f64)) {
                    retained += 1;
                    assert!((0..10).all(|ch| m.data[[ch, r, c]] == src[[ch, r, c]]), "seed {seed} hand pixel ({r},{c})");
                }
                if m.region.is_masked(r, c) {
                    assert!(CLEARED.iter().all(|&ch| m.data[[ch, r, c]] == 0.0));
                }
            }
        }
    }
    assert!(retained > 0, "the toy scenes should exercise hand retention");
}

#[test]
fn masked_image_changes_only_masked_target_pixels() {
    let g = ImageGeometry::new(64, 48).unwrap();
    for seed in 0..20 {
        let s = generate_toy_scene(seed, g).unwrap();
        let seg = onehot_encode(&s.parse);
        let m = mask_segmentation(&seg, &s.keypoints, default_pad(g)).unwrap();
        let out = mask_person_image(&s.person, &seg, &m.region).unwrap();
        for r in 0..g.height {
            for c in 0..g.width {
                let cleared = label::is_target(s.parse.get(r, c)) && m.region.is_masked(r, c);
                let expect = if cleared { [0.0; 3] } else { s.person.pixel(r, c) };
                assert_eq!(out.pixel(r, c), expect);
            }
        }
    }
}

fn brute_rect(labels: &Array2<u8>, pad: usize) -> Option<Rect> {
    let (h, w) = labels.dim();
    let pts: Vec<(usize, usize)> = labels.indexed_iter().filter(|(_, &l)| label::is_target(l)).map(|(p, _)| p).collect();
    if pts.is_empty() {
        return None;
    }
    let top = pts.iter().map(|p| p.0).min().unwrap();
    let bottom = pts.iter().map(|p| p.0).max().unwrap();
    let left = pts.iter().map(|p| p.1).min().unwrap();
    let right = pts.iter().map(|p| p.1).max().unwrap();
    Some(Rect { top: top.saturating_sub(pad), left: left.saturating_sub(pad), bottom: (bottom + pad).min(h - 1), right: (right + pad).min(w - 1) })
}

fn rotate(p: (f64, f64), angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * p.0 - s * p.1, s * p.0 + c * p.1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rect_matches_coordinate_scan(seed in 0u64..100_000, density in 0.0f64..0.2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = Array2::from_shape_simple_fn((20, 16), || if rng.gen::<f64>() < density { rng.gen_range(2..6) } else { [0, 1, 6, 7, 8, 9][rng.gen_range(0..6)] });
        let seg = onehot_encode(&ParseLabelMap::new(labels.clone()).unwrap());
        match (target_bounding_rect(&seg, 2), brute_rect(&labels, 2)) {
            (Ok(r), Some(b)) => prop_assert_eq!(r, b),
            (Err(_), None) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }

    #[test]
    fn squares_rotate_with_the_keypoints(
        er in -20.0f64..20.0, ec in -20.0f64..20.0, dr in -15.0f64..15.0, dc in -15.0f64..15.0, angle in -3.2f64..3.2,
    ) {
        prop_assume!(dr.hypot(dc) > 0.5);
        let build = |elbow: (f64, f64), wrist: (f64, f64)| {
            let mut kp = KeypointSet::all_hidden();
            kp.set(coco::LEFT_ELBOW, Keypoint::new(elbow.0, elbow.1));
            kp.set(coco::LEFT_WRIST, Keypoint::new(wrist.0, wrist.1));
            hand_retention_squares(&kp)
        };
        let (elbow, wrist) = ((er, ec), (er + dr, ec + dc));
        let base = build(elbow, wrist);
        let turned = build(rotate(elbow, angle), rotate(wrist, angle));
        prop_assert_eq!(base.len(), 1);
        prop_assert_eq!(turned.len(), 1);
        for (a, b) in base[0].corners().iter().zip(turned[0].corners().iter()) {
            let ra = rotate(*a, angle);
            prop_assert!((ra.0 - b.0).abs() < 1e-6 && (ra.1 - b.1).abs() < 1e-6);
        }
    }
}
