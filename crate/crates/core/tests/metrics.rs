use ndarray::{s, Array2, Axis, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tryon_core::backbone::RandomConvBackbone;
use tryon_core::data::{stack_chw, ImageGeometry};
use tryon_core::metrics::*;
use tryon_core::toy::generate_toy_scene;
use tryon_tensor::Array;

/// Two-pass mean and unbiased covariance with plain loops.
fn loop_stats(x: &Array2<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, k) = x.dim();
    let mean: Vec<f64> = (0..k).map(|j| (0..n).map(|i| x[[i, j]]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in 0..k {
            cov[a][b] = (0..n).map(|i| (x[[i, a]] - mean[a]) * (x[[i, b]] - mean[b])).sum::<f64>() / (n - 1) as f64;
        }
    }
    (mean, cov)
}

fn random_stats(k: usize, n: usize, rng: &mut impl Rng) -> GaussianStats {
    let scale: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..3.0)).collect();
    let x = Array2::from_shape_fn((n, k), |(_, j)| rng.gen_range(-1.0..1.0) * scale[j] + j as f64 * 0.1);
    gaussian_stats(&x).unwrap()
}

/// `Tr sqrt(M)` for a 2x2 matrix with non-negative real eigenvalues.
fn trace_sqrt_2x2(m: [[f64; 2]; 2]) -> f64 {
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    (tr + 2.0 * det.max(0.0).sqrt()).max(0.0).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stats_match_loop_oracle(seed in 0u64..10_000, n in 2usize..30, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, k), || rng.gen_range(-5.0..5.0));
        let s = gaussian_stats(&x).unwrap();
        let (mean, cov) = loop_stats(&x);
        #[allow(clippy::needless_range_loop)]
        for j in 0..k {
            prop_assert!((s.mean[j] - mean[j]).abs() <= 1e-8);
            for l in 0..k {
                prop_assert!((s.covariance[[j, l]] - cov[j][l]).abs() <= 1e-8);
                prop_assert_eq!(s.covariance[[j, l]], s.covariance[[l, j]]);
            }
        }
    }

    #[test]
    fn distance_is_symmetric_and_non_negative(seed in 0u64..10_000, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_stats(k, 3 * k + 2, &mut rng);
        let b = random_stats(k, 2 * k + 5, &mut rng);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab), "{} vs {}", ab, ba);
        prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn two_dim_distance_matches_closed_form(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_stats(2, 9, &mut rng);
        let b = random_stats(2, 7, &mut rng);
        let (ca, cb) = (&a.covariance, &b.covariance);
        let m = ca.dot(cb);
        let cross = trace_sqrt_2x2([[m[[0, 0]], m[[0, 1]]], [m[[1, 0]], m[[1, 1]]]]);
        let diff: f64 = (&a.mean - &b.mean).mapv(|v| v * v).sum();
        let expect = diff + ca.diag().sum() + cb.diag().sum() - 2.0 * cross;
        prop_assert!((frechet_distance(&a, &b).unwrap() - expect.max(0.0)).abs() <= 1e-8);
    }

    #[test]
    fn score_lies_between_one_and_class_count(seed in 0u64..10_000, c in 2usize..12, splits in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = splits * rng.gen_range(1..10);
        let probs = Array2::from_shape_fn((n, c), |_| rng.gen_range(0.0..1.0f64).powi(4));
        let probs = &probs / &probs.sum_axis(Axis(1)).insert_axis(Axis(1));
        let s = inception_score_from_probs(&probs, splits).unwrap();
        prop_assert!(s.mean >= 1.0 - 1e-9 && s.mean <= c as f64 + 1e-9, "{}", s.mean);
        prop_assert!(s.std >= 0.0);
    }
}

fn toy_images(seeds: std::ops::Range<u64>) -> Array {
    let g = ImageGeometry::new(64, 48).unwrap();
    let people: Vec<_> = seeds.map(|s| generate_toy_scene(s, g).unwrap().person.into_data()).collect();
    stack_chw(&people)
}

#[test]
fn same_set_and_permutations() {
    let backbone = RandomConvBackbone::standard();
    let real = toy_images(0..40);
    let fake = toy_images(100..140);
    assert!(fid(&real, &real, &backbone).unwrap() <= 1e-4);
    let before = fid(&real, &fake, &backbone).unwrap();
    let order: Vec<usize> = (0..40).rev().collect();
    let after = fid(&real.select(Axis(0), &order), &fake.select(Axis(0), &order), &backbone).unwrap();
    assert!((before - after).abs() <= 1e-6 * before.max(1.0), "{before} vs {after}");
}

#[test]
fn noise_is_farther_than_held_out_scenes() {
    let backbone = RandomConvBackbone::standard();
    let real = toy_images(0..80);
    let held_out = toy_images(1000..1080);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Array::from_shape_simple_fn(IxDyn(&[80, 3, 64, 48]), || rng.gen_range(-1.0..1.0));
    let near = fid(&real, &held_out, &backbone).unwrap();
    let far = fid(&real, &noise, &backbone).unwrap();
    assert!(far > near, "noise {far} vs held-out {near}");
}

#[test]
fn score_on_images_uses_the_classifier() {
    let backbone = RandomConvBackbone::new(16, 4, 2);
    let images = toy_images(0..20);
    let s = inception_score(&images, &backbone, 2).unwrap();
    assert!((1.0..=4.0).contains(&s.mean));
    let empty = images.slice(s![0..0, .., .., ..]).to_owned().into_dyn();
    assert!(inception_score(&empty, &backbone, 1).is_err());
    assert!(fid(&images, &empty, &backbone).is_err());
}
