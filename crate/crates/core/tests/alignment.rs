use ndarray::{s, Array2, Array3, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tryon_core::alignment::*;
use tryon_core::data::{label, stack_chw, ImageGeometry, ParseLabelMap, PersonRepresentation, RgbImage};
use tryon_tensor::{numeric_grad, relative_error, Adam, AdamConfig, Array, Precision, Tape};

fn geom(h: usize, w: usize) -> ImageGeometry {
    ImageGeometry::new(h, w).unwrap()
}

/// Bilinear lookup at normalised `(x, y)` with border clamping.
fn sample(img: &Array3<f64>, ch: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let col = ((x + 1.0) * 0.5 * (w - 1) as f64).clamp(0.0, (w - 1) as f64);
    let row = ((y + 1.0) * 0.5 * (h - 1) as f64).clamp(0.0, (h - 1) as f64);
    let (r0, c0) = (row.floor() as usize, col.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fr, fc) = (row - r0 as f64, col - c0 as f64);
    let top = img[[ch, r0, c0]] * (1.0 - fc) + img[[ch, r0, c1]] * fc;
    let bottom = img[[ch, r1, c0]] * (1.0 - fc) + img[[ch, r1, c1]] * fc;
    top * (1.0 - fr) + bottom * fr
}

fn random_image(g: ImageGeometry, rng: &mut impl Rng) -> RgbImage {
    RgbImage::new(Array3::from_shape_simple_fn((3, g.height, g.width), || rng.gen_range(-1.0..1.0))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn affine_targets_give_affine_warps(
        a in -0.3f64..0.3, b in -0.3f64..0.3, c in -0.3f64..0.3, d in -0.3f64..0.3,
        tx in -0.4f64..0.4, ty in -0.4f64..0.4, seed in 0u64..1000,
    ) {
        let g = geom(12, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(g, &mut rng);
        let m = [[1.0 + a, b], [c, 1.0 + d]];
        let offsets: Vec<f64> = regular_grid(5)
            .iter()
            .flat_map(|p| [m[0][0] * p[0] + m[0][1] * p[1] + tx, m[1][0] * p[0] + m[1][1] * p[1] + ty])
            .collect();
        let out = tps_warp(&img, &TpsParams::new(5, offsets).unwrap()).unwrap();
        for ch in 0..3 {
            for r in 0..g.height {
                for col in 0..g.width {
                    let p = pixel_to_normalized(g, r as f64, col as f64);
                    let q = [m[0][0] * p[0] + m[0][1] * p[1] + tx, m[1][0] * p[0] + m[1][1] * p[1] + ty];
                    let expect = sample(img.data(), ch, q[0], q[1]);
                    prop_assert!((out.data()[[ch, r, col]] - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn control_nodes_are_interpolated(dst in proptest::collection::vec(-3.0f64..3.0, 18)) {
        let src = regular_grid(3);
        let dst: Vec<[f64; 2]> = dst.chunks(2).map(|p| [p[0], p[1]]).collect();
        let coeffs = solve_tps_kernel(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let f = coeffs.eval(*s);
            prop_assert!((f[0] - d[0]).abs() < 1e-6 && (f[1] - d[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_stays_within_input_range(jitter in proptest::collection::vec(-0.25f64..0.25, 50), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (rng.gen_range(-1.0..0.0), rng.gen_range(0.0..1.0));
        let board = Array3::from_shape_fn((3, 16, 16), |(_, r, c)| if (r / 2 + c / 2) % 2 == 0 { lo } else { hi });
        let img = RgbImage::new(board).unwrap();
        let mut theta = TpsParams::identity(5);
        theta.offsets.iter_mut().zip(&jitter).for_each(|(o, j)| *o += j);
        let out = tps_warp(&img, &theta).unwrap();
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }
}

#[test]
fn tps_loss_gradient_matches_finite_differences() {
    let g = geom(12, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let basis = TpsBasis::new(5, g).unwrap();
    let cloth = stack_chw([random_image(g, &mut rng).data()]);
    let worn = stack_chw([random_image(g, &mut rng).data()]);
    let support = Array::from_shape_fn(IxDyn(&[1, 1, 12, 10]), |i| if (3..9).contains(&i[2]) && (2..8).contains(&i[3]) { 1.0 } else { 0.0 });
    let mut theta = TpsParams::identity(5).offsets;
    theta.iter_mut().for_each(|t| *t += rng.gen_range(-0.1..0.1));
    let theta = Array::from_shape_vec(IxDyn(&[1, 50]), theta).unwrap();

    let loss = |th: &Array| {
        let tape = Tape::with_precision(Precision::F64);
        let warped = basis.warp(tape.constant(cloth.clone()), tape.constant(th.clone()));
        tps_loss(warped, tape.constant(worn.clone()), &support).item()
    };
    let tape = Tape::with_precision(Precision::F64);
    let th = tape.var(theta.clone());
    let warped = basis.warp(tape.constant(cloth.clone()), th);
    let l = tps_loss(warped, tape.constant(worn.clone()), &support);
    let analytic = tape.grad(l, &[th], false)[0].unwrap().value();
    let numeric = numeric_grad(&theta, 1e-6, loss);
    let err = relative_error(&analytic, &numeric);
    assert!(err <= 1e-3, "relative error {err}");
}

/// A smoothly shaded garment and the same garment shifted and squeezed onto a torso.
fn toy_pair(g: ImageGeometry) -> (RgbImage, RgbImage, ParseLabelMap) {
    let cloth = Array3::from_shape_fn((3, g.height, g.width), |(ch, r, c)| {
        let inside = (8..56).contains(&r) && (8..40).contains(&c);
        if !inside {
            return 1.0;
        }
        let (y, x) = ((r as f64 - 32.0) / 24.0, (c as f64 - 24.0) / 16.0);
        [0.8 * y, 0.8 * x, -0.5 + 0.3 * (x * y)][ch]
    });
    let cloth = RgbImage::new(cloth).unwrap();
    let theta = {
        let mut t = TpsParams::identity(5);
        for p in t.offsets.chunks_mut(2) {
            p[0] = p[0] * 1.3 - 0.05;
            p[1] = p[1] * 1.15 + 0.1;
        }
        t
    };
    let moved = tps_warp(&cloth, &theta).unwrap();
    let mut labels = Array2::from_elem((g.height, g.width), label::BACKGROUND);
    labels.slice_mut(s![14..50, 12..36]).fill(label::TOP_CLOTHES);
    let parse = ParseLabelMap::new(labels).unwrap();
    (cloth, tryon_core::sample::worn_cloth(&moved, &parse), parse)
}

#[test]
fn overfitting_one_pair_halves_the_warp_error() {
    let g = geom(64, 48);
    let (cloth, worn, parse) = toy_pair(g);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rep = PersonRepresentation::new(Array3::from_shape_simple_fn((18, 64, 48), || rng.gen::<f64>())).unwrap();
    let mut net = AlignmentNet::new(AlignmentConfig::default(), g, 11).unwrap();
    let mut opt = Adam::new(AdamConfig { lr: 2e-4, ..Default::default() }, &net.store);

    let support = stack_chw([&worn_support(&parse)]);
    let (rep_b, cloth_b, worn_b) = (stack_chw([rep.data()]), stack_chw([cloth.data()]), stack_chw([worn.data()]));
    let initial = tps_loss_images(&warp_with(net.basis(), &cloth, &regress_theta(&net, &rep, &cloth).unwrap()).unwrap(), &worn, &parse).unwrap();
    for _ in 0..150 {
        let tape = Tape::with_precision(Precision::F32);
        let p = net.store.bind(&tape, true);
        let (_, warped) = net.forward_warp(&p, tape.constant(rep_b.clone()), tape.constant(cloth_b.clone()));
        let loss = tps_loss(warped, tape.constant(worn_b.clone()), &support);
        let grads = p.grads(&tape, loss);
        opt.update(&mut net.store, &grads);
    }
    let theta = regress_theta(&net, &rep, &cloth).unwrap();
    let fin = tps_loss_images(&warp_with(net.basis(), &cloth, &theta).unwrap(), &worn, &parse).unwrap();
    assert!(fin <= 0.5 * initial, "L1 {initial} -> {fin}");
}
