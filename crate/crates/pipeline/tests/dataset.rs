use ndarray::Array2;
use tryon_core::data::{label, ImageGeometry, Keypoint, KeypointSet, ParseLabelMap, RgbImage, NUM_KEYPOINTS};
use tryon_core::sample::TrainingSample;
use tryon_core::toy::generate_toy_scene;
use tryon_pipeline::dataset::{load_viton_sample, save_viton_sample, Dataset};
use tryon_pipeline::PipelineError;

fn geom(h: usize, w: usize) -> ImageGeometry {
    ImageGeometry::new(h, w).unwrap()
}

#[test]
fn viton_round_trip_at_native_size() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_toy_scene(3, geom(64, 48)).unwrap();
    save_viton_sample(dir.path(), "a", &s).unwrap();
    let back = load_viton_sample(dir.path(), "a", geom(64, 48)).unwrap();
    assert_eq!(back.parse, s.parse);
    assert_eq!(back.keypoints, s.keypoints);
    // 8-bit quantisation of the signed range.
    let err = back.person.data().iter().zip(s.person.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err <= 1.0 / 255.0 + 1e-9, "{err}");
}

#[test]
fn loading_resamples_images_and_keypoints() {
    let dir = tempfile::tempdir().unwrap();
    let g = geom(256, 192);
    let mut points = vec![Keypoint::new(10.0, 10.0); NUM_KEYPOINTS];
    points[0] = Keypoint::new(128.0, 96.0);
    let parse = ParseLabelMap::new(Array2::from_shape_fn((256, 192), |(r, _)| if r < 128 { label::TOP_CLOTHES } else { label::BACKGROUND })).unwrap();
    let person = RgbImage::filled(g, [0.2, -0.2, 0.0]);
    let s = TrainingSample::new(person, RgbImage::filled(g, [1.0; 3]), parse, KeypointSet::new(points).unwrap()).unwrap();
    save_viton_sample(dir.path(), "big", &s).unwrap();
    let small = load_viton_sample(dir.path(), "big", geom(64, 48)).unwrap();
    assert_eq!(small.person.geometry(), geom(64, 48));
    let p = small.keypoints.points()[0];
    assert!((p.row - 32.0).abs() < 1e-9 && (p.col - 24.0).abs() < 1e-9, "{p:?}");
    assert_eq!(small.parse.get(10, 10), label::TOP_CLOTHES);
    assert_eq!(small.parse.get(50, 10), label::BACKGROUND);
}

#[test]
fn garment_free_parse_gives_empty_worn_cloth() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = generate_toy_scene(5, geom(32, 24)).unwrap();
    let labels = s.parse.labels().mapv(|l| if l == label::TOP_CLOTHES { label::TORSO } else { l });
    s = TrainingSample::new(s.person, s.cloth, ParseLabelMap::new(labels).unwrap(), s.keypoints).unwrap();
    save_viton_sample(dir.path(), "bare", &s).unwrap();
    let back = load_viton_sample(dir.path(), "bare", geom(32, 24)).unwrap();
    assert!(back.worn_cloth.data().iter().all(|&v| v == 0.0));
}

#[test]
fn missing_and_malformed_assets() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_viton_sample(dir.path(), "ghost", geom(32, 24)), Err(PipelineError::MissingAsset(_))));
    let s = generate_toy_scene(1, geom(32, 24)).unwrap();
    save_viton_sample(dir.path(), "p", &s).unwrap();
    std::fs::write(dir.path().join("pose/p.json"), "{\"keypoints\": [[1, 2]]}").unwrap();
    let err = load_viton_sample(dir.path(), "p", geom(32, 24)).unwrap_err();
    assert!(matches!(err, PipelineError::InvalidPose(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn toy_dataset_split_and_lookup() {
    let data = Dataset::toy(geom(32, 24), 50);
    let val = data.val_ids();
    assert!(!val.is_empty() && data.train_len() + val.len() == 50);
    let s = data.sample(&val[0]).unwrap();
    assert_eq!(s.person.geometry(), geom(32, 24));
    assert!(matches!(data.sample("not-a-seed"), Err(PipelineError::UnknownId { .. })));
}
