//! Domain types shared by both stages and the encodings between them.
//!
//! Images and maps are stored channel-first (`[C, H, W]`), matching the
//! network layout.

use ndarray::{s, Array2, Array3, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TryonError};

pub const NUM_LABELS: usize = 10;
pub const NUM_KEYPOINTS: usize = 17;
pub const PERSON_REP_CHANNELS: usize = NUM_KEYPOINTS + 1;

/// Fixed label indices of the 10-class parse.
pub mod label {
    pub const HAT: u8 = 0;
    pub const FACE_HAIR: u8 = 1;
    pub const TORSO: u8 = 2;
    pub const LEFT_ARM: u8 = 3;
    pub const RIGHT_ARM: u8 = 4;
    pub const TOP_CLOTHES: u8 = 5;
    pub const BOTTOM_CLOTHES: u8 = 6;
    pub const LEGS: u8 = 7;
    pub const SHOES: u8 = 8;
    pub const BACKGROUND: u8 = 9;

    /// Torso, arms and top clothes: the region replaced by a new upper garment.
    pub const TARGET: [u8; 4] = [TORSO, LEFT_ARM, RIGHT_ARM, TOP_CLOTHES];
    /// Channels zeroed inside the masked region.
    pub const MASKABLE: [u8; 5] = [TORSO, LEFT_ARM, RIGHT_ARM, TOP_CLOTHES, BACKGROUND];
    /// Channels never touched by masking.
    pub const IDENTITY: [u8; 5] = [HAT, FACE_HAIR, BOTTOM_CLOTHES, LEGS, SHOES];

    pub fn is_target(l: u8) -> bool {
        TARGET.contains(&l)
    }

    pub fn is_arm(l: u8) -> bool {
        l == LEFT_ARM || l == RIGHT_ARM
    }
}

/// COCO-17 keypoint order.
pub mod coco {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
}

impl ImageGeometry {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(TryonError::InvalidGeometry(format!("{height}x{width} is below the 8x8 minimum")));
        }
        Ok(ImageGeometry { height, width })
    }

    /// Both sides must be divisible by `2^depth` for a `depth`-level encoder.
    pub fn check_depth(&self, depth: usize) -> Result<()> {
        let f = 1usize << depth;
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(TryonError::InvalidGeometry(format!(
                "{}x{} is not divisible by 2^{depth}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= 0.0 && col >= 0.0 && row <= (self.height - 1) as f64 && col <= (self.width - 1) as f64
    }

    fn of3(a: &Array3<f64>) -> Self {
        ImageGeometry { height: a.shape()[1], width: a.shape()[2] }
    }
}

fn check_channels(data: &Array3<f64>, c: usize, what: &str) -> Result<ImageGeometry> {
    if data.shape()[0] != c {
        return Err(TryonError::ShapeMismatch(format!("{what} needs {c} channels, got {}", data.shape()[0])));
    }
    ImageGeometry::new(data.shape()[1], data.shape()[2])
}

/// RGB image with values in `[-1, 1]`, stored `[3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    geometry: ImageGeometry,
    data: Array3<f64>,
}

impl RgbImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let geometry = check_channels(&data, 3, "RgbImage")?;
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0 + 1e-9) {
            return Err(TryonError::InvalidImage(format!("value {v} outside [-1, 1]")));
        }
        Ok(RgbImage { geometry, data })
    }

    /// Clamp into range instead of rejecting (for network outputs and resampling).
    pub fn from_clamped(data: Array3<f64>) -> Result<Self> {
        let data = data.mapv(|v| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 });
        Self::new(data)
    }

    pub fn filled(geometry: ImageGeometry, rgb: [f64; 3]) -> Self {
        let data = Array3::from_shape_fn((3, geometry.height, geometry.width), |(c, _, _)| rgb[c]);
        RgbImage { geometry, data }
    }

    pub fn geometry(&self) -> ImageGeometry {
        self.geometry
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        [self.data[[0, r, c]], self.data[[1, r, c]], self.data[[2, r, c]]]
    }
}

/// Per-pixel class labels in `0..=9`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseLabelMap {
    geometry: ImageGeometry,
    labels: Array2<u8>,
}

impl ParseLabelMap {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        let geometry = ImageGeometry::new(labels.nrows(), labels.ncols())?;
        if let Some(((row, col), &l)) = labels.indexed_iter().find(|(_, &l)| l as usize >= NUM_LABELS) {
            return Err(TryonError::InvalidLabel { row, col, label: l });
        }
        Ok(ParseLabelMap { geometry, labels })
    }

    pub fn geometry(&self) -> ImageGeometry {
        self.geometry
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[[r, c]]
    }
}

/// 10-channel semantic map; hard (one-hot) or soft (post-softmax).
#[derive(Debug, Clone, PartialEq)]
pub struct SegMap {
    geometry: ImageGeometry,
    data: Array3<f64>,
}

impl SegMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let geometry = check_channels(&data, NUM_LABELS, "SegMap")?;
        Ok(SegMap { geometry, data })
    }

    pub fn geometry(&self) -> ImageGeometry {
        self.geometry
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Argmax label at one pixel (lowest channel wins ties).
    pub fn label_at(&self, r: usize, c: usize) -> u8 {
        let mut best = 0;
        let mut best_v = self.data[[0, r, c]];
        for k in 1..NUM_LABELS {
            let v = self.data[[k, r, c]];
            if v > best_v {
                best = k;
                best_v = v;
            }
        }
        best as u8
    }

    /// Every entry is 0 or 1 with exactly one 1 per pixel.
    pub fn is_hard(&self) -> bool {
        (0..self.geometry.height).all(|r| {
            (0..self.geometry.width).all(|c| {
                let mut ones = 0;
                for k in 0..NUM_LABELS {
                    let v = self.data[[k, r, c]];
                    if v == 1.0 {
                        ones += 1;
                    } else if v != 0.0 {
                        return false;
                    }
                }
                ones == 1
            })
        })
    }

    /// Largest deviation of a per-pixel channel sum from 1.
    pub fn max_channel_sum_error(&self) -> f64 {
        self.data
            .sum_axis(Axis(0))
            .iter()
            .fold(0.0f64, |m, s| m.max((s - 1.0).abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub row: f64,
    pub col: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn new(row: f64, col: f64) -> Self {
        Keypoint { row, col, visible: true }
    }

    pub fn hidden() -> Self {
        Keypoint { row: 0.0, col: 0.0, visible: false }
    }
}

/// Exactly 17 keypoints in COCO order.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: [Keypoint; NUM_KEYPOINTS],
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Result<Self> {
        let n = points.len();
        let points: [Keypoint; NUM_KEYPOINTS] = points
            .try_into()
            .map_err(|_| TryonError::InvalidKeypoints(format!("expected {NUM_KEYPOINTS} keypoints, got {n}")))?;
        if let Some(p) = points.iter().find(|p| p.visible && !(p.row.is_finite() && p.col.is_finite())) {
            return Err(TryonError::InvalidKeypoints(format!("non-finite keypoint {p:?}")));
        }
        Ok(KeypointSet { points })
    }

    pub fn all_hidden() -> Self {
        KeypointSet { points: [Keypoint::hidden(); NUM_KEYPOINTS] }
    }

    /// Reject visible points outside the frame.
    pub fn validate(&self, geom: ImageGeometry) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.visible && !geom.contains(p.row, p.col) {
                return Err(TryonError::InvalidKeypoints(format!(
                    "keypoint {i} at ({}, {}) outside {}x{}",
                    p.row, p.col, geom.height, geom.width
                )));
            }
        }
        Ok(())
    }

    pub fn points(&self) -> &[Keypoint; NUM_KEYPOINTS] {
        &self.points
    }

    pub fn get(&self, i: usize) -> Keypoint {
        self.points[i]
    }

    pub fn set(&mut self, i: usize, kp: Keypoint) {
        self.points[i] = kp;
    }

    /// Rescale coordinates by per-axis factors.
    pub fn scaled(&self, row_scale: f64, col_scale: f64) -> Self {
        let mut out = self.clone();
        for p in out.points.iter_mut() {
            p.row *= row_scale;
            p.col *= col_scale;
        }
        out
    }
}

/// 18-channel conditioning: 17 keypoint heatmaps and the blurred body shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonRepresentation {
    geometry: ImageGeometry,
    data: Array3<f64>,
}

impl PersonRepresentation {
    /// `[18, H, W]` with every value in `[0, 1]`.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let geometry = check_channels(&data, PERSON_REP_CHANNELS, "PersonRepresentation")?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TryonError::InvalidImage(format!("representation value {v} outside [0, 1]")));
        }
        Ok(PersonRepresentation { geometry, data })
    }

    pub fn geometry(&self) -> ImageGeometry {
        self.geometry
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
}

pub fn onehot_encode(parse: &ParseLabelMap) -> SegMap {
    let g = parse.geometry;
    let mut data = Array3::zeros((NUM_LABELS, g.height, g.width));
    for ((r, c), &l) in parse.labels.indexed_iter() {
        data[[l as usize, r, c]] = 1.0;
    }
    SegMap { geometry: g, data }
}

/// Per-pixel argmax; ties go to the lowest channel index.
pub fn decode_to_labels(seg: &SegMap) -> Result<ParseLabelMap> {
    let g = seg.geometry;
    let mut labels = Array2::zeros((g.height, g.width));
    for r in 0..g.height {
        for c in 0..g.width {
            if (0..NUM_LABELS).all(|k| seg.data[[k, r, c]] <= 0.0) {
                return Err(TryonError::DegeneratePixel { row: r, col: c });
            }
            labels[[r, c]] = seg.label_at(r, c);
        }
    }
    Ok(ParseLabelMap { geometry: g, labels })
}

/// Disk radius used for keypoint heatmaps: 4 px at 256-pixel height.
pub fn heatmap_radius(geom: ImageGeometry) -> f64 {
    (4.0 * geom.height as f64 / 256.0).round()
}

/// 17 binary disk heatmaps, `[17, H, W]`; hidden points give zero channels.
pub fn keypoints_to_heatmaps(kp: &KeypointSet, geom: ImageGeometry) -> Array3<f64> {
    keypoints_to_heatmaps_with_radius(kp, geom, heatmap_radius(geom))
}

pub fn keypoints_to_heatmaps_with_radius(kp: &KeypointSet, geom: ImageGeometry, radius: f64) -> Array3<f64> {
    let mut out = Array3::zeros((NUM_KEYPOINTS, geom.height, geom.width));
    let r2 = radius * radius + 1e-9;
    for (k, p) in kp.points.iter().enumerate() {
        if !p.visible {
            continue;
        }
        let r0 = (p.row - radius).floor().max(0.0) as usize;
        let r1 = ((p.row + radius).ceil().max(0.0) as usize).min(geom.height - 1);
        let c0 = (p.col - radius).floor().max(0.0) as usize;
        let c1 = ((p.col + radius).ceil().max(0.0) as usize).min(geom.width - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let d2 = (r as f64 - p.row).powi(2) + (c as f64 - p.col).powi(2);
                if d2 <= r2 {
                    out[[k, r, c]] = 1.0;
                }
            }
        }
    }
    out
}

/// Block-average downsampling factor for the body-shape blur.
pub const BODY_BLUR_FACTOR: usize = 16;

/// Blurred mask of torso, arms and top clothes (values in `[0, 1]`).
pub fn body_shape_mask(seg: &SegMap) -> Array2<f64> {
    let g = seg.geometry;
    let mut mask = Array2::zeros((g.height, g.width));
    for &l in &label::TARGET {
        mask += &seg.data.index_axis(Axis(0), l as usize);
    }
    let mask = mask.mapv(|v: f64| if v > 0.5 { 1.0 } else { 0.0 });
    let low = area_downsample(&mask, BODY_BLUR_FACTOR);
    bilinear_resize(&low, g.height, g.width).mapv(|v| v.clamp(0.0, 1.0))
}

/// Average over `f x f` blocks; partial edge blocks average what they cover.
pub fn area_downsample(x: &Array2<f64>, f: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let (lh, lw) = (h.div_ceil(f), w.div_ceil(f));
    Array2::from_shape_fn((lh, lw), |(i, j)| {
        let block = x.slice(s![i * f..((i + 1) * f).min(h), j * f..((j + 1) * f).min(w)]);
        block.mean().unwrap_or(0.0)
    })
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn bilinear_resize(x: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let (r0, r1, fr) = coord(r, h, out_h);
        let (c0, c1, fc) = coord(c, w, out_w);
        let top = x[[r0, c0]] * (1.0 - fc) + x[[r0, c1]] * fc;
        let bot = x[[r1, c0]] * (1.0 - fc) + x[[r1, c1]] * fc;
        top * (1.0 - fr) + bot * fr
    })
}

/// Concatenate heatmaps (channels 0-16) and body shape (channel 17).
pub fn assemble_person_representation(heatmaps: &Array3<f64>, shape: &Array2<f64>) -> Result<PersonRepresentation> {
    if heatmaps.shape()[0] != NUM_KEYPOINTS {
        return Err(TryonError::ShapeMismatch(format!(
            "expected {NUM_KEYPOINTS} heatmap channels, got {}",
            heatmaps.shape()[0]
        )));
    }
    if heatmaps.shape()[1..] != *shape.shape() {
        return Err(TryonError::ShapeMismatch(format!(
            "heatmaps {:?} vs body shape {:?}",
            &heatmaps.shape()[1..],
            shape.shape()
        )));
    }
    let geometry = ImageGeometry::of3(heatmaps);
    let mut data = Array3::zeros((PERSON_REP_CHANNELS, geometry.height, geometry.width));
    data.slice_mut(s![..NUM_KEYPOINTS, .., ..]).assign(heatmaps);
    data.index_axis_mut(Axis(0), NUM_KEYPOINTS).assign(shape);
    Ok(PersonRepresentation { geometry, data })
}

/// Heatmaps + body shape from a parse and keypoints.
pub fn person_representation(seg: &SegMap, kp: &KeypointSet) -> Result<PersonRepresentation> {
    let hm = keypoints_to_heatmaps(kp, seg.geometry);
    assemble_person_representation(&hm, &body_shape_mask(seg))
}

/// Stack `[C, H, W]` arrays into an `[N, C, H, W]` batch.
pub fn stack_chw<'a>(items: impl IntoIterator<Item = &'a Array3<f64>>) -> ArrayD<f64> {
    let views: Vec<_> = items.into_iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    assert!(!views.is_empty(), "cannot stack an empty batch");
    ndarray::concatenate(Axis(0), &views)
        .expect("batch items must share a shape")
        .into_dyn()
}

/// Split sample `n` out of an `[N, C, H, W]` batch.
pub fn unstack_chw(batch: &ArrayD<f64>, n: usize) -> Array3<f64> {
    batch
        .index_axis(Axis(0), n)
        .to_owned()
        .into_dimensionality()
        .expect("rank-4 batch")
}

/// Convert a `[H, W]` mask to a `[1, H, W]` array.
pub fn mask_chw(mask: &Array2<f64>) -> Array3<f64> {
    mask.clone().insert_axis(Axis(0))
}
