//! Thin-plate-spline alignment of the garment to the target body.
//!
//! A warp is described by where each node of a regular `G x G` control grid
//! should sample from in the garment image. Because the spline coefficients
//! are linear in those positions, the whole sampling grid is a fixed matrix
//! ([`TpsBasis`]) times the parameter vector, which keeps the warp
//! differentiable with a single matmul.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array3, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tryon_tensor::{l2_normalize, Array, Bound, ConvSpec, Linear, ParamStore, Tape, Var};

use crate::data::{label, stack_chw, unstack_chw, ImageGeometry, ParseLabelMap, PersonRepresentation, RgbImage, PERSON_REP_CHANNELS};
use crate::error::{Result, TryonError};
use crate::nets::{ConvBlock, Widths};

/// Control nodes per side.
pub const DEFAULT_GRID: usize = 5;
/// Regulariser inside the radial kernel's logarithm.
pub const KERNEL_EPS: f64 = 1e-6;

/// Radial basis `d^2 log(d^2 + eps)` evaluated from a squared distance.
pub fn radial_kernel(d2: f64) -> f64 {
    d2 * (d2 + KERNEL_EPS).ln()
}

/// Nodes of the regular `g x g` grid over `[-1, 1]^2`, row-major, as `(x, y)`.
pub fn regular_grid(g: usize) -> Vec<[f64; 2]> {
    let step = 2.0 / (g - 1) as f64;
    (0..g).flat_map(|i| (0..g).map(move |j| [-1.0 + step * j as f64, -1.0 + step * i as f64])).collect()
}

/// Normalised `(x, y)` of pixel `(row, col)` (corner-aligned).
pub fn pixel_to_normalized(geom: ImageGeometry, row: f64, col: f64) -> [f64; 2] {
    [2.0 * col / (geom.width - 1) as f64 - 1.0, 2.0 * row / (geom.height - 1) as f64 - 1.0]
}

/// Sampling positions for the control nodes of a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsParams {
    pub grid: usize,
    /// `2 * grid^2` values: `x0, y0, x1, y1, ...` in node order.
    pub offsets: Vec<f64>,
}

impl TpsParams {
    pub fn new(grid: usize, offsets: Vec<f64>) -> Result<Self> {
        if grid < 3 {
            return Err(TryonError::InvalidGeometry(format!("control grid {grid} < 3")));
        }
        if offsets.len() != 2 * grid * grid {
            return Err(TryonError::ShapeMismatch(format!("{} offsets for a {grid}x{grid} grid", offsets.len())));
        }
        if let Some(v) = offsets.iter().find(|v| !v.is_finite()) {
            return Err(TryonError::InvalidGeometry(format!("non-finite control position {v}")));
        }
        Ok(TpsParams { grid, offsets })
    }

    /// Every node samples from its own location.
    pub fn identity(grid: usize) -> Self {
        TpsParams { grid, offsets: regular_grid(grid).into_iter().flatten().collect() }
    }

    /// Every node moves by the same normalised `(dx, dy)`.
    pub fn translated(grid: usize, dx: f64, dy: f64) -> Self {
        let mut t = Self::identity(grid);
        for p in t.offsets.chunks_mut(2) {
            p[0] += dx;
            p[1] += dy;
        }
        t
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        self.offsets.chunks(2).map(|p| [p[0], p[1]]).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialise")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: TpsParams = serde_json::from_str(s).map_err(|e| TryonError::InvalidGeometry(e.to_string()))?;
        Self::new(t.grid, t.offsets)
    }
}

/// `f(p) = affine * p + translation + sum_i weights[i] * U(|p - sources[i]|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsCoefficients {
    pub sources: Vec<[f64; 2]>,
    /// Row-major 2x2.
    pub affine: [[f64; 2]; 2],
    pub translation: [f64; 2],
    pub weights: Vec<[f64; 2]>,
}

impl TpsCoefficients {
    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (d, o) in out.iter_mut().enumerate() {
            *o = self.affine[d][0] * p[0] + self.affine[d][1] * p[1] + self.translation[d];
        }
        for (s, w) in self.sources.iter().zip(&self.weights) {
            let u = radial_kernel((p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2));
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }
}

/// The `(m + 3)` square system of an `m`-node spline with side conditions.
fn kernel_system(src: &[[f64; 2]]) -> DMatrix<f64> {
    let m = src.len();
    let mut l = DMatrix::zeros(m + 3, m + 3);
    for i in 0..m {
        for j in 0..m {
            let d2 = (src[i][0] - src[j][0]).powi(2) + (src[i][1] - src[j][1]).powi(2);
            l[(i, j)] = radial_kernel(d2);
        }
        let row = [1.0, src[i][0], src[i][1]];
        for (k, v) in row.into_iter().enumerate() {
            l[(i, m + k)] = v;
            l[(m + k, i)] = v;
        }
    }
    l
}

fn invert_system(src: &[[f64; 2]]) -> Result<DMatrix<f64>> {
    let l = kernel_system(src);
    let inv = l.clone().lu().try_inverse().ok_or(TryonError::SingularTps)?;
    let scale = l.amax() * inv.amax() * (src.len() + 3) as f64;
    if !scale.is_finite() || scale > 1e12 {
        return Err(TryonError::SingularTps);
    }
    Ok(inv)
}

/// Spline through `control_src[i] -> control_dst[i]`.
pub fn solve_tps_kernel(control_src: &[[f64; 2]], control_dst: &[[f64; 2]]) -> Result<TpsCoefficients> {
    if control_src.len() != control_dst.len() {
        return Err(TryonError::ShapeMismatch(format!("{} sources vs {} targets", control_src.len(), control_dst.len())));
    }
    if control_src.len() < 3 {
        return Err(TryonError::SingularTps);
    }
    let m = control_src.len();
    let inv = invert_system(control_src)?;
    let mut sol = [DVector::zeros(m + 3), DVector::zeros(m + 3)];
    for (d, s) in sol.iter_mut().enumerate() {
        let mut rhs = DVector::zeros(m + 3);
        for i in 0..m {
            rhs[i] = control_dst[i][d];
        }
        *s = &inv * rhs;
    }
    Ok(TpsCoefficients {
        sources: control_src.to_vec(),
        affine: [[sol[0][m + 1], sol[0][m + 2]], [sol[1][m + 1], sol[1][m + 2]]],
        translation: [sol[0][m], sol[1][m]],
        weights: (0..m).map(|i| [sol[0][i], sol[1][i]]).collect(),
    })
}

/// Linear map from control positions to the dense sampling grid.
///
/// `matrix` is `[H*W, G^2]`; the sampling grid for one image is
/// `matrix @ points` with `points` as `[G^2, 2]` `(x, y)` rows.
#[derive(Debug, Clone)]
pub struct TpsBasis {
    pub grid: usize,
    pub geometry: ImageGeometry,
    matrix: Array,
}

impl TpsBasis {
    pub fn new(grid: usize, geometry: ImageGeometry) -> Result<Self> {
        if grid < 3 {
            return Err(TryonError::InvalidGeometry(format!("control grid {grid} < 3")));
        }
        let src = regular_grid(grid);
        let m = src.len();
        let inv = invert_system(&src)?;
        let (h, w) = (geometry.height, geometry.width);
        let mut matrix = Array::zeros(IxDyn(&[h * w, m]));
        let mut basis = vec![0.0; m + 3];
        for r in 0..h {
            for c in 0..w {
                let p = pixel_to_normalized(geometry, r as f64, c as f64);
                for (b, s) in basis.iter_mut().zip(&src) {
                    *b = radial_kernel((p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2));
                }
                basis[m] = 1.0;
                basis[m + 1] = p[0];
                basis[m + 2] = p[1];
                for j in 0..m {
                    matrix[[r * w + c, j]] = (0..m + 3).map(|k| basis[k] * inv[(k, j)]).sum();
                }
            }
        }
        Ok(TpsBasis { grid, geometry, matrix })
    }

    /// `theta`: `[n, 2 G^2]` -> sampling grid `[n, H, W, 2]`.
    pub fn sampling_grid<'t>(&self, theta: Var<'t>) -> Var<'t> {
        let n = theta.shape()[0];
        let m = self.grid * self.grid;
        let (h, w) = (self.geometry.height, self.geometry.width);
        let basis = theta.tape().constant(self.matrix.clone().insert_axis(Axis(0)));
        let basis = basis.broadcast_to(&[n, h * w, m]);
        basis.matmul(theta.reshape(&[n, m, 2])).reshape(&[n, h, w, 2])
    }

    /// Backward-warp `cloth` `[n, C, H, W]` with bilinear sampling and border padding.
    pub fn warp<'t>(&self, cloth: Var<'t>, theta: Var<'t>) -> Var<'t> {
        cloth.grid_sample(self.sampling_grid(theta))
    }
}

/// Warp a single garment image.
pub fn tps_warp(cloth: &RgbImage, theta: &TpsParams) -> Result<RgbImage> {
    let basis = TpsBasis::new(theta.grid, cloth.geometry())?;
    warp_with(&basis, cloth, theta)
}

/// [`tps_warp`] with a precomputed basis.
pub fn warp_with(basis: &TpsBasis, cloth: &RgbImage, theta: &TpsParams) -> Result<RgbImage> {
    if basis.geometry != cloth.geometry() || basis.grid != theta.grid {
        return Err(TryonError::ShapeMismatch(format!(
            "basis {}x{} over {:?}, theta {}x{} on {:?}",
            basis.grid,
            basis.grid,
            basis.geometry,
            theta.grid,
            theta.grid,
            cloth.geometry()
        )));
    }
    let tape = Tape::new();
    let img = tape.constant(stack_chw([cloth.data()]));
    let th = tape.constant(Array::from_shape_vec(IxDyn(&[1, theta.offsets.len()]), theta.offsets.clone()).expect("length checked"));
    let out = basis.warp(img, th).value();
    RgbImage::from_clamped(unstack_chw(&out, 0))
}

/// `out[i*w + j, r, c] = <a[:, r, c], b[:, i, j]>` for each batch element.
pub fn correlation<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let s = a.shape();
    assert_eq!(s, b.shape(), "correlated feature maps must match");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let a = a.reshape(&[n, c, h * w]);
    let b = b.reshape(&[n, c, h * w]);
    b.transpose_last2().matmul(a).reshape(&[n, h * w, h, w])
}

/// Correlation of two single `C x h x w` feature maps.
pub fn correlation_match(feat_a: &Array3<f64>, feat_b: &Array3<f64>) -> Result<Array3<f64>> {
    if feat_a.shape() != feat_b.shape() {
        return Err(TryonError::ShapeMismatch(format!("{:?} vs {:?}", feat_a.shape(), feat_b.shape())));
    }
    let tape = Tape::new();
    let out = correlation(tape.constant(stack_chw([feat_a])), tape.constant(stack_chw([feat_b]))).value();
    Ok(unstack_chw(&out, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub grid: usize,
    /// Stride-2 stages in each feature tower.
    pub downsamples: usize,
    pub widths: Widths,
    /// Channels of the convolution applied to the correlation volume.
    pub regressor_width: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig { grid: DEFAULT_GRID, downsamples: 4, widths: Widths { base: 16, max: 128 }, regressor_width: 64 }
    }
}

#[derive(Debug, Clone)]
struct Tower {
    layers: Vec<ConvBlock>,
}

impl Tower {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, cfg: &AlignmentConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut c = c_in;
        let layers = (0..cfg.downsamples)
            .map(|l| {
                let c_out = cfg.widths.at(l);
                let spec = ConvSpec::new(c, c_out, 3).stride(2);
                c = c_out;
                ConvBlock::new(store, &format!("{name}.{l}"), spec, true, true, rng)
            })
            .collect();
        Tower { layers }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        self.layers.iter().fold(x, |h, l| l.forward(p, h))
    }
}

/// Person and garment feature towers, correlation, and a regressor onto
/// control-node positions.
#[derive(Debug, Clone)]
pub struct AlignmentNet {
    pub config: AlignmentConfig,
    pub geometry: ImageGeometry,
    person: Tower,
    cloth: Tower,
    corr_conv: ConvBlock,
    head: Linear,
    basis: TpsBasis,
    pub store: ParamStore,
}

impl AlignmentNet {
    /// Initialised so the first warp is close to the identity.
    pub fn new(config: AlignmentConfig, geometry: ImageGeometry, seed: u64) -> Result<Self> {
        geometry.check_depth(config.downsamples)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let person = Tower::new(&mut store, "person", PERSON_REP_CHANNELS, &config, &mut rng);
        let cloth = Tower::new(&mut store, "cloth", 3, &config, &mut rng);
        let (fh, fw) = feature_size(geometry, config.downsamples);
        let corr_conv = ConvBlock::new(
            &mut store,
            "corr",
            ConvSpec::new(fh * fw, config.regressor_width, 3),
            true,
            true,
            &mut rng,
        );
        let d_in = config.regressor_width * fh * fw;
        let head = Linear::new(&mut store, "head", d_in, 2 * config.grid * config.grid, 1e-3 / (d_in as f64).sqrt(), &mut rng);
        let bias: Vec<f64> = TpsParams::identity(config.grid).offsets;
        *store.get_mut(head.bias) = Array::from_shape_vec(IxDyn(&[bias.len()]), bias).expect("2 G^2 values");
        let basis = TpsBasis::new(config.grid, geometry)?;
        Ok(AlignmentNet { config, geometry, person, cloth, corr_conv, head, basis, store })
    }

    pub fn basis(&self) -> &TpsBasis {
        &self.basis
    }

    /// `rep`: `[n, 18, H, W]`, `cloth`: `[n, 3, H, W]` -> `theta` `[n, 2 G^2]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, rep: Var<'t>, cloth: Var<'t>) -> Var<'t> {
        let fa = l2_normalize(self.person.forward(p, rep), 1, 1e-12);
        let fb = l2_normalize(self.cloth.forward(p, cloth), 1, 1e-12);
        let h = self.corr_conv.forward(p, correlation(fa, fb));
        let n = h.shape()[0];
        let flat = h.reshape(&[n, h.value().len() / n]);
        self.head.forward(p, flat)
    }

    /// Regress, then warp `cloth` with the result. Returns `(theta, warped)`.
    pub fn forward_warp<'t>(&self, p: &Bound<'t>, rep: Var<'t>, cloth: Var<'t>) -> (Var<'t>, Var<'t>) {
        let theta = self.forward(p, rep, cloth);
        (theta, self.basis.warp(cloth, theta))
    }
}

fn feature_size(g: ImageGeometry, downsamples: usize) -> (usize, usize) {
    (0..downsamples).fold((g.height, g.width), |(h, w), _| (h.div_ceil(2), w.div_ceil(2)))
}

/// Control positions for one person/garment pair.
pub fn regress_theta(net: &AlignmentNet, rep: &PersonRepresentation, cloth: &RgbImage) -> Result<TpsParams> {
    if rep.geometry() != net.geometry || cloth.geometry() != net.geometry {
        return Err(TryonError::ShapeMismatch(format!(
            "network built for {:?}, got representation {:?} and cloth {:?}",
            net.geometry,
            rep.geometry(),
            cloth.geometry()
        )));
    }
    let tape = Tape::new();
    let p = net.store.bind(&tape, false);
    let theta = net.forward(&p, tape.constant(stack_chw([rep.data()])), tape.constant(stack_chw([cloth.data()])));
    TpsParams::new(net.config.grid, theta.value().iter().copied().collect())
}

/// `[1, H, W]` indicator of top-clothes pixels.
pub fn worn_support(parse: &ParseLabelMap) -> Array3<f64> {
    parse.labels().map(|&l| if l == label::TOP_CLOTHES { 1.0 } else { 0.0 }).insert_axis(Axis(0))
}

/// Mean absolute difference over the worn-garment support, pooled over the
/// batch and the colour channels. `support`: `[n, 1, H, W]`. Zero when the
/// support is empty.
pub fn tps_loss<'t>(warped: Var<'t>, worn: Var<'t>, support: &Array) -> Var<'t> {
    let s = warped.shape();
    let count = support.sum() * s[1] as f64;
    let mask = support.broadcast(IxDyn(&s)).expect("support broadcasts over channels").to_owned();
    let total = (warped - worn).abs().mask_mul(mask.into()).sum();
    if count > 0.0 {
        total / count
    } else {
        total * 0.0
    }
}

/// [`tps_loss`] for one image pair, supported on the top-clothes pixels of `parse`.
pub fn tps_loss_images(warped: &RgbImage, worn: &RgbImage, parse: &ParseLabelMap) -> Result<f64> {
    let g = parse.geometry();
    if warped.geometry() != g || worn.geometry() != g {
        return Err(TryonError::ShapeMismatch(format!("{:?} / {:?} vs parse {:?}", warped.geometry(), worn.geometry(), g)));
    }
    let tape = Tape::new();
    let support = stack_chw([&worn_support(parse)]);
    Ok(tps_loss(tape.constant(stack_chw([warped.data()])), tape.constant(stack_chw([worn.data()])), &support).item())
}
