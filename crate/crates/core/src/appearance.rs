//! Stage two: render the person wearing the warped garment.

use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tryon_tensor::{
    instance_norm, joint_grads, Adam, AdamConfig, Array, Bound, Conv2d, ConvSpec, ParamStore, Precision, Tape, Var, LEAKY_SLOPE,
};

use crate::alignment::{tps_loss, worn_support, AlignmentConfig, AlignmentNet};
use crate::backbone::EmbeddingBackbone;
use crate::data::{stack_chw, unstack_chw, ImageGeometry, PersonRepresentation, RgbImage, SegMap, NUM_LABELS, PERSON_REP_CHANNELS};
use crate::error::{Result, TryonError};
use crate::nets::{lrelu_gain, ConvBlock, ResBlock, Widths, NORM_EPS};
use crate::sample::PreparedSample;
use crate::shape::{check_finite, gradient_penalty, hinge_discriminator_loss};

/// Segmentation plus warped garment.
pub const SPADE_COND_CHANNELS: usize = NUM_LABELS + 3;
/// Masked person, warped garment and person representation.
pub const APPEARANCE_INPUT_CHANNELS: usize = 3 + 3 + PERSON_REP_CHANNELS;
/// Candidate image plus the conditioning.
pub const APPEARANCE_DISC_CHANNELS: usize = 3 + SPADE_COND_CHANNELS;

/// Resize `cond` to the spatial size of `like` (area average down, nearest up).
fn match_size<'t>(cond: Var<'t>, like: &[usize]) -> Var<'t> {
    let (ch, th) = (cond.shape()[2], like[2]);
    if ch > th {
        assert_eq!(ch % th, 0, "conditioning {ch} rows do not divide into {th}");
        cond.avg_pool(ch / th)
    } else if ch < th {
        assert_eq!(th % ch, 0, "feature {th} rows are not a multiple of {ch}");
        cond.upsample_nearest(th / ch)
    } else {
        cond
    }
}

/// Spatially-adaptive normalisation: `IN(x) * (1 + gamma(cond)) + beta(cond)`.
#[derive(Debug, Clone)]
pub struct SpadeBlock {
    pub shared: Conv2d,
    pub gamma: Conv2d,
    pub beta: Conv2d,
}

impl SpadeBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        SpadeBlock {
            shared: Conv2d::new(store, &format!("{name}.shared"), ConvSpec::new(SPADE_COND_CHANNELS, hidden, 3), 2f64.sqrt(), rng),
            gamma: Conv2d::new(store, &format!("{name}.gamma"), ConvSpec::new(hidden, channels, 3), 1.0, rng),
            beta: Conv2d::new(store, &format!("{name}.beta"), ConvSpec::new(hidden, channels, 3), 1.0, rng),
        }
    }

    /// `x`: `[n, C, h, w]`; `cond`: `[n, 13, H, W]` at any multiple or divisor of `h`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, cond: Var<'t>) -> Var<'t> {
        let cond = match_size(cond, &x.shape());
        let hidden = self.shared.forward(p, cond).relu();
        let gamma = self.gamma.forward(p, hidden);
        let beta = self.beta.forward(p, hidden);
        instance_norm(x, NORM_EPS) * (gamma + 1.0) + beta
    }

    /// Zero both modulation heads.
    pub fn zero_heads(&self, store: &mut ParamStore) {
        for conv in [&self.gamma, &self.beta] {
            store.get_mut(conv.weight).fill(0.0);
            if let Some(b) = conv.bias {
                store.get_mut(b).fill(0.0);
            }
        }
    }
}

/// Apply one block to a single `C x h x w` feature map.
pub fn spade_normalize(features: &Array3<f64>, cond: &Array3<f64>, block: &SpadeBlock, store: &ParamStore) -> Result<Array3<f64>> {
    if cond.shape()[0] != SPADE_COND_CHANNELS {
        return Err(TryonError::ShapeMismatch(format!("conditioning has {} channels, expected {SPADE_COND_CHANNELS}", cond.shape()[0])));
    }
    let (fh, chh) = (features.shape()[1], cond.shape()[1]);
    let (fw, cw) = (features.shape()[2], cond.shape()[2]);
    let compatible = |a: usize, b: usize| a.is_multiple_of(b) || b.is_multiple_of(a);
    if !compatible(fh, chh) || !compatible(fw, cw) || fh * cw != fw * chh {
        return Err(TryonError::ShapeMismatch(format!("features {fh}x{fw} vs conditioning {chh}x{cw}")));
    }
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let out = block.forward(&p, tape.constant(stack_chw([features])), tape.constant(stack_chw([cond])));
    Ok(unstack_chw(&out.value(), 0))
}

/// SPADE, leaky ReLU, 3x3 convolution.
#[derive(Debug, Clone)]
struct SpadeConv {
    spade: SpadeBlock,
    conv: Conv2d,
}

impl SpadeConv {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, hidden: usize, gain: f64, rng: &mut impl Rng) -> Self {
        SpadeConv {
            spade: SpadeBlock::new(store, &format!("{name}.spade"), c_in, hidden, rng),
            conv: Conv2d::new(store, &format!("{name}.conv"), ConvSpec::new(c_in, c_out, 3), gain, rng),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, cond: Var<'t>) -> Var<'t> {
        self.conv.forward(p, self.spade.forward(p, x, cond).leaky_relu(LEAKY_SLOPE))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppearanceNetConfig {
    pub depth: usize,
    pub widths: Widths,
    pub res_blocks: usize,
    pub spade_hidden: usize,
    pub disc_scales: usize,
    pub disc_layers: usize,
    pub disc_width: usize,
}

impl Default for AppearanceNetConfig {
    fn default() -> Self {
        AppearanceNetConfig {
            depth: 3,
            widths: Widths { base: 32, max: 256 },
            res_blocks: 2,
            spade_hidden: 32,
            disc_scales: 2,
            disc_layers: 3,
            disc_width: 32,
        }
    }
}

/// Encoder with skip connections into a SPADE-modulated decoder.
#[derive(Debug, Clone)]
pub struct AppearanceGenerator {
    pub config: AppearanceNetConfig,
    stem: ConvBlock,
    down: Vec<ConvBlock>,
    bottleneck: Vec<ResBlock>,
    up: Vec<SpadeConv>,
    head: SpadeConv,
    pub store: ParamStore,
}

impl AppearanceGenerator {
    pub fn new(config: AppearanceNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.widths;
        let stem = ConvBlock::new(&mut store, "stem", ConvSpec::new(APPEARANCE_INPUT_CHANNELS, w.at(0), 3), true, true, &mut rng);
        let down = (1..=config.depth)
            .map(|l| ConvBlock::new(&mut store, &format!("down{l}"), ConvSpec::new(w.at(l - 1), w.at(l), 3).stride(2), true, true, &mut rng))
            .collect();
        let bottleneck = (0..config.res_blocks)
            .map(|i| ResBlock::new(&mut store, &format!("res{i}"), w.at(config.depth), &mut rng))
            .collect();
        let up = (1..=config.depth)
            .rev()
            .map(|l| SpadeConv::new(&mut store, &format!("up{l}"), w.at(l) + w.at(l - 1), w.at(l - 1), config.spade_hidden, lrelu_gain(), &mut rng))
            .collect();
        let head = SpadeConv::new(&mut store, "head", w.at(0), 3, config.spade_hidden, 1.0, &mut rng);
        AppearanceGenerator { config, stem, down, bottleneck, up, head, store }
    }

    pub fn check_geometry(&self, geom: ImageGeometry) -> Result<()> {
        geom.check_depth(self.config.depth)
    }

    /// All inputs are `[n, C, H, W]`; returns RGB in `[-1, 1]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, masked_person: Var<'t>, warped_cloth: Var<'t>, rep: Var<'t>, seg: Var<'t>) -> Var<'t> {
        let cond = Var::concat(&[seg, warped_cloth], 1);
        let mut h = self.stem.forward(p, Var::concat(&[masked_person, warped_cloth, rep], 1));
        let mut skips = vec![h];
        for d in &self.down {
            h = d.forward(p, h);
            skips.push(h);
        }
        skips.pop();
        for r in &self.bottleneck {
            h = r.forward(p, h);
        }
        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = block.forward(p, Var::concat(&[h.upsample_nearest(2), skip], 1), cond);
        }
        self.head.forward(p, h, cond).tanh()
    }

    pub fn predict(&self, masked_person: &Array, warped_cloth: &Array, rep: &Array, seg: &Array, precision: Precision) -> Array {
        let tape = Tape::with_precision(precision);
        let p = self.store.bind(&tape, false);
        let c = |a: &Array| tape.constant(a.clone());
        let out = self.forward(&p, c(masked_person), c(warped_cloth), c(rep), c(seg));
        (*out.value()).clone()
    }
}

/// Render one person. `seg` is the layout the output should follow.
pub fn appearance_forward(
    gen: &AppearanceGenerator,
    masked_person: &RgbImage,
    warped_cloth: &RgbImage,
    rep: &PersonRepresentation,
    seg: &SegMap,
) -> Result<RgbImage> {
    let g = masked_person.geometry();
    if warped_cloth.geometry() != g || rep.geometry() != g || seg.geometry() != g {
        return Err(TryonError::ShapeMismatch(format!(
            "masked person {:?}, warped cloth {:?}, representation {:?}, seg {:?}",
            g,
            warped_cloth.geometry(),
            rep.geometry(),
            seg.geometry()
        )));
    }
    gen.check_geometry(g)?;
    let out = gen.predict(
        &stack_chw([masked_person.data()]),
        &stack_chw([warped_cloth.data()]),
        &stack_chw([rep.data()]),
        &stack_chw([seg.data()]),
        Precision::F64,
    );
    RgbImage::from_clamped(unstack_chw(&out, 0))
}

/// Single-scale patch critic with spectrally normalised convolutions.
#[derive(Debug, Clone)]
struct PatchCritic {
    layers: Vec<Conv2d>,
    out: Conv2d,
}

impl PatchCritic {
    fn new(store: &mut ParamStore, name: &str, layers: usize, width: usize, rng: &mut impl Rng) -> Self {
        let mut c = APPEARANCE_DISC_CHANNELS;
        let convs = (0..layers)
            .map(|i| {
                let c_out = width << i;
                let spec = ConvSpec::new(c, c_out, 3).stride(2).spectral(true);
                c = c_out;
                Conv2d::new(store, &format!("{name}.layer{i}"), spec, lrelu_gain(), rng)
            })
            .collect();
        let out = Conv2d::new(store, &format!("{name}.out"), ConvSpec::new(c, 1, 3).spectral(true), 1.0, rng);
        PatchCritic { layers: convs, out }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> (Var<'t>, Vec<Var<'t>>) {
        let mut feats = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for l in &self.layers {
            h = l.forward(p, h).leaky_relu(LEAKY_SLOPE);
            feats.push(h);
        }
        (self.out.forward(p, h), feats)
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().chain(std::iter::once(&self.out))
    }
}

/// Patch scores and intermediate features at one scale.
pub struct ScaleOutput<'t> {
    pub score: Var<'t>,
    pub features: Vec<Var<'t>>,
}

/// `S` patch critics; scale `s` sees the input average-pooled by `2^s`.
#[derive(Debug, Clone)]
pub struct MultiScaleDiscriminator {
    critics: Vec<PatchCritic>,
    pub store: ParamStore,
}

impl MultiScaleDiscriminator {
    pub fn new(scales: usize, layers: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let critics = (0..scales).map(|s| PatchCritic::new(&mut store, &format!("scale{s}"), layers, width, &mut rng)).collect();
        MultiScaleDiscriminator { critics, store }
    }

    pub fn for_config(config: &AppearanceNetConfig, seed: u64) -> Self {
        Self::new(config.disc_scales, config.disc_layers, config.disc_width, seed)
    }

    pub fn scales(&self) -> usize {
        self.critics.len()
    }

    /// One critic on `x` `[n, 16, H, W]` (pooled to its scale here).
    pub fn forward_scale<'t>(&self, p: &Bound<'t>, scale: usize, x: Var<'t>) -> ScaleOutput<'t> {
        let (score, features) = self.critics[scale].forward(p, x.avg_pool(1 << scale));
        ScaleOutput { score, features }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Vec<ScaleOutput<'t>> {
        (0..self.scales()).map(|s| self.forward_scale(p, s, x)).collect()
    }

    /// Advance every power-iteration estimate.
    pub fn power_iterate(&mut self, iters: usize) {
        let convs: Vec<Conv2d> = self.critics.iter().flat_map(|c| c.convs().cloned()).collect();
        for c in convs {
            c.power_iterate(&mut self.store, iters);
        }
    }

    /// Every effective (normalised) weight, reshaped to `c_out x fan_in`.
    pub fn normalized_weights(&self) -> Vec<Array2<f64>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        self.critics
            .iter()
            .flat_map(|c| c.convs())
            .map(|c| {
                let w = c.effective_weight(&p).value();
                let rows = w.shape()[0];
                Array2::from_shape_vec((rows, w.len() / rows), w.iter().copied().collect()).expect("rows by fan-in")
            })
            .collect()
    }
}

/// Persistent singular-vector estimates for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerIteration {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl PowerIteration {
    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PowerIteration {
            u: unit((0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            v: unit((0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        }
    }

    /// One step, then the estimate `u^T W v`.
    pub fn step(&mut self, w: &Array2<f64>) -> f64 {
        self.v = unit(w.t().dot(&ndarray::Array1::from(self.u.clone())).to_vec());
        let wv = w.dot(&ndarray::Array1::from(self.v.clone()));
        self.u = unit(wv.to_vec());
        self.u.iter().zip(wv.iter()).map(|(a, b)| a * b).sum()
    }
}

/// `w / sigma` with `sigma` from one power-iteration step on `state`.
pub fn spectral_normalize(w: &Array2<f64>, state: &mut PowerIteration) -> Result<Array2<f64>> {
    if state.u.len() != w.nrows() || state.v.len() != w.ncols() {
        return Err(TryonError::ShapeMismatch(format!("state {}x{} for weight {:?}", state.u.len(), state.v.len(), w.dim())));
    }
    let sigma = state.step(w);
    Ok(if sigma > 1e-12 { w / sigma } else { w.clone() })
}

/// Largest singular value (SVD).
pub fn max_singular_value(w: &Array2<f64>) -> f64 {
    let m = DMatrix::from_row_iterator(w.nrows(), w.ncols(), w.iter().copied());
    m.singular_values().max()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppearanceLossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub beta: f64,
}

impl Default for AppearanceLossWeights {
    fn default() -> Self {
        AppearanceLossWeights { alpha1: 10.0, alpha2: 10.0, alpha3: 10.0, alpha4: 10.0, beta: 10.0 }
    }
}

impl AppearanceLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.beta];
        match all.iter().find(|w| !w.is_finite() || **w < 0.0) {
            Some(w) => Err(TryonError::InvalidGeometry(format!("loss weight {w} must be finite and non-negative"))),
            None => Ok(()),
        }
    }
}

/// Stage weight `1 / 2^s`.
pub fn stage_weight(stage: usize) -> f64 {
    0.5f64.powi(stage as i32)
}

/// `sum_s w_s * mean|phi_s(a) - phi_s(b)|`.
pub fn perceptual_loss<'t>(a: Var<'t>, b: Var<'t>, backbone: &dyn EmbeddingBackbone) -> Var<'t> {
    let fa = backbone.stages(a);
    let fb = backbone.stages(b);
    assert!(fa.len() >= 3, "perceptual loss needs at least three stages");
    fa.into_iter()
        .zip(fb)
        .enumerate()
        .map(|(s, (x, y))| (x - y).abs().mean() * stage_weight(s))
        .reduce(|acc, t| acc + t)
        .expect("non-empty")
}

/// Mean over scales of the per-layer mean absolute feature gap. Real
/// features are detached.
pub fn feature_matching_loss<'t>(real: &[Vec<Var<'t>>], fake: &[Vec<Var<'t>>]) -> Var<'t> {
    assert_eq!(real.len(), fake.len(), "one feature list per scale");
    assert!(!real.is_empty(), "at least one scale");
    let per_scale: Vec<Var<'t>> = real
        .iter()
        .zip(fake)
        .map(|(r, f)| {
            assert_eq!(r.len(), f.len(), "one feature per layer");
            r.iter().zip(f).map(|(r, f)| (*f - r.detach()).abs().mean()).reduce(|a, b| a + b).expect("at least one layer")
        })
        .collect();
    let n = per_scale.len() as f64;
    per_scale.into_iter().reduce(|a, b| a + b).expect("non-empty") / n
}

fn mean_of<'t>(terms: &[Var<'t>]) -> Var<'t> {
    let n = terms.len() as f64;
    terms.iter().copied().reduce(|a, b| a + b).expect("at least one scale") / n
}

#[allow(clippy::too_many_arguments)]
pub fn appearance_generator_loss<'t>(
    tps: Var<'t>,
    per_pixel: Var<'t>,
    percept: Var<'t>,
    feat: Var<'t>,
    d_fake: &[Var<'t>],
    w: &AppearanceLossWeights,
) -> Var<'t> {
    let adv = mean_of(&d_fake.iter().map(|d| d.mean()).collect::<Vec<_>>());
    tps * w.alpha1 + per_pixel * w.alpha2 + percept * w.alpha3 + feat * w.alpha4 - adv
}

/// Hinge terms and gradient penalties, each averaged over scales.
pub fn appearance_discriminator_loss<'t>(d_real: &[Var<'t>], d_fake: &[Var<'t>], gp: &[Var<'t>], w: &AppearanceLossWeights) -> Var<'t> {
    assert_eq!(d_real.len(), d_fake.len());
    let hinge: Vec<Var<'t>> = d_real.iter().zip(d_fake).map(|(r, f)| hinge_discriminator_loss(*r, *f)).collect();
    mean_of(&hinge) + mean_of(gp) * w.beta
}

/// Full-image mean absolute error.
pub fn image_l1<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    (a - b).abs().mean()
}

/// Network-ready tensors for stage two.
#[derive(Debug, Clone)]
pub struct AppearanceBatch {
    pub masked_person: Array,
    pub cloth: Array,
    pub rep: Array,
    /// Ground-truth layout during training.
    pub seg: Array,
    pub person: Array,
    pub worn: Array,
    /// `[n, 1, H, W]` top-clothes indicator.
    pub support: Array,
}

impl AppearanceBatch {
    pub fn from_samples(samples: &[&PreparedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(TryonError::InsufficientData("empty batch".into()));
        }
        let supports: Vec<Array3<f64>> = samples.iter().map(|s| worn_support(&s.sample.parse)).collect();
        Ok(AppearanceBatch {
            masked_person: stack_chw(samples.iter().map(|s| s.masked_person.data())),
            cloth: stack_chw(samples.iter().map(|s| s.sample.cloth.data())),
            rep: stack_chw(samples.iter().map(|s| s.rep.data())),
            seg: stack_chw(samples.iter().map(|s| s.seg.data())),
            person: stack_chw(samples.iter().map(|s| s.sample.person.data())),
            worn: stack_chw(samples.iter().map(|s| s.sample.worn_cloth.data())),
            support: stack_chw(&supports),
        })
    }

    pub fn len(&self) -> usize {
        self.person.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AppearanceLossReport {
    pub d_total: f64,
    pub d_hinge: f64,
    pub gp: f64,
    pub g_total: f64,
    pub tps: f64,
    pub per_pixel: f64,
    pub perceptual: f64,
    pub feature_matching: f64,
    pub adversarial: f64,
}

impl AppearanceLossReport {
    pub fn values(&self) -> [(&'static str, f64); 9] {
        [
            ("d_total", self.d_total),
            ("d_hinge", self.d_hinge),
            ("gp", self.gp),
            ("g_total", self.g_total),
            ("tps", self.tps),
            ("per_pixel", self.per_pixel),
            ("perceptual", self.perceptual),
            ("feature_matching", self.feature_matching),
            ("adversarial", self.adversarial),
        ]
    }
}

/// Generator, alignment network and critic, trained together.
#[derive(Debug, Clone)]
pub struct AppearanceTrainer {
    pub gen: AppearanceGenerator,
    pub align: AlignmentNet,
    pub disc: MultiScaleDiscriminator,
    pub backbone: Arc<dyn EmbeddingBackbone>,
    pub opt_g: Adam,
    pub opt_a: Adam,
    pub opt_d: Adam,
    pub weights: AppearanceLossWeights,
    pub use_gp: bool,
    pub precision: Precision,
}

impl AppearanceTrainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: AppearanceNetConfig,
        align_config: AlignmentConfig,
        geometry: ImageGeometry,
        backbone: Arc<dyn EmbeddingBackbone>,
        weights: AppearanceLossWeights,
        adam: AdamConfig,
        align_adam: AdamConfig,
        seed: u64,
    ) -> Result<Self> {
        weights.validate()?;
        let gen = AppearanceGenerator::new(config, seed);
        gen.check_geometry(geometry)?;
        let align = AlignmentNet::new(align_config, geometry, seed ^ 0xa11e)?;
        let disc = MultiScaleDiscriminator::for_config(&config, seed ^ 0xd15c);
        let opt_g = Adam::new(adam, &gen.store);
        let opt_a = Adam::new(align_adam, &align.store);
        let opt_d = Adam::new(adam, &disc.store);
        Ok(AppearanceTrainer { gen, align, disc, backbone, opt_g, opt_a, opt_d, weights, use_gp: true, precision: Precision::F32 })
    }

    /// Critic update, then a joint generator and alignment update.
    pub fn train_step(&mut self, batch: &AppearanceBatch, rng: &mut impl Rng) -> Result<AppearanceLossReport> {
        let n = batch.len();
        let mut report = AppearanceLossReport::default();
        let tape = Tape::with_precision(self.precision);
        let c = |a: &Array| tape.constant(a.clone());
        let pg = self.gen.store.bind(&tape, true);
        let pa = self.align.store.bind(&tape, true);
        let (person, seg) = (c(&batch.person), c(&batch.seg));
        let (_, warped) = self.align.forward_warp(&pa, c(&batch.rep), c(&batch.cloth));
        let fake = self.gen.forward(&pg, c(&batch.masked_person), warped, c(&batch.rep), seg);
        let (fake_v, warped_v) = ((*fake.value()).clone(), (*warped.value()).clone());

        self.disc.power_iterate(1);
        {
            let dtape = Tape::with_precision(self.precision);
            let pd = self.disc.store.bind(&dtape, true);
            let cond = Var::concat(&[dtape.constant(batch.seg.clone()), dtape.constant(warped_v)], 1);
            let (disc, pd_ref) = (&self.disc, &pd);
            let critic = |s: usize| move |img| disc.forward_scale(pd_ref, s, Var::concat(&[img, cond], 1)).score;
            let real = dtape.constant(batch.person.clone());
            let fake_c = dtape.constant(fake_v.clone());
            let mut d_real = Vec::new();
            let mut d_fake = Vec::new();
            let mut gps = Vec::new();
            let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            for s in 0..disc.scales() {
                d_real.push(critic(s)(real));
                d_fake.push(critic(s)(fake_c));
                gps.push(if self.use_gp { gradient_penalty(&dtape, critic(s), &batch.person, &fake_v, &u) } else { dtape.scalar(0.0) });
            }
            let loss = appearance_discriminator_loss(&d_real, &d_fake, &gps, &self.weights);
            report.d_hinge = mean_of(&d_real.iter().zip(&d_fake).map(|(r, f)| hinge_discriminator_loss(*r, *f)).collect::<Vec<_>>()).item();
            report.gp = mean_of(&gps).item();
            report.d_total = loss.item();
            check_finite(&[("d_total", report.d_total)])?;
            let grads = pd.grads(&dtape, loss);
            self.opt_d.update(&mut self.disc.store, &grads);
        }

        let pd = self.disc.store.bind(&tape, false);
        let fake_out = self.disc.forward(&pd, Var::concat(&[fake, seg, warped], 1));
        let real_feats: Vec<Vec<Var<'_>>> = tape.no_grad(|| {
            let cond = Var::concat(&[seg, warped.detach()], 1);
            self.disc.forward(&pd, Var::concat(&[person, cond], 1)).into_iter().map(|o| o.features).collect()
        });
        let fake_feats: Vec<Vec<Var<'_>>> = fake_out.iter().map(|o| o.features.clone()).collect();
        let d_fake: Vec<Var<'_>> = fake_out.iter().map(|o| o.score).collect();
        let tps = tps_loss(warped, c(&batch.worn), &batch.support);
        let per_pixel = image_l1(fake, person);
        let percept = perceptual_loss(fake, person, self.backbone.as_ref());
        let feat = feature_matching_loss(&real_feats, &fake_feats);
        let loss = appearance_generator_loss(tps, per_pixel, percept, feat, &d_fake, &self.weights);
        report.tps = tps.item();
        report.per_pixel = per_pixel.item();
        report.perceptual = percept.item();
        report.feature_matching = feat.item();
        report.adversarial = -mean_of(&d_fake.iter().map(|d| d.mean()).collect::<Vec<_>>()).item();
        report.g_total = loss.item();
        check_finite(&report.values())?;
        let grads = joint_grads(&tape, loss, &[&pg, &pa]);
        self.opt_g.update(&mut self.gen.store, &grads[0]);
        self.opt_a.update(&mut self.align.store, &grads[1]);
        Ok(report)
    }
}
