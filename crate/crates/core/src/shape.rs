//! Stage one: predict the post-transfer segmentation layout.

use ndarray::{Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tryon_tensor::{softmax, Adam, AdamConfig, Array, Bound, Conv2d, ConvSpec, ParamStore, Precision, Tape, Var};

use crate::data::{label, stack_chw, unstack_chw, ImageGeometry, PersonRepresentation, RgbImage, SegMap, NUM_LABELS, PERSON_REP_CHANNELS};
use crate::error::{Result, TryonError};
use crate::masking::{MaskRegion, MaskedSegMap};
use crate::nets::{ConvBlock, ResBlock, Widths};
use crate::sample::PreparedSample;

/// Masked segmentation, person representation and garment.
pub const SHAPE_INPUT_CHANNELS: usize = NUM_LABELS + PERSON_REP_CHANNELS + 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeNetConfig {
    pub depth: usize,
    pub widths: Widths,
    pub res_blocks: usize,
    pub disc_layers: usize,
    pub disc_width: usize,
}

impl Default for ShapeNetConfig {
    fn default() -> Self {
        ShapeNetConfig { depth: 3, widths: Widths { base: 32, max: 256 }, res_blocks: 4, disc_layers: 3, disc_width: 32 }
    }
}

/// U-Net style encoder-decoder with a softmax head over the 10 labels.
#[derive(Debug, Clone)]
pub struct ShapeGenerator {
    pub config: ShapeNetConfig,
    stem: ConvBlock,
    down: Vec<ConvBlock>,
    bottleneck: Vec<ResBlock>,
    up: Vec<(ConvBlock, ResBlock)>,
    head: Conv2d,
    pub store: ParamStore,
}

impl ShapeGenerator {
    pub fn new(config: ShapeNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.widths;
        let stem = ConvBlock::new(&mut store, "stem", ConvSpec::new(SHAPE_INPUT_CHANNELS, w.at(0), 3), true, true, &mut rng);
        let down = (1..=config.depth)
            .map(|l| {
                let spec = ConvSpec::new(w.at(l - 1), w.at(l), 3).stride(2);
                ConvBlock::new(&mut store, &format!("down{l}"), spec, true, true, &mut rng)
            })
            .collect();
        let bottleneck = (0..config.res_blocks)
            .map(|i| ResBlock::new(&mut store, &format!("res{i}"), w.at(config.depth), &mut rng))
            .collect();
        let up = (1..=config.depth)
            .rev()
            .map(|l| {
                let spec = ConvSpec::new(w.at(l) + w.at(l - 1), w.at(l - 1), 3);
                let conv = ConvBlock::new(&mut store, &format!("up{l}"), spec, true, true, &mut rng);
                let res = ResBlock::new(&mut store, &format!("up{l}.res"), w.at(l - 1), &mut rng);
                (conv, res)
            })
            .collect();
        let head = Conv2d::new(&mut store, "head", ConvSpec::new(w.at(0), NUM_LABELS, 1), 1.0, &mut rng);
        ShapeGenerator { config, stem, down, bottleneck, up, head, store }
    }

    pub fn check_geometry(&self, geom: ImageGeometry) -> Result<()> {
        geom.check_depth(self.config.depth)
    }

    /// `x`: `[n, 31, H, W]` -> soft segmentation `[n, 10, H, W]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let mut h = self.stem.forward(p, x);
        let mut skips = vec![h];
        for d in &self.down {
            h = d.forward(p, h);
            skips.push(h);
        }
        skips.pop();
        for r in &self.bottleneck {
            h = r.forward(p, h);
        }
        for (conv, res) in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = Var::concat(&[h.upsample_nearest(2), skip], 1);
            h = res.forward(p, conv.forward(p, h));
        }
        softmax(self.head.forward(p, h), 1)
    }

    /// Inference on a batch of inputs.
    pub fn predict(&self, input: &Array) -> Array {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let out = self.forward(&p, tape.constant(input.clone()));
        (*out.value()).clone()
    }
}

/// Stack the three stage-one inputs channel-wise.
pub fn shape_input(mseg: &MaskedSegMap, rep: &PersonRepresentation, cloth: &RgbImage) -> Result<ndarray::Array3<f64>> {
    if rep.geometry() != mseg.geometry || cloth.geometry() != mseg.geometry {
        return Err(TryonError::ShapeMismatch(format!(
            "masked seg {:?}, representation {:?}, cloth {:?}",
            mseg.geometry,
            rep.geometry(),
            cloth.geometry()
        )));
    }
    Ok(ndarray::concatenate(Axis(0), &[mseg.data.view(), rep.data().view(), cloth.data().view()]).expect("same spatial size"))
}

/// Predict the soft post-transfer segmentation for one person/garment pair.
pub fn shape_forward(gen: &ShapeGenerator, mseg: &MaskedSegMap, rep: &PersonRepresentation, cloth: &RgbImage) -> Result<SegMap> {
    gen.check_geometry(mseg.geometry)?;
    let x = shape_input(mseg, rep, cloth)?;
    let out = gen.predict(&stack_chw([&x]));
    SegMap::new(unstack_chw(&out, 0))
}

/// Keep the source layout everywhere except masked pixels whose source label
/// is maskable; those take the hardened prediction.
pub fn compose_shape(pred: &SegMap, source: &SegMap, region: &MaskRegion) -> SegMap {
    let g = source.geometry();
    let mut out = source.data().clone();
    for ((r, c), &m) in region.region_mask.indexed_iter() {
        if m && label::MASKABLE.contains(&source.label_at(r, c)) {
            let l = pred.label_at(r, c) as usize;
            for k in 0..NUM_LABELS {
                out[[k, r, c]] = if k == l { 1.0 } else { 0.0 };
            }
        }
    }
    debug_assert_eq!(out.shape(), &[NUM_LABELS, g.height, g.width]);
    SegMap::new(out).expect("same shape as source")
}

/// PatchGAN critic over `concat(segmentation, stage-one input)`.
#[derive(Debug, Clone)]
pub struct ShapeDiscriminator {
    layers: Vec<ConvBlock>,
    out: Conv2d,
    pub store: ParamStore,
}

impl ShapeDiscriminator {
    pub fn new(n_layers: usize, width: usize, in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(n_layers);
        let mut c = in_channels;
        for i in 0..n_layers {
            let c_out = width << i;
            let spec = ConvSpec::new(c, c_out, 3).stride(2);
            layers.push(ConvBlock::new(&mut store, &format!("layer{i}"), spec, i > 0, true, &mut rng));
            c = c_out;
        }
        let out = Conv2d::new(&mut store, "out", ConvSpec::new(c, 1, 3), 1.0, &mut rng);
        ShapeDiscriminator { layers, out, store }
    }

    pub fn for_config(config: &ShapeNetConfig, seed: u64) -> Self {
        Self::new(config.disc_layers, config.disc_width, NUM_LABELS + SHAPE_INPUT_CHANNELS, seed)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Patch-score grid size for an `h x w` input.
    pub fn patch_grid(&self, h: usize, w: usize) -> (usize, usize) {
        (0..self.layers.len()).fold((h, w), |(h, w), _| (h.div_ceil(2), w.div_ceil(2)))
    }

    /// Raw patch scores `[n, 1, h', w']`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let h = self.layers.iter().fold(x, |h, l| l.forward(p, h));
        self.out.forward(p, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeLossWeights {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Default for ShapeLossWeights {
    fn default() -> Self {
        ShapeLossWeights { gamma1: 15.0, gamma2: 20.0, gamma3: 10.0 }
    }
}

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-8;

/// Pixel-wise cross-entropy, averaged over pixels (and the batch).
pub fn parsing_loss<'t>(pred: Var<'t>, gt: Var<'t>) -> Var<'t> {
    let s = pred.shape();
    let pixels = (s[0] * s[2] * s[3]) as f64;
    -(gt * pred.clamp(PROB_FLOOR, 1.0).ln()).sum() / pixels
}

/// Summed absolute error over masked pixels divided by the masked-pixel
/// count, per sample, then averaged. `mask`: `[n, 1, H, W]` of 0/1.
/// Samples with an empty mask contribute 0.
pub fn per_pixel_loss<'t>(pred: Var<'t>, gt: Var<'t>, mask: &Array) -> Var<'t> {
    let s = pred.shape();
    let n = s[0];
    let counts: Vec<f64> = mask.axis_iter(Axis(0)).map(|m| m.sum()).collect();
    let full_mask = mask.broadcast(IxDyn(&s)).expect("mask broadcasts over channels").to_owned();
    let per_sample = (pred - gt).abs().mask_mul(full_mask.into()).sum_keep(&[1, 2, 3]);
    let inv = Array::from_shape_fn(IxDyn(&[n, 1, 1, 1]), |i| if counts[i[0]] > 0.0 { 1.0 / counts[i[0]] } else { 0.0 });
    (per_sample * pred.tape().constant(inv)).mean()
}

/// `mean(max(0, 1 - D(real))) + mean(max(0, 1 + D(fake)))`.
pub fn hinge_discriminator_loss<'t>(d_real: Var<'t>, d_fake: Var<'t>) -> Var<'t> {
    (1.0 - d_real).relu().mean() + (1.0 + d_fake).relu().mean()
}

/// `E[(||grad_x D(x)|| - 1)^2]` at `x = u real + (1 - u) fake`, one `u` per
/// sample. The result is differentiable with respect to the critic's
/// parameters.
pub fn gradient_penalty<'t>(tape: &'t Tape, critic: impl Fn(Var<'t>) -> Var<'t>, real: &Array, fake: &Array, u: &[f64]) -> Var<'t> {
    assert_eq!(real.shape(), fake.shape(), "real and fake batches differ in shape");
    let n = real.shape()[0];
    assert_eq!(u.len(), n, "one interpolation weight per sample");
    let mut mix = fake.clone();
    for (i, mut m) in mix.axis_iter_mut(Axis(0)).enumerate() {
        let r = real.index_axis(Axis(0), i);
        m.zip_mut_with(&r, |f, &r| *f = u[i] * r + (1.0 - u[i]) * *f);
    }
    let x = tape.var(mix);
    let d = critic(x).sum();
    let Some(g) = tape.grad(d, &[x], true)[0] else {
        // a critic that ignores its input has zero gradient everywhere
        return tape.scalar(1.0);
    };
    let axes: Vec<usize> = (1..real.ndim()).collect();
    let norm = ((g * g).sum_keep(&axes) + 1e-16).sqrt();
    (norm - 1.0).square().mean()
}

pub fn shape_generator_loss<'t>(parsing: Var<'t>, per_pixel: Var<'t>, d_fake: Var<'t>, w: &ShapeLossWeights) -> Var<'t> {
    parsing * w.gamma1 + per_pixel * w.gamma2 - d_fake.mean()
}

pub fn shape_discriminator_loss<'t>(d_real: Var<'t>, d_fake: Var<'t>, gp: Var<'t>, w: &ShapeLossWeights) -> Var<'t> {
    hinge_discriminator_loss(d_real, d_fake) + gp * w.gamma3
}

/// Network-ready tensors for a batch of prepared samples.
#[derive(Debug, Clone)]
pub struct ShapeBatch {
    /// `[n, 31, H, W]`.
    pub input: Array,
    /// Ground-truth one-hot layout `[n, 10, H, W]`.
    pub target: Array,
    /// Masked region `[n, 1, H, W]`.
    pub mask: Array,
}

impl ShapeBatch {
    pub fn from_samples(samples: &[&PreparedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(TryonError::InsufficientData("empty batch".into()));
        }
        let inputs = samples
            .iter()
            .map(|s| shape_input(&s.masked, &s.rep, &s.sample.cloth))
            .collect::<Result<Vec<_>>>()?;
        let masks: Vec<_> = samples.iter().map(|s| s.masked.region.as_f64().insert_axis(Axis(0))).collect();
        Ok(ShapeBatch {
            input: stack_chw(&inputs),
            target: stack_chw(samples.iter().map(|s| s.seg.data())),
            mask: stack_chw(&masks),
        })
    }

    pub fn len(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every loss term of one alternating update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeLossReport {
    pub d_total: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub gp: f64,
    pub g_total: f64,
    pub parsing: f64,
    pub per_pixel: f64,
    pub adversarial: f64,
}

impl ShapeLossReport {
    pub fn values(&self) -> [(&'static str, f64); 8] {
        [
            ("d_total", self.d_total),
            ("d_real", self.d_real),
            ("d_fake", self.d_fake),
            ("gp", self.gp),
            ("g_total", self.g_total),
            ("parsing", self.parsing),
            ("per_pixel", self.per_pixel),
            ("adversarial", self.adversarial),
        ]
    }
}

pub(crate) fn check_finite(values: &[(&'static str, f64)]) -> Result<()> {
    match values.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, v)) => Err(TryonError::TrainingDiverged(format!("{name} = {v}"))),
        None => Ok(()),
    }
}

/// Generator, critic and their optimizers.
#[derive(Debug, Clone)]
pub struct ShapeTrainer {
    pub gen: ShapeGenerator,
    pub disc: ShapeDiscriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub weights: ShapeLossWeights,
    pub use_gp: bool,
    pub precision: Precision,
}

impl ShapeTrainer {
    pub fn new(config: ShapeNetConfig, weights: ShapeLossWeights, adam: AdamConfig, seed: u64) -> Self {
        let gen = ShapeGenerator::new(config, seed);
        let disc = ShapeDiscriminator::for_config(&config, seed ^ 0x5eed_d15c);
        let opt_g = Adam::new(adam, &gen.store);
        let opt_d = Adam::new(adam, &disc.store);
        ShapeTrainer { gen, disc, opt_g, opt_d, weights, use_gp: true, precision: Precision::F32 }
    }

    /// One critic update followed by one generator update.
    pub fn train_step(&mut self, batch: &ShapeBatch, rng: &mut impl Rng) -> Result<ShapeLossReport> {
        let n = batch.len();
        let mut report = ShapeLossReport::default();

        // The generator forward pass is shared: its detached output feeds the
        // critic update, and the updated critic then scores it for the
        // generator loss on the same tape.
        let tape = Tape::with_precision(self.precision);
        let pg = self.gen.store.bind(&tape, true);
        let input = tape.constant(batch.input.clone());
        let target = tape.constant(batch.target.clone());
        let pred = self.gen.forward(&pg, input);
        let fake = (*pred.value()).clone();

        {
            let dtape = Tape::with_precision(self.precision);
            let pd = self.disc.store.bind(&dtape, true);
            let cond = dtape.constant(batch.input.clone());
            let critic = |seg| self.disc.forward(&pd, Var::concat(&[seg, cond], 1));
            let d_real = critic(dtape.constant(batch.target.clone()));
            let d_fake = critic(dtape.constant(fake.clone()));
            let gp = if self.use_gp {
                let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
                gradient_penalty(&dtape, critic, &batch.target, &fake, &u)
            } else {
                dtape.scalar(0.0)
            };
            let loss = shape_discriminator_loss(d_real, d_fake, gp, &self.weights);
            report.d_real = (1.0 - d_real).relu().mean().item();
            report.d_fake = (1.0 + d_fake).relu().mean().item();
            report.gp = gp.item();
            report.d_total = loss.item();
            check_finite(&[("d_total", report.d_total)])?;
            let grads = pd.grads(&dtape, loss);
            self.opt_d.update(&mut self.disc.store, &grads);
        }

        let pd = self.disc.store.bind(&tape, false);
        let d_fake = self.disc.forward(&pd, Var::concat(&[pred, input], 1));
        let parsing = parsing_loss(pred, target);
        let per_pixel = per_pixel_loss(pred, target, &batch.mask);
        let loss = shape_generator_loss(parsing, per_pixel, d_fake, &self.weights);
        report.parsing = parsing.item();
        report.per_pixel = per_pixel.item();
        report.adversarial = -d_fake.mean().item();
        report.g_total = loss.item();
        check_finite(&report.values())?;
        let grads = pg.grads(&tape, loss);
        self.opt_g.update(&mut self.gen.store, &grads);
        Ok(report)
    }
}
