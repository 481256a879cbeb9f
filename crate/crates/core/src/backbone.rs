//! Image feature extractors used by the perceptual loss and the metrics.

use std::fmt::Debug;

use ndarray::{s, Array2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tryon_tensor::{softmax, Adam, AdamConfig, Array, Conv2d, ConvSpec, Linear, ParamStore, Precision, Tape, Var, LEAKY_SLOPE};

use crate::error::{Result, TryonError};
use crate::nets::lrelu_gain;

/// Feature extractor with a classification head.
///
/// Images are `[n, 3, H, W]` batches in `[-1, 1]`.
pub trait EmbeddingBackbone: Debug + Send + Sync {
    fn name(&self) -> &str;
    fn embed_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Differentiable intermediate activations, shallowest first.
    fn stages<'t>(&self, x: Var<'t>) -> Vec<Var<'t>>;
    /// `[n, embed_dim]` features.
    fn embed(&self, images: &Array) -> Array2<f64>;
    /// `[n, num_classes]` probability rows.
    fn classify(&self, images: &Array) -> Array2<f64>;
}

/// Images per forward pass when embedding large sets.
const CHUNK: usize = 32;

/// A fixed-seed convolutional tower that is never trained, with a linear
/// probe on its pooled features.
#[derive(Debug, Clone)]
pub struct RandomConvBackbone {
    convs: Vec<Conv2d>,
    probe: Linear,
    store: ParamStore,
    probe_store: ParamStore,
    embed_dim: usize,
}

pub const RANDOM_CONV_NAME: &str = "random-conv";

impl RandomConvBackbone {
    /// Three stride-2 stages of widths `embed_dim / 4, embed_dim / 2, embed_dim`.
    pub fn new(embed_dim: usize, num_classes: usize, seed: u64) -> Self {
        assert!(embed_dim >= 4 && num_classes >= 2, "backbone needs k >= 4 and C >= 2");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = [3, embed_dim / 4, embed_dim / 2, embed_dim];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&mut store, &format!("stage{i}"), ConvSpec::new(w[0], w[1], 3).stride(2), lrelu_gain(), &mut rng))
            .collect();
        let mut probe_store = ParamStore::new();
        let probe = Linear::new(&mut probe_store, "probe", embed_dim, num_classes, 0.01, &mut rng);
        RandomConvBackbone { convs, probe, store, probe_store, embed_dim }
    }

    /// The default desk-scale backbone (`k = 64`, 10 classes, seed 0).
    pub fn standard() -> Self {
        Self::new(64, 10, 0)
    }

    fn pooled<'t>(&self, x: Var<'t>) -> Var<'t> {
        let last = *self.stages(x).last().expect("three stages");
        let n = last.shape()[0];
        last.mean_keep(&[2, 3]).reshape(&[n, self.embed_dim])
    }

    fn chunked(&self, images: &Array, cols: usize, f: impl Fn(&Array) -> Array) -> Array2<f64> {
        let n = images.shape()[0];
        let mut out = Array2::zeros((n, cols));
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let part = images.slice_axis(Axis(0), (start..end).into()).to_owned();
            let v = f(&part);
            out.slice_mut(s![start..end, ..]).assign(&v.into_shape_with_order((end - start, cols)).expect("rows by cols"));
        }
        out
    }

    /// Fit the linear probe to `labels` by cross-entropy on frozen features.
    pub fn fit_probe(&mut self, images: &Array, labels: &[usize], steps: usize, lr: f64) -> Result<f64> {
        let n = images.shape()[0];
        if n == 0 || labels.len() != n {
            return Err(TryonError::InsufficientData(format!("{n} images, {} labels", labels.len())));
        }
        let c = self.num_classes();
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(TryonError::ShapeMismatch(format!("label {l} with {c} classes")));
        }
        let feats = self.embed(images);
        let feats = Array::from_shape_vec(IxDyn(&[n, self.embed_dim]), feats.into_iter().collect()).expect("n by k");
        let onehot = Array::from_shape_fn(IxDyn(&[n, c]), |i| if labels[i[0]] == i[1] { 1.0 } else { 0.0 });
        let mut opt = Adam::new(AdamConfig { lr, beta1: 0.9, ..Default::default() }, &self.probe_store);
        let mut loss = f64::NAN;
        for _ in 0..steps {
            let tape = Tape::new();
            let p = self.probe_store.bind(&tape, true);
            let probs = softmax(self.probe.forward(&p, tape.constant(feats.clone())), 1);
            let l = -(tape.constant(onehot.clone()) * probs.clamp(1e-12, 1.0).ln()).sum() / n as f64;
            loss = l.item();
            let grads = p.grads(&tape, l);
            opt.update(&mut self.probe_store, &grads);
        }
        Ok(loss)
    }
}

impl EmbeddingBackbone for RandomConvBackbone {
    fn name(&self) -> &str {
        RANDOM_CONV_NAME
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn num_classes(&self) -> usize {
        self.probe_store.get(self.probe.bias).len()
    }

    fn stages<'t>(&self, x: Var<'t>) -> Vec<Var<'t>> {
        let p = self.store.bind(x.tape(), false);
        let mut h = x;
        self.convs
            .iter()
            .map(|c| {
                h = c.forward(&p, h).leaky_relu(LEAKY_SLOPE);
                h
            })
            .collect()
    }

    fn embed(&self, images: &Array) -> Array2<f64> {
        self.chunked(images, self.embed_dim, |part| {
            let tape = Tape::with_precision(Precision::F32);
            let v = tape.no_grad(|| self.pooled(tape.constant(part.clone())).value());
            (*v).clone()
        })
    }

    fn classify(&self, images: &Array) -> Array2<f64> {
        let c = self.num_classes();
        self.chunked(images, c, |part| {
            let tape = Tape::with_precision(Precision::F32);
            let p = self.probe_store.bind(&tape, false);
            let v = tape.no_grad(|| softmax(self.probe.forward(&p, self.pooled(tape.constant(part.clone()))), 1).value());
            (*v).clone()
        })
    }
}

/// Look a backbone up by its CLI name.
pub fn backbone_by_name(name: &str) -> Result<RandomConvBackbone> {
    match name {
        RANDOM_CONV_NAME => Ok(RandomConvBackbone::standard()),
        other => Err(TryonError::Unsupported(format!("backbone {other:?}; available: {RANDOM_CONV_NAME}"))),
    }
}
