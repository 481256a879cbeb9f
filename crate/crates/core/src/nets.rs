//! Layer blocks shared by the generators and discriminators.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tryon_tensor::{instance_norm, Bound, Conv2d, ConvSpec, ParamStore, Var, LEAKY_SLOPE};

pub const NORM_EPS: f64 = 1e-5;

/// He gain for leaky-ReLU activations.
pub fn lrelu_gain() -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

/// Channel widths of an encoder-decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Widths {
    pub base: usize,
    pub max: usize,
}

impl Widths {
    /// Channels at encoder level `i` (level 0 is full resolution).
    pub fn at(&self, level: usize) -> usize {
        (self.base << level.min(16)).min(self.max)
    }
}

/// Convolution, optional instance norm, optional leaky ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    norm: bool,
    act: bool,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, norm: bool, act: bool, rng: &mut impl Rng) -> Self {
        let spec = if norm { spec.no_bias() } else { spec };
        let gain = if act { lrelu_gain() } else { 1.0 };
        ConvBlock { conv: Conv2d::new(store, name, spec, gain, rng), norm, act }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let mut y = self.conv.forward(p, x);
        if self.norm {
            y = instance_norm(y, NORM_EPS);
        }
        if self.act {
            y = y.leaky_relu(LEAKY_SLOPE);
        }
        y
    }
}

/// `x + IN(conv(lrelu(IN(conv(x)))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    first: ConvBlock,
    second: ConvBlock,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            first: ConvBlock::new(store, &format!("{name}.0"), ConvSpec::new(channels, channels, 3), true, true, rng),
            second: ConvBlock::new(store, &format!("{name}.1"), ConvSpec::new(channels, channels, 3), true, false, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x + self.second.forward(p, self.first.forward(p, x))
    }
}
