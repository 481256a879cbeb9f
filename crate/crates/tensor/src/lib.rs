//! tryon-tensor: a compact reverse-mode autodiff engine for NCHW image
//! networks.
//!
//! Values are `f64` ndarrays recorded on a [`Tape`]. Backward rules are built
//! from the same differentiable ops, so gradients of gradients are available
//! (used by gradient penalties). Convolutions run as im2col + GEMM; with the
//! `parallel` feature (default) batch elements are processed on rayon's pool.

pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use kernels::Precision;
pub use nn::{instance_norm, l2_normalize, softmax, Conv2d, ConvSpec, Linear, SpectralNorm, LEAKY_SLOPE};
pub use optim::{Adam, AdamConfig};
pub use params::{joint_grads, randn, zeros, Bound, ParamId, ParamKind, ParamStore};
pub use tape::{Array, Tape, Var};

/// Central finite-difference gradient of `f` at `x` with step `h`.
///
/// Used by gradient checks throughout the workspace.
pub fn numeric_grad(x: &Array, h: f64, mut f: impl FnMut(&Array) -> f64) -> Array {
    let mut probe = x.clone();
    let mut g = Array::zeros(x.raw_dim());
    for i in 0..x.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + h;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - h;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// `||a - b|| / max(||a||, ||b||)`, the error measure used by gradient checks.
pub fn relative_error(a: &Array, b: &Array) -> f64 {
    let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}
