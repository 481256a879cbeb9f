//! Layers and functional building blocks.

use ndarray::IxDyn;
use rand::Rng;

use crate::params::{randn, zeros, Bound, ParamId, ParamStore};
use crate::tape::{Array, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Per-sample, per-channel normalisation over the spatial axes of an NCHW tensor.
pub fn instance_norm<'t>(x: Var<'t>, eps: f64) -> Var<'t> {
    let centered = x - x.mean_keep(&[2, 3]);
    let var = (centered * centered).mean_keep(&[2, 3]);
    centered / (var + eps).sqrt()
}

/// Numerically stable softmax along `axis`.
pub fn softmax<'t>(x: Var<'t>, axis: usize) -> Var<'t> {
    let v = x.value();
    let max = v.map_axis(ndarray::Axis(axis), |lane| lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
    let max = x.tape().constant(max.insert_axis(ndarray::Axis(axis)));
    let e = (x - max).exp();
    e / e.sum_keep(&[axis])
}

/// Scale vectors along `axis` to unit L2 norm.
pub fn l2_normalize<'t>(x: Var<'t>, axis: usize, eps: f64) -> Var<'t> {
    x / ((x * x).sum_keep(&[axis]) + eps).sqrt()
}

/// Power-iteration state for spectral normalisation of one weight.
#[derive(Debug, Clone, Copy)]
pub struct SpectralNorm {
    u: ParamId,
    v: ParamId,
}

fn normalize_vec(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

impl SpectralNorm {
    fn new(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let mut u = randn(&[rows], 1.0, rng);
        normalize_vec(u.as_slice_mut().unwrap());
        let mut v = randn(&[cols], 1.0, rng);
        normalize_vec(v.as_slice_mut().unwrap());
        SpectralNorm {
            u: store.add_buffer(&format!("{name}.sn_u"), u),
            v: store.add_buffer(&format!("{name}.sn_v"), v),
        }
    }

    /// Advance the persistent singular-vector estimates by `iters` steps.
    pub fn power_iterate(&self, store: &mut ParamStore, weight: ParamId, iters: usize) {
        let w = store.get(weight);
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        let wm: Vec<f64> = w.iter().copied().collect();
        let mut u: Vec<f64> = store.get(self.u).iter().copied().collect();
        let mut v: Vec<f64> = store.get(self.v).iter().copied().collect();
        for _ in 0..iters {
            v.iter_mut().for_each(|x| *x = 0.0);
            for r in 0..rows {
                let ur = u[r];
                for (vc, wv) in v.iter_mut().zip(&wm[r * cols..(r + 1) * cols]) {
                    *vc += wv * ur;
                }
            }
            normalize_vec(&mut v);
            for (r, ur) in u.iter_mut().enumerate() {
                *ur = wm[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            normalize_vec(&mut u);
        }
        *store.get_mut(self.u) = Array::from_shape_vec(IxDyn(&[rows]), u).unwrap();
        *store.get_mut(self.v) = Array::from_shape_vec(IxDyn(&[cols]), v).unwrap();
    }

    /// Current estimate of the largest singular value, `u^T W v`.
    pub fn sigma<'t>(&self, p: &Bound<'t>, w: Var<'t>) -> Var<'t> {
        let shape = w.shape();
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        let wm = w.reshape(&[rows, cols]);
        let v = p[self.v].reshape(&[cols, 1]);
        let u = p[self.u].reshape(&[rows, 1]);
        (wm.matmul(v) * u).sum()
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, w: Var<'t>) -> Var<'t> {
        w / self.sigma(p, w)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub spectral: Option<SpectralNorm>,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
    pub spectral: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        ConvSpec { c_in, c_out, kernel, stride: 1, bias: true, spectral: false }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn spectral(mut self, on: bool) -> Self {
        self.spectral = on;
        self
    }
}

impl Conv2d {
    /// He-style initialisation scaled by `gain`.
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, gain: f64, rng: &mut impl Rng) -> Self {
        let fan_in = spec.c_in * spec.kernel * spec.kernel;
        let std = gain / (fan_in as f64).sqrt();
        let weight = store.add(
            &format!("{name}.weight"),
            randn(&[spec.c_out, spec.c_in, spec.kernel, spec.kernel], std, rng),
        );
        let bias = spec.bias.then(|| store.add(&format!("{name}.bias"), zeros(&[spec.c_out])));
        let spectral = spec
            .spectral
            .then(|| SpectralNorm::new(store, name, spec.c_out, fan_in, rng));
        Conv2d { weight, bias, stride: spec.stride, pad: spec.kernel / 2, spectral }
    }

    pub fn effective_weight<'t>(&self, p: &Bound<'t>) -> Var<'t> {
        let w = p[self.weight];
        match &self.spectral {
            Some(sn) => sn.apply(p, w),
            None => w,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let y = x.conv2d(self.effective_weight(p), self.stride, self.pad);
        match self.bias {
            Some(b) => {
                let c = y.shape()[1];
                y + p[b].reshape(&[1, c, 1, 1])
            }
            None => y,
        }
    }

    pub fn power_iterate(&self, store: &mut ParamStore, iters: usize) {
        if let Some(sn) = &self.spectral {
            sn.power_iterate(store, self.weight, iters);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        Linear {
            weight: store.add(&format!("{name}.weight"), randn(&[d_in, d_out], std, rng)),
            bias: store.add(&format!("{name}.bias"), zeros(&[d_out])),
        }
    }

    /// `x`: `[n, d_in]` -> `[n, d_out]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(p[self.weight]) + p[self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;

    #[test]
    fn instance_norm_moments() {
        let tape = Tape::new();
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let x = tape.constant(randn(&[2, 3, 5, 4], 2.0, &mut rng) + 1.5);
        let y = instance_norm(x, 1e-5).value();
        for n in 0..2 {
            for c in 0..3 {
                let plane: Vec<f64> = (0..5).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| y[[n, c, i, j]]).collect();
                let m = plane.iter().sum::<f64>() / 20.0;
                let v = plane.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 20.0;
                assert!(m.abs() < 1e-10);
                assert!((v - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let x = tape.constant(randn(&[2, 10, 3, 3], 5.0, &mut rng));
        let s = softmax(x, 1).value();
        for n in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let sum: f64 = (0..10).map(|c| s[[n, c, i, j]]).sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
