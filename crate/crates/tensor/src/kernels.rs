//! Raw slice kernels behind the differentiable ops.
//!
//! Everything here works on contiguous NCHW buffers. Batch-level loops go
//! through [`for_each_chunk`] / [`map_reduce`], which fan out over rayon when
//! the `parallel` feature is enabled and run sequentially otherwise.

use std::cell::RefCell;

/// Precision used for the matrix products inside convolutions and matmuls.
///
/// Values are always stored as `f64`. `F32` converts the GEMM operands to
/// `f32`, which roughly doubles throughput and is what the training loops use;
/// gradient checks run with `F64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

pub(crate) trait Scalar: Copy + Default + Send + Sync + 'static {
    /// Per-thread pool of reusable buffers.
    fn pool() -> &'static std::thread::LocalKey<RefCell<Vec<Vec<Self>>>>;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// `c = alpha * a @ b + beta * c` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f64 {
    fn pool() -> &'static std::thread::LocalKey<RefCell<Vec<Vec<Self>>>> {
        thread_local!(static POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) });
        &POOL
    }
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f32 {
    fn pool() -> &'static std::thread::LocalKey<RefCell<Vec<Vec<Self>>>> {
        thread_local!(static POOL: RefCell<Vec<Vec<f32>>> = const { RefCell::new(Vec::new()) });
        &POOL
    }
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Run `f` on a scratch buffer of `len` values with unspecified contents.
///
/// Buffers come from a per-thread pool, so the large im2col matrices are not
/// reallocated and zeroed on every call.
fn with_scratch<T: Scalar, R>(len: usize, f: impl FnOnce(&mut [T]) -> R) -> R {
    let mut buf = T::pool().with(|p| p.borrow_mut().pop()).unwrap_or_default();
    if buf.len() < len {
        buf.resize(len, T::default());
    }
    let r = f(&mut buf[..len]);
    T::pool().with(|p| p.borrow_mut().push(buf));
    r
}

fn convert_into<T: Scalar>(src: &[f64], dst: &mut [T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = T::from_f64(s));
}

#[cfg(feature = "parallel")]
static PARALLEL: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(true);

/// Switch batch loops between rayon and a plain loop at runtime (process-wide).
/// Builds without the `parallel` feature are always sequential.
pub fn set_parallel(enabled: bool) {
    #[cfg(feature = "parallel")]
    PARALLEL.store(enabled, std::sync::atomic::Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = enabled;
}

pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    return PARALLEL.load(std::sync::atomic::Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    false
}

/// Run `f(index, chunk)` over consecutive `chunk_len` pieces of `out`.
pub(crate) fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Sum of `f(i)` over `0..n`, each producing a buffer of `len` values.
pub(crate) fn map_reduce<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if n > 1 && parallel_enabled() {
            return (0..n)
                .into_par_iter()
                .fold(
                    || vec![0.0; len],
                    |mut acc, i| {
                        f(i, &mut acc);
                        acc
                    },
                )
                .reduce(
                    || vec![0.0; len],
                    |mut a, b| {
                        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                        a
                    },
                );
        }
    }
    let mut acc = vec![0.0; len];
    for i in 0..n {
        f(i, &mut acc);
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.out_h() * self.out_w()
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies in `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let ow = g.out_w();
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

fn input_row(g: &ConvGeom, oy: usize, ki: usize) -> Option<usize> {
    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
    (iy >= 0 && iy < g.h as isize).then_some(iy as usize)
}

fn im2col<T: Scalar>(x: &[f64], g: &ConvGeom, col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    let Some(iy) = input_row(g, oy, ki) else {
                        drow.fill(T::default());
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    drow[..lo].fill(T::default());
                    drow[hi..].fill(T::default());
                    if g.stride == 1 {
                        let off = lo + kj - g.pad;
                        for (d, &s) in drow[lo..hi].iter_mut().zip(&src[off..off + hi - lo]) {
                            *d = T::from_f64(s);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = T::from_f64(src[ox * g.stride + kj - g.pad]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Pixel-major variant of [`im2col`]: `col` is `[p, k]`.
fn im2col_rows<T: Scalar>(x: &[f64], g: &ConvGeom, col: &mut [T]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.k());
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut col[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
            let ix0 = (ox * g.stride) as isize - g.pad as isize;
            let mut r = 0;
            for c in 0..g.c_in {
                let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let seg = &mut dst[r..r + g.kw];
                    r += g.kw;
                    let Some(iy) = input_row(g, oy, ki) else {
                        seg.fill(T::default());
                        continue;
                    };
                    let row = &plane[iy * g.w..(iy + 1) * g.w];
                    if ix0 >= 0 && ix0 as usize + g.kw <= g.w {
                        for (d, &v) in seg.iter_mut().zip(&row[ix0 as usize..]) {
                            *d = T::from_f64(v);
                        }
                    } else {
                        for (kj, d) in seg.iter_mut().enumerate() {
                            let ix = ix0 + kj as isize;
                            *d = if ix >= 0 && (ix as usize) < g.w { T::from_f64(row[ix as usize]) } else { T::default() };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    x.fill(0.0);
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let Some(iy) = input_row(g, oy, ki) else { continue };
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let off = lo + kj - g.pad;
                        for (d, s) in drow[off..off + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += s.to_f64();
                        }
                    } else {
                        for ox in lo..hi {
                            drow[ox * g.stride + kj - g.pad] += srow[ox].to_f64();
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn convert<T: Scalar>(src: &[f64]) -> Vec<T> {
    src.iter().map(|&v| T::from_f64(v)).collect()
}

fn conv_forward_t<T: Scalar>(x: &[f64], w: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let w_t: Vec<T> = convert(w);
    let mut out = vec![0.0; n * g.c_out * p];
    for_each_chunk(&mut out, g.c_out * p, |i, out_n| {
        let xn = &x[i * g.c_in * g.h * g.w..(i + 1) * g.c_in * g.h * g.w];
        with_scratch(k * p, |col: &mut [T]| {
            if g.is_pointwise() {
                convert_into(xn, col);
            } else {
                im2col(xn, g, col);
            }
            with_scratch(g.c_out * p, |o: &mut [T]| {
                // o = W (c_out x k) @ col (k x p)
                unsafe {
                    T::gemm(
                        g.c_out,
                        k,
                        p,
                        w_t.as_ptr(),
                        k as isize,
                        1,
                        col.as_ptr(),
                        p as isize,
                        1,
                        T::default(),
                        o.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
                out_n.iter_mut().zip(o.iter()).for_each(|(d, s)| *d = s.to_f64());
            });
        });
    });
    out
}

fn conv_input_grad_t<T: Scalar>(gy: &[f64], w: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let w_t: Vec<T> = convert(w);
    let mut gx = vec![0.0; n * g.c_in * g.h * g.w];
    for_each_chunk(&mut gx, g.c_in * g.h * g.w, |i, gx_n| {
        with_scratch(g.c_out * p, |gy_n: &mut [T]| {
            convert_into(&gy[i * g.c_out * p..(i + 1) * g.c_out * p], gy_n);
            with_scratch(k * p, |col: &mut [T]| {
                // col = W^T (k x c_out) @ gy (c_out x p)
                unsafe {
                    T::gemm(
                        k,
                        g.c_out,
                        p,
                        w_t.as_ptr(),
                        1,
                        k as isize,
                        gy_n.as_ptr(),
                        p as isize,
                        1,
                        T::default(),
                        col.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
                if g.is_pointwise() {
                    gx_n.iter_mut().zip(col.iter()).for_each(|(d, s)| *d = s.to_f64());
                } else {
                    col2im(col, g, gx_n);
                }
            });
        });
    });
    gx
}

fn conv_weight_grad_t<T: Scalar>(x: &[f64], gy: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    map_reduce(n, g.c_out * k, |i, acc| {
        let xn = &x[i * g.c_in * g.h * g.w..(i + 1) * g.c_in * g.h * g.w];
        with_scratch(g.c_out * p, |gy_n: &mut [T]| {
            convert_into(&gy[i * g.c_out * p..(i + 1) * g.c_out * p], gy_n);
            with_scratch(k * p, |col_t: &mut [T]| {
                // gw = gy (c_out x p) @ col^T (p x k)
                let (rsb, csb) = if g.is_pointwise() {
                    convert_into(xn, col_t);
                    (1, p as isize)
                } else {
                    im2col_rows(xn, g, col_t);
                    (k as isize, 1)
                };
                with_scratch(g.c_out * k, |gw: &mut [T]| {
                    unsafe {
                        T::gemm(
                            g.c_out,
                            p,
                            k,
                            gy_n.as_ptr(),
                            p as isize,
                            1,
                            col_t.as_ptr(),
                            rsb,
                            csb,
                            T::default(),
                            gw.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    acc.iter_mut().zip(gw.iter()).for_each(|(a, s)| *a += s.to_f64());
                });
            });
        });
    })
}

pub fn conv_forward(prec: Precision, x: &[f64], w: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    match prec {
        Precision::F64 => conv_forward_t::<f64>(x, w, n, g),
        Precision::F32 => conv_forward_t::<f32>(x, w, n, g),
    }
}

pub fn conv_input_grad(prec: Precision, gy: &[f64], w: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    match prec {
        Precision::F64 => conv_input_grad_t::<f64>(gy, w, n, g),
        Precision::F32 => conv_input_grad_t::<f32>(gy, w, n, g),
    }
}

pub fn conv_weight_grad(prec: Precision, x: &[f64], gy: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    match prec {
        Precision::F64 => conv_weight_grad_t::<f64>(x, gy, n, g),
        Precision::F32 => conv_weight_grad_t::<f32>(x, gy, n, g),
    }
}

fn bmm_t<T: Scalar>(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for_each_chunk(&mut out, m * n, |i, out_i| {
        let a_i: Vec<T> = convert(&a[i * m * k..(i + 1) * m * k]);
        let b_i: Vec<T> = convert(&b[i * k * n..(i + 1) * k * n]);
        let mut o = vec![T::default(); m * n];
        unsafe {
            T::gemm(
                m,
                k,
                n,
                a_i.as_ptr(),
                k as isize,
                1,
                b_i.as_ptr(),
                n as isize,
                1,
                T::default(),
                o.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out_i.iter_mut().zip(&o).for_each(|(d, s)| *d = s.to_f64());
    });
    out
}

/// Batched row-major matrix product `[batch, m, k] @ [batch, k, n]`.
pub fn bmm(prec: Precision, a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    match prec {
        Precision::F64 => bmm_t::<f64>(a, b, batch, m, k, n),
        Precision::F32 => bmm_t::<f32>(a, b, batch, m, k, n),
    }
}

/// Nearest-neighbour upsampling of `[planes, h, w]` by an integer factor.
pub fn upsample_nearest(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; planes * oh * ow];
    for_each_chunk(&mut out, oh * ow, |pl, o| {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for y in 0..oh {
            let srow = &src[(y / f) * w..(y / f + 1) * w];
            let orow = &mut o[y * ow..(y + 1) * ow];
            for (xx, v) in orow.iter_mut().enumerate() {
                *v = srow[xx / f];
            }
        }
    });
    out
}

/// Sum over non-overlapping `f x f` blocks; the adjoint of [`upsample_nearest`].
pub fn sum_pool(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0; planes * oh * ow];
    for_each_chunk(&mut out, oh * ow, |pl, o| {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for y in 0..oh * f {
            let srow = &src[y * w..(y + 1) * w];
            let orow = &mut o[(y / f) * ow..(y / f + 1) * ow];
            for (xx, v) in srow[..ow * f].iter().enumerate() {
                orow[xx / f] += v;
            }
        }
    });
    out
}

/// Bilinear sampling geometry for one normalized coordinate (align-corners
/// convention, border padding).
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
    /// d(pixel coordinate)/d(normalized coordinate), zero where clamped.
    dscale: f64,
}

#[inline]
fn tap(coord: f64, size: usize) -> Tap {
    let scale = (size as f64 - 1.0) / 2.0;
    let p = (coord + 1.0) * scale;
    let maxp = size as f64 - 1.0;
    let (pc, dscale) = if p < 0.0 {
        (0.0, 0.0)
    } else if p > maxp {
        (maxp, 0.0)
    } else {
        (p, scale)
    };
    if size == 1 {
        return Tap { i0: 0, i1: 0, frac: 0.0, dscale: 0.0 };
    }
    let mut i0 = pc.floor() as usize;
    if i0 >= size - 1 {
        i0 = size - 2;
    }
    Tap { i0, i1: i0 + 1, frac: pc - i0 as f64, dscale }
}

/// `img`: `[n, c, h, w]`; `grid`: `[n, oh, ow, 2]` holding (x, y) in [-1, 1].
#[allow(clippy::too_many_arguments)]
pub fn grid_sample(img: &[f64], grid: &[f64], n: usize, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * oh * ow];
    for_each_chunk(&mut out, c * oh * ow, |b, o| {
        let im = &img[b * c * h * w..(b + 1) * c * h * w];
        let gr = &grid[b * oh * ow * 2..(b + 1) * oh * ow * 2];
        for q in 0..oh * ow {
            let tx = tap(gr[2 * q], w);
            let ty = tap(gr[2 * q + 1], h);
            for ch in 0..c {
                let pl = &im[ch * h * w..(ch + 1) * h * w];
                let v00 = pl[ty.i0 * w + tx.i0];
                let v01 = pl[ty.i0 * w + tx.i1];
                let v10 = pl[ty.i1 * w + tx.i0];
                let v11 = pl[ty.i1 * w + tx.i1];
                let top = v00 + (v01 - v00) * tx.frac;
                let bot = v10 + (v11 - v10) * tx.frac;
                o[ch * oh * ow + q] = top + (bot - top) * ty.frac;
            }
        }
    });
    out
}

/// Adjoint of [`grid_sample`] with respect to the image (scatter-add).
#[allow(clippy::too_many_arguments)]
pub fn grid_sample_adjoint(gy: &[f64], grid: &[f64], n: usize, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * h * w];
    for_each_chunk(&mut out, c * h * w, |b, o| {
        let g = &gy[b * c * oh * ow..(b + 1) * c * oh * ow];
        let gr = &grid[b * oh * ow * 2..(b + 1) * oh * ow * 2];
        for q in 0..oh * ow {
            let tx = tap(gr[2 * q], w);
            let ty = tap(gr[2 * q + 1], h);
            for ch in 0..c {
                let v = g[ch * oh * ow + q];
                let pl = &mut o[ch * h * w..(ch + 1) * h * w];
                pl[ty.i0 * w + tx.i0] += v * (1.0 - tx.frac) * (1.0 - ty.frac);
                pl[ty.i0 * w + tx.i1] += v * tx.frac * (1.0 - ty.frac);
                pl[ty.i1 * w + tx.i0] += v * (1.0 - tx.frac) * ty.frac;
                pl[ty.i1 * w + tx.i1] += v * tx.frac * ty.frac;
            }
        }
    });
    out
}

/// Gradient of `sum(gy * grid_sample(img, grid))` with respect to the grid.
#[allow(clippy::too_many_arguments)]
pub fn grid_sample_grid_grad(img: &[f64], grid: &[f64], gy: &[f64], n: usize, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * oh * ow * 2];
    for_each_chunk(&mut out, oh * ow * 2, |b, o| {
        let im = &img[b * c * h * w..(b + 1) * c * h * w];
        let g = &gy[b * c * oh * ow..(b + 1) * c * oh * ow];
        let gr = &grid[b * oh * ow * 2..(b + 1) * oh * ow * 2];
        for q in 0..oh * ow {
            let tx = tap(gr[2 * q], w);
            let ty = tap(gr[2 * q + 1], h);
            let (mut dx, mut dy) = (0.0, 0.0);
            for ch in 0..c {
                let pl = &im[ch * h * w..(ch + 1) * h * w];
                let v00 = pl[ty.i0 * w + tx.i0];
                let v01 = pl[ty.i0 * w + tx.i1];
                let v10 = pl[ty.i1 * w + tx.i0];
                let v11 = pl[ty.i1 * w + tx.i1];
                let gv = g[ch * oh * ow + q];
                dx += gv * ((v01 - v00) * (1.0 - ty.frac) + (v11 - v10) * ty.frac);
                dy += gv * ((v10 - v00) * (1.0 - tx.frac) + (v11 - v01) * tx.frac);
            }
            o[2 * q] = dx * tx.dscale;
            o[2 * q + 1] = dy * ty.dscale;
        }
    });
    out
}
