//! Wengert-list autodiff.
//!
//! Every op is evaluated eagerly and appended to a [`Tape`]. Backward rules are
//! themselves written with tape ops, so [`Tape::grad`] with `create_graph =
//! true` yields gradients that can be differentiated again (needed for
//! gradient penalties). With `create_graph = false` the backward pass records
//! constants only.

use std::cell::{Cell, RefCell};
use std::ops;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::kernels::{self, ConvGeom, Precision};

pub type Array = ArrayD<f64>;

#[derive(Clone)]
enum Op {
    Const,
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    MaskMul(usize, Rc<Array>),
    LeakyRelu(usize, f64),
    Abs(usize),
    Clamp(usize, f64, f64),
    SumTo(usize),
    BroadcastTo(usize),
    Reshape(usize),
    TransposeLast2(usize),
    MatMul(usize, usize),
    Concat(Vec<usize>, usize),
    Narrow { src: usize, axis: usize, start: usize },
    Embed { src: usize, axis: usize, start: usize },
    Conv { x: usize, w: usize, stride: usize, pad: usize },
    ConvInputGrad { gy: usize, w: usize, stride: usize, pad: usize },
    ConvWeightGrad { x: usize, gy: usize, stride: usize, pad: usize },
    Upsample(usize, usize),
    SumPool(usize, usize),
    GridSample { img: usize, grid: usize },
    GridSampleAdjoint { gy: usize, grid: usize },
    /// First-order only: differentiating through this node panics.
    Terminal(&'static str, Vec<usize>),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Const | Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | Shift(a) | Exp(a) | Log(a) | Sqrt(a) | Tanh(a) | MaskMul(a, _)
            | LeakyRelu(a, _) | Abs(a) | Clamp(a, _, _) | SumTo(a) | BroadcastTo(a) | Reshape(a)
            | TransposeLast2(a) | Upsample(a, _) | SumPool(a, _) => vec![*a],
            Concat(v, _) => v.clone(),
            Narrow { src, .. } | Embed { src, .. } => vec![*src],
            Conv { x, w, .. } => vec![*x, *w],
            ConvInputGrad { gy, w, .. } => vec![*gy, *w],
            ConvWeightGrad { x, gy, .. } => vec![*x, *gy],
            GridSample { img, grid } => vec![*img, *grid],
            GridSampleAdjoint { gy, grid } => vec![*gy, *grid],
            Terminal(_, v) => v.clone(),
        }
    }
}

struct Node {
    value: Rc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: Cell<bool>,
    precision: Cell<Precision>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            grad_enabled: Cell::new(true),
            precision: Cell::new(Precision::F64),
        }
    }

    pub fn with_precision(precision: Precision) -> Self {
        let t = Self::new();
        t.precision.set(precision);
        t
    }

    pub fn precision(&self) -> Precision {
        self.precision.get()
    }

    pub fn set_precision(&self, p: Precision) {
        self.precision.set(p);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn var(&self, value: Array) -> Var<'_> {
        self.push_raw(Rc::new(value), Op::Leaf, true)
    }

    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push_raw(Rc::new(value), Op::Const, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array::from_elem(IxDyn(&[]), v))
    }

    /// Run `f` without recording gradient information.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.grad_enabled.replace(false);
        let r = f();
        self.grad_enabled.set(prev);
        r
    }

    fn push_raw(&self, value: Rc<Array>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Array, op: Op) -> Var<'_> {
        let rg = self.grad_enabled.get() && {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        let op = if rg { op } else { Op::Const };
        self.push_raw(Rc::new(value), op, rg)
    }

    fn value_of(&self, id: usize) -> Rc<Array> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn at(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of `sum(out)` with respect to each of `wrt`.
    ///
    /// Returns `None` for inputs `out` does not depend on. With `create_graph`
    /// the returned gradients are themselves differentiable.
    pub fn grad<'t>(&'t self, out: Var<'t>, wrt: &[Var<'t>], create_graph: bool) -> Vec<Option<Var<'t>>> {
        let prev = self.grad_enabled.replace(create_graph);
        let min_id = wrt.iter().map(|v| v.id).min().unwrap_or(0);
        let mut grads: Vec<Option<Var<'t>>> = vec![None; out.id + 1];
        if self.requires_grad(out.id) {
            let seed = Array::ones(IxDyn(out.value().shape()));
            grads[out.id] = Some(self.constant(seed));
        }
        for id in (min_id..=out.id).rev() {
            let Some(g) = grads[id] else { continue };
            let op = {
                let nodes = self.nodes.borrow();
                if !nodes[id].requires_grad {
                    continue;
                }
                nodes[id].op.clone()
            };
            for (p, gp) in self.backward(id, &op, g) {
                grads[p] = Some(match grads[p] {
                    Some(acc) => acc + gp,
                    None => gp,
                });
            }
        }
        self.grad_enabled.set(prev);
        wrt.iter().map(|v| grads.get(v.id).copied().flatten()).collect()
    }

    fn backward<'t>(&'t self, id: usize, op: &Op, g: Var<'t>) -> Vec<(usize, Var<'t>)> {
        use Op::*;
        let need = |p: usize| self.requires_grad(p);
        let shape = |p: usize| self.value_of(p).shape().to_vec();
        let out = self.at(id);
        let mut res = Vec::with_capacity(2);
        match op {
            Const | Leaf => {}
            Add(a, b) => {
                if need(*a) {
                    res.push((*a, g.sum_to(&shape(*a))));
                }
                if need(*b) {
                    res.push((*b, g.sum_to(&shape(*b))));
                }
            }
            Sub(a, b) => {
                if need(*a) {
                    res.push((*a, g.sum_to(&shape(*a))));
                }
                if need(*b) {
                    res.push((*b, (-g).sum_to(&shape(*b))));
                }
            }
            Mul(a, b) => {
                let (va, vb) = (self.at(*a), self.at(*b));
                if need(*a) {
                    res.push((*a, (g * vb).sum_to(&shape(*a))));
                }
                if need(*b) {
                    res.push((*b, (g * va).sum_to(&shape(*b))));
                }
            }
            Div(a, b) => {
                let vb = self.at(*b);
                if need(*a) {
                    res.push((*a, (g / vb).sum_to(&shape(*a))));
                }
                if need(*b) {
                    res.push((*b, (-(g * out) / vb).sum_to(&shape(*b))));
                }
            }
            Neg(a) => res.push((*a, -g)),
            Scale(a, c) => res.push((*a, g * *c)),
            Shift(a) => res.push((*a, g)),
            Exp(a) => res.push((*a, g * out)),
            Log(a) => res.push((*a, g / self.at(*a))),
            Sqrt(a) => res.push((*a, (g / out) * 0.5)),
            Tanh(a) => res.push((*a, g * (1.0 - out * out))),
            MaskMul(a, m) => res.push((*a, g.mask_mul(m.clone()))),
            LeakyRelu(a, s) => {
                let s = *s;
                let m = self.value_of(*a).mapv(|v| if v > 0.0 { 1.0 } else { s });
                res.push((*a, g.mask_mul(Rc::new(m))));
            }
            Abs(a) => {
                let m = self.value_of(*a).mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                res.push((*a, g.mask_mul(Rc::new(m))));
            }
            Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let m = self.value_of(*a).mapv(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 });
                res.push((*a, g.mask_mul(Rc::new(m))));
            }
            SumTo(a) => res.push((*a, g.broadcast_to(&shape(*a)))),
            BroadcastTo(a) => res.push((*a, g.sum_to(&shape(*a)))),
            Reshape(a) => res.push((*a, g.reshape(&shape(*a)))),
            TransposeLast2(a) => res.push((*a, g.transpose_last2())),
            MatMul(a, b) => {
                if need(*a) {
                    res.push((*a, g.matmul(self.at(*b).transpose_last2())));
                }
                if need(*b) {
                    res.push((*b, self.at(*a).transpose_last2().matmul(g)));
                }
            }
            Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value_of(p).shape()[*axis];
                    if need(p) {
                        res.push((p, g.narrow(*axis, start, len)));
                    }
                    start += len;
                }
            }
            Narrow { src, axis, start } => {
                let full = shape(*src)[*axis];
                res.push((*src, g.embed(*axis, *start, full)));
            }
            Embed { src, axis, start } => {
                let len = shape(*src)[*axis];
                res.push((*src, g.narrow(*axis, *start, len)));
            }
            Conv { x, w, stride, pad } => {
                let (vx, vw) = (self.at(*x), self.at(*w));
                if need(*x) {
                    res.push((*x, g.conv_input_grad(vw, &shape(*x), *stride, *pad)));
                }
                if need(*w) {
                    res.push((*w, vx.conv_weight_grad(g, &shape(*w), *stride, *pad)));
                }
            }
            ConvInputGrad { gy, w, stride, pad } => {
                if need(*gy) {
                    res.push((*gy, g.conv2d(self.at(*w), *stride, *pad)));
                }
                if need(*w) {
                    res.push((*w, g.conv_weight_grad(self.at(*gy), &shape(*w), *stride, *pad)));
                }
            }
            ConvWeightGrad { x, gy, stride, pad } => {
                if need(*x) {
                    res.push((*x, self.at(*gy).conv_input_grad(g, &shape(*x), *stride, *pad)));
                }
                if need(*gy) {
                    res.push((*gy, self.at(*x).conv2d(g, *stride, *pad)));
                }
            }
            Upsample(a, f) => res.push((*a, g.sum_pool(*f))),
            SumPool(a, f) => res.push((*a, g.upsample_nearest(*f))),
            GridSample { img, grid } => {
                let (vi, vg) = (self.at(*img), self.at(*grid));
                if need(*img) {
                    res.push((*img, g.grid_sample_adjoint(vg, &shape(*img))));
                }
                if need(*grid) {
                    res.push((*grid, grid_sample_grid_grad(vi, vg, g)));
                }
            }
            GridSampleAdjoint { gy, grid } => {
                if need(*grid) {
                    panic!("second-order gradients through grid sampling are not supported");
                }
                if need(*gy) {
                    res.push((*gy, g.grid_sample(self.at(*grid))));
                }
            }
            Terminal(what, _) => panic!("cannot differentiate through {what}"),
        }
        res
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// `(outer, mid, inner)` when `small`, left-padded with ones to the rank of
/// `big`, is all ones except for one run of axes equal to `big`'s.
fn block_pattern(big: &[usize], small: &[usize]) -> Option<(usize, usize, usize)> {
    if small.len() > big.len() {
        return None;
    }
    let pad = big.len() - small.len();
    let s: Vec<usize> = std::iter::repeat_n(1, pad).chain(small.iter().copied()).collect();
    let Some(first) = s.iter().position(|&d| d != 1) else {
        return Some((1, 1, big.iter().product()));
    };
    let last = s.iter().rposition(|&d| d != 1).unwrap();
    if (first..=last).any(|i| s[i] != big[i]) {
        return None;
    }
    Some((big[..first].iter().product(), big[first..=last].iter().product(), big[last + 1..].iter().product()))
}

fn broadcast_binary(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    if let (Some(x), Some(y)) = (a.as_slice(), b.as_slice()) {
        if a.shape() == b.shape() {
            return from_vec(a.shape(), x.iter().zip(y).map(|(&x, &y)| f(x, y)).collect());
        }
        if let Some((o, m, i)) = block_pattern(a.shape(), b.shape()) {
            let mut out = Vec::with_capacity(x.len());
            for oo in 0..o {
                for (mm, &bv) in y.iter().enumerate().take(m) {
                    let base = (oo * m + mm) * i;
                    out.extend(x[base..base + i].iter().map(|&x| f(x, bv)));
                }
            }
            return from_vec(a.shape(), out);
        }
        if let Some((o, m, i)) = block_pattern(b.shape(), a.shape()) {
            let mut out = Vec::with_capacity(y.len());
            for oo in 0..o {
                for (mm, &av) in x.iter().enumerate().take(m) {
                    let base = (oo * m + mm) * i;
                    out.extend(y[base..base + i].iter().map(|&y| f(av, y)));
                }
            }
            return from_vec(b.shape(), out);
        }
    }
    let rank = a.ndim().max(b.ndim());
    let dims = |s: &[usize]| -> Vec<usize> { std::iter::repeat_n(1, rank - s.len()).chain(s.iter().copied()).collect() };
    let (da, db) = (dims(a.shape()), dims(b.shape()));
    let shape: Vec<usize> = da
        .iter()
        .zip(&db)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {:?} with {:?}", a.shape(), b.shape());
            x.max(y)
        })
        .collect();
    let av = a.broadcast(IxDyn(&shape)).unwrap();
    let bv = b.broadcast(IxDyn(&shape)).unwrap();
    ndarray::Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

fn reduce_to(a: &Array, target: &[usize]) -> Array {
    if a.shape() == target {
        return a.clone();
    }
    assert!(a.ndim() >= target.len(), "cannot reduce {:?} to {:?}", a.shape(), target);
    if let (Some(x), Some((o, m, i))) = (a.as_slice(), block_pattern(a.shape(), target)) {
        let mut out = vec![0.0; m];
        for oo in 0..o {
            for (mm, acc) in out.iter_mut().enumerate() {
                let base = (oo * m + mm) * i;
                *acc += x[base..base + i].iter().sum::<f64>();
            }
        }
        return from_vec(target, out);
    }
    let mut r = a.clone();
    for _ in 0..a.ndim() - target.len() {
        r = r.sum_axis(Axis(0));
    }
    for (ax, &t) in target.iter().enumerate() {
        if t == 1 && r.shape()[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    assert_eq!(r.shape(), target, "incompatible reduction");
    r
}

fn contiguous(a: &Array) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

fn from_vec(shape: &[usize], v: Vec<f64>) -> Array {
    Array::from_shape_vec(IxDyn(shape), v).expect("shape/data length mismatch")
}

fn dims4(a: &Array) -> [usize; 4] {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected an NCHW tensor, got {:?}", s);
    [s[0], s[1], s[2], s[3]]
}

fn grid_sample_grid_grad<'t>(img: Var<'t>, grid: Var<'t>, g: Var<'t>) -> Var<'t> {
    let t = img.tape;
    let (vi, vg, gv) = (img.value(), grid.value(), g.value());
    let [n, c, h, w] = dims4(&vi);
    let gs = vg.shape();
    let out = kernels::grid_sample_grid_grad(&contiguous(&vi), &contiguous(&vg), &contiguous(&gv), n, c, h, w, gs[1], gs[2]);
    t.push(from_vec(gs, out), Op::Terminal("grid-sample grid gradient", vec![img.id, grid.id, g.id]))
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single element of a scalar (or one-element) value.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.push_raw(self.value(), Op::Const, false)
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value().mapv(f);
        self.tape.push(v, op)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(move |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(move |v| v.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    /// Elementwise product with a constant (broadcastable) array.
    pub fn mask_mul(self, mask: Rc<Array>) -> Var<'t> {
        let v = broadcast_binary(&self.value(), &mask, |x, m| x * m);
        self.tape.push(v, Op::MaskMul(self.id, mask))
    }

    /// Sum down to `shape` (inverse of numpy-style broadcasting).
    pub fn sum_to(self, shape: &[usize]) -> Var<'t> {
        if self.value().shape() == shape {
            return self;
        }
        let v = reduce_to(&self.value(), shape);
        self.tape.push(v, Op::SumTo(self.id))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t> {
        if self.value().shape() == shape {
            return self;
        }
        let v = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast to {:?}", shape))
            .to_owned();
        self.tape.push(v, Op::BroadcastTo(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        self.sum_to(&[])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum() * (1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keep(self, axes: &[usize]) -> Var<'t> {
        let mut s = self.shape();
        for &a in axes {
            s[a] = 1;
        }
        self.sum_to(&s)
    }

    pub fn mean_keep(self, axes: &[usize]) -> Var<'t> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_keep(axes) * (1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        if v.shape() == shape {
            return self;
        }
        let data = contiguous(&v).into_owned();
        self.tape.push(from_vec(shape, data), Op::Reshape(self.id))
    }

    pub fn transpose_last2(self) -> Var<'t> {
        let v = self.value();
        let nd = v.ndim();
        let mut t = v.view();
        t.swap_axes(nd - 2, nd - 1);
        let out = t.as_standard_layout().into_owned();
        self.tape.push(out, Op::TransposeLast2(self.id))
    }

    /// `[b, m, k] @ [b, k, n]`; rank-2 operands are treated as `b = 1`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let rank2 = a.ndim() == 2;
        let (sa, sb) = if rank2 {
            assert_eq!(b.ndim(), 2);
            ([1, a.shape()[0], a.shape()[1]], [1, b.shape()[0], b.shape()[1]])
        } else {
            assert_eq!(a.ndim(), 3);
            assert_eq!(b.ndim(), 3);
            ([a.shape()[0], a.shape()[1], a.shape()[2]], [b.shape()[0], b.shape()[1], b.shape()[2]])
        };
        assert_eq!(sa[0], sb[0], "matmul batch mismatch");
        assert_eq!(sa[2], sb[1], "matmul inner dimension mismatch");
        let out = kernels::bmm(self.tape.precision(), &contiguous(&a), &contiguous(&b), sa[0], sa[1], sa[2], sb[2]);
        let shape: Vec<usize> = if rank2 { vec![sa[1], sb[2]] } else { vec![sa[0], sa[1], sb[2]] };
        self.tape.push(from_vec(&shape, out), Op::MatMul(self.id, other.id))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let vals: Vec<Rc<Array>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        tape.push(out.as_standard_layout().into_owned(), Op::Concat(parts.iter().map(|p| p.id).collect(), axis))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self.value();
        if start == 0 && len == v.shape()[axis] {
            return self;
        }
        let out = v.slice_axis(Axis(axis), Slice::from(start..start + len)).as_standard_layout().into_owned();
        self.tape.push(out, Op::Narrow { src: self.id, axis, start })
    }

    /// Zero-padded placement along `axis` into length `full`.
    pub fn embed(self, axis: usize, start: usize, full: usize) -> Var<'t> {
        let v = self.value();
        let mut shape = v.shape().to_vec();
        let len = shape[axis];
        if start == 0 && len == full {
            return self;
        }
        shape[axis] = full;
        let mut out = Array::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(&*v);
        self.tape.push(out, Op::Embed { src: self.id, axis, start })
    }

    /// Cross-correlation with zero padding. `self`: `[n, c, h, w]`,
    /// `weight`: `[c_out, c, kh, kw]`.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let [n, c, h, wd] = dims4(&x);
        let [co, ci, kh, kw] = dims4(&w);
        assert_eq!(c, ci, "conv2d channel mismatch: input {c}, weight {ci}");
        let g = ConvGeom { c_in: c, h, w: wd, c_out: co, kh, kw, stride, pad };
        let out = kernels::conv_forward(self.tape.precision(), &contiguous(&x), &contiguous(&w), n, &g);
        self.tape.push(
            from_vec(&[n, co, g.out_h(), g.out_w()], out),
            Op::Conv { x: self.id, w: weight.id, stride, pad },
        )
    }

    fn conv_input_grad(self, weight: Var<'t>, x_shape: &[usize], stride: usize, pad: usize) -> Var<'t> {
        let (gy, w) = (self.value(), weight.value());
        let [co, ci, kh, kw] = dims4(&w);
        let g = ConvGeom { c_in: ci, h: x_shape[2], w: x_shape[3], c_out: co, kh, kw, stride, pad };
        let out = kernels::conv_input_grad(self.tape.precision(), &contiguous(&gy), &contiguous(&w), x_shape[0], &g);
        self.tape.push(from_vec(x_shape, out), Op::ConvInputGrad { gy: self.id, w: weight.id, stride, pad })
    }

    fn conv_weight_grad(self, gy: Var<'t>, w_shape: &[usize], stride: usize, pad: usize) -> Var<'t> {
        let (x, g) = (self.value(), gy.value());
        let [n, c, h, wd] = dims4(&x);
        let geom = ConvGeom { c_in: c, h, w: wd, c_out: w_shape[0], kh: w_shape[2], kw: w_shape[3], stride, pad };
        let out = kernels::conv_weight_grad(self.tape.precision(), &contiguous(&x), &contiguous(&g), n, &geom);
        self.tape.push(from_vec(w_shape, out), Op::ConvWeightGrad { x: self.id, gy: gy.id, stride, pad })
    }

    pub fn upsample_nearest(self, factor: usize) -> Var<'t> {
        if factor == 1 {
            return self;
        }
        let v = self.value();
        let [n, c, h, w] = dims4(&v);
        let out = kernels::upsample_nearest(&contiguous(&v), n * c, h, w, factor);
        self.tape.push(from_vec(&[n, c, h * factor, w * factor], out), Op::Upsample(self.id, factor))
    }

    /// Block sum over `factor x factor` windows (spatial dims must divide).
    pub fn sum_pool(self, factor: usize) -> Var<'t> {
        if factor == 1 {
            return self;
        }
        let v = self.value();
        let [n, c, h, w] = dims4(&v);
        assert!(h % factor == 0 && w % factor == 0, "sum_pool: {h}x{w} not divisible by {factor}");
        let out = kernels::sum_pool(&contiguous(&v), n * c, h, w, factor);
        self.tape.push(from_vec(&[n, c, h / factor, w / factor], out), Op::SumPool(self.id, factor))
    }

    pub fn avg_pool(self, factor: usize) -> Var<'t> {
        if factor == 1 {
            return self;
        }
        self.sum_pool(factor) * (1.0 / (factor * factor) as f64)
    }

    /// Bilinear sampling with border padding. `grid`: `[n, oh, ow, 2]` of
    /// normalized `(x, y)` in `[-1, 1]` (align-corners convention).
    pub fn grid_sample(self, grid: Var<'t>) -> Var<'t> {
        let (img, gr) = (self.value(), grid.value());
        let [n, c, h, w] = dims4(&img);
        let gs = gr.shape();
        assert!(gs.len() == 4 && gs[0] == n && gs[3] == 2, "bad sampling grid {:?}", gs);
        let out = kernels::grid_sample(&contiguous(&img), &contiguous(&gr), n, c, h, w, gs[1], gs[2]);
        self.tape.push(from_vec(&[n, c, gs[1], gs[2]], out), Op::GridSample { img: self.id, grid: grid.id })
    }

    fn grid_sample_adjoint(self, grid: Var<'t>, img_shape: &[usize]) -> Var<'t> {
        let (gy, gr) = (self.value(), grid.value());
        let gs = gr.shape();
        let out = kernels::grid_sample_adjoint(
            &contiguous(&gy),
            &contiguous(&gr),
            img_shape[0],
            img_shape[1],
            img_shape[2],
            img_shape[3],
            gs[1],
            gs[2],
        );
        self.tape.push(from_vec(img_shape, out), Op::GridSampleAdjoint { gy: self.id, grid: grid.id })
    }
}

fn binary<'t>(a: Var<'t>, b: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
    let (va, vb) = (a.value(), b.value());
    let out = broadcast_binary(&va, &vb, f);
    a.tape.push(out, op)
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        binary(self, rhs, |a, b| a + b, Op::Add(self.id, rhs.id))
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        binary(self, rhs, |a, b| a - b, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        binary(self, rhs, |a, b| a * b, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        binary(self, rhs, |a, b| a / b, Op::Div(self.id, rhs.id))
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(|v| -v, Op::Neg(self.id))
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.unary(move |v| v * c, Op::Scale(self.id, c))
    }
}

impl<'t> ops::Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self * (1.0 / c)
    }
}

impl<'t> ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.unary(move |v| v + c, Op::Shift(self.id))
    }
}

impl<'t> ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self + (-c)
    }
}

impl<'t> ops::Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, v: Var<'t>) -> Var<'t> {
        -v + self
    }
}

impl<'t> ops::Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, v: Var<'t>) -> Var<'t> {
        v + self
    }
}

impl<'t> ops::Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v * self
    }
}
