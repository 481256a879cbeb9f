use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tryon_tensor::{instance_norm, l2_normalize, numeric_grad, randn, relative_error, softmax, Array, Tape, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Check d f(x) / dx against central differences.
fn check(x: Array, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) -> f64 {
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let y = f(xv);
    let g = tape.grad(y.sum(), &[xv], false)[0].expect("gradient").value();
    let num = numeric_grad(&x, 1e-5, |p| {
        let t = Tape::new();
        f(t.constant(p.clone())).value().sum()
    });
    relative_error(&g, &num)
}

/// Check the gradient of `sum(grad(f)(x) * w)` (a Hessian-vector product).
fn check_second_order(x: Array, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) -> f64 {
    let w = randn(x.shape(), 1.0, &mut rng(99));
    let hvp = |p: &Array| -> (f64, Array) {
        let t = Tape::new();
        let xv = t.var(p.clone());
        let y = f(xv).sum();
        let g = t.grad(y, &[xv], true)[0].expect("grad");
        let s = (g * t.constant(w.clone())).sum();
        let val = s.item();
        let h = t.grad(s, &[xv], false)[0].map(|v| (*v.value()).clone()).unwrap_or_else(|| Array::zeros(p.raw_dim()));
        (val, h)
    };
    let (_, analytic) = hvp(&x);
    let num = numeric_grad(&x, 1e-5, |p| hvp(p).0);
    relative_error(&analytic, &num)
}

#[test]
fn elementwise_ops() {
    let x = randn(&[2, 3], 1.0, &mut rng(1)).mapv(|v| v.abs() + 0.5);
    assert!(check(x.clone(), |v| v.exp()) < 1e-7);
    assert!(check(x.clone(), |v| v.ln()) < 1e-7);
    assert!(check(x.clone(), |v| v.sqrt()) < 1e-7);
    assert!(check(x.clone(), |v| v.tanh()) < 1e-7);
    assert!(check(x.clone(), |v| (v * v) / (v + 1.0)) < 1e-7);
    assert!(check(x.clone(), |v| 3.0 - v * 2.0) < 1e-7);
    let y = randn(&[2, 3], 1.0, &mut rng(2));
    assert!(check(y.clone(), |v| v.leaky_relu(0.2)) < 1e-7);
    assert!(check(y.clone(), |v| v.abs()) < 1e-7);
}

#[test]
fn broadcasting_and_reductions() {
    let x = randn(&[2, 3, 4, 5], 1.0, &mut rng(3));
    let b = randn(&[1, 3, 1, 1], 1.0, &mut rng(4));
    assert!(check(x.clone(), |v| {
        let bb = v.tape().constant(b.clone());
        (v * bb + bb).square()
    }) < 1e-7);
    assert!(check(b.clone(), |v| {
        let xx = v.tape().constant(x.clone());
        (xx * v).square()
    }) < 1e-7);
    assert!(check(x.clone(), |v| v.mean_keep(&[2, 3]).square()) < 1e-7);
    let wts = randn(&[2, 3, 4, 5], 1.0, &mut rng(40));
    assert!(check(x.clone(), |v| instance_norm(v, 1e-5) * v.tape().constant(wts.clone())) < 1e-6);
    assert!(check(x.clone(), |v| softmax(v, 1).square()) < 1e-6);
    assert!(check(x.clone(), |v| l2_normalize(v, 1, 1e-9).square() * v) < 1e-6);
}

#[test]
fn shape_ops() {
    let x = randn(&[2, 4, 3, 2], 1.0, &mut rng(5));
    assert!(check(x.clone(), |v| v.narrow(1, 1, 2).square()) < 1e-7);
    assert!(check(x.clone(), |v| v.embed(1, 2, 7).square() + v.embed(1, 0, 7)) < 1e-7);
    assert!(check(x.clone(), |v| Var::concat(&[v, v.square()], 1).square()) < 1e-7);
    assert!(check(x.clone(), |v| v.reshape(&[8, 6]).transpose_last2().square()) < 1e-7);
    assert!(check(x.clone(), |v| v.upsample_nearest(2).square()) < 1e-7);
    assert!(check(x.clone(), |v| v.narrow(2, 0, 2).avg_pool(2).square()) < 1e-7);
}

#[test]
fn matmul_grad() {
    let a = randn(&[2, 3, 4], 1.0, &mut rng(6));
    let b = randn(&[2, 4, 5], 1.0, &mut rng(7));
    assert!(check(a.clone(), |v| v.matmul(v.tape().constant(b.clone())).square()) < 1e-7);
    assert!(check(b.clone(), |v| v.tape().constant(a.clone()).matmul(v).square()) < 1e-7);
}

#[test]
fn conv_grads_first_and_second_order() {
    let x = randn(&[2, 3, 6, 5], 1.0, &mut rng(8));
    let w = randn(&[4, 3, 3, 3], 0.3, &mut rng(9));
    for &(stride, pad) in &[(1, 1), (2, 1)] {
        assert!(check(x.clone(), |v| v.conv2d(v.tape().constant(w.clone()), stride, pad).square()) < 1e-7);
        assert!(check(w.clone(), |v| v.tape().constant(x.clone()).conv2d(v, stride, pad).square()) < 1e-7);
        // second order through conv backward rules (as used by the gradient penalty)
        let err = check_second_order(x.clone(), |v| {
            let h = v.conv2d(v.tape().constant(w.clone()), stride, pad).tanh();
            h.square()
        });
        assert!(err < 1e-6, "x second-order {err}");
        let err = check_second_order(w.clone(), |v| {
            let h = v.tape().constant(x.clone()).conv2d(v, stride, pad).tanh();
            h.square()
        });
        assert!(err < 1e-6, "w second-order {err}");
    }
}

#[test]
fn mixed_second_order_gradient_penalty_shape() {
    // d/dw of ||d/dx D(x; w)||^2 for a two-layer conv net with instance norm.
    let x = randn(&[2, 2, 6, 6], 1.0, &mut rng(10));
    let w2 = randn(&[1, 3, 3, 3], 0.5, &mut rng(11));
    let w1 = randn(&[3, 2, 3, 3], 0.5, &mut rng(12));
    let penalty = |w1v: &Array, create: bool| -> (f64, Option<Array>) {
        let t = Tape::new();
        let xv = t.var(x.clone());
        let wv = t.var(w1v.clone());
        let h = instance_norm(xv.conv2d(wv, 2, 1), 1e-5).leaky_relu(0.2);
        let d = h.conv2d(t.constant(w2.clone()), 1, 1).sum();
        let gx = t.grad(d, &[xv], true)[0].unwrap();
        let gp = ((gx * gx).sum_keep(&[1, 2, 3]).sqrt() - 1.0).square().mean();
        let val = gp.item();
        let g = create.then(|| (*t.grad(gp, &[wv], false)[0].unwrap().value()).clone());
        (val, g)
    };
    let analytic = penalty(&w1, true).1.unwrap();
    let num = numeric_grad(&w1, 1e-5, |p| penalty(p, false).0);
    let err = relative_error(&analytic, &num);
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn grid_sample_grads() {
    let img = randn(&[1, 2, 5, 4], 1.0, &mut rng(13));
    let grid = randn(&[1, 3, 3, 2], 0.5, &mut rng(14)).mapv(|v| v.clamp(-0.95, 0.95));
    assert!(check(img.clone(), |v| v.grid_sample(v.tape().constant(grid.clone())).square()) < 1e-7);
    assert!(check(grid.clone(), |v| v.tape().constant(img.clone()).grid_sample(v).square()) < 1e-5);
}

#[test]
fn unrelated_inputs_have_no_gradient() {
    let t = Tape::new();
    let a = t.var(Array::from_elem(IxDyn(&[2]), 1.0));
    let b = t.var(Array::from_elem(IxDyn(&[2]), 2.0));
    let y = (a * 3.0).sum();
    let g = t.grad(y, &[a, b], false);
    assert!(g[0].is_some());
    assert!(g[1].is_none());
}
