use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check;
use super::{grad, no_grad, Var};

fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

fn positive_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
    rand_array(shape, seed).mapv(|v| v.abs() + 0.5)
}

const TOL: f64 = 1e-6;

fn assert_check(name: &str, f: impl Fn(&[Var<f64>]) -> Var<f64>, inputs: &[ArrayD<f64>]) {
    let r = check(f, inputs, 1e-5, 1e-8, 1);
    assert!(r.max_rel_error < TOL, "{name}: rel err {}", r.max_rel_error);
}

#[test]
fn elementwise_ops() {
    let x = rand_array(&[2, 3], 1);
    let p = positive_array(&[2, 3], 2);
    assert_check("tanh", |v| v[0].tanh().sum(), &[x.clone()]);
    assert_check("sigmoid", |v| v[0].sigmoid().square().sum(), &[x.clone()]);
    assert_check("exp", |v| v[0].exp().sum(), &[x.clone()]);
    assert_check("log", |v| v[0].log().sum(), &[p.clone()]);
    assert_check("sqrt", |v| v[0].sqrt().sum(), &[p.clone()]);
    assert_check("powf", |v| v[0].powf(-0.5).sum(), &[p.clone()]);
    assert_check("leaky", |v| v[0].leaky_relu(0.2).square().sum(), &[x.clone()]);
    assert_check("abs", |v| v[0].abs().mul(&v[0]).sum(), &[x.clone()]);
    assert_check("clamp", |v| v[0].clamp(-0.5, 0.5).square().sum(), &[x.clone()]);
    assert_check("scale_shift", |v| v[0].scale(3.0).shift(1.0).square().mean(), &[x]);
}

#[test]
fn broadcasting_binary_ops() {
    let a = rand_array(&[2, 3, 4], 3);
    let b = positive_array(&[3, 1], 4);
    let c = rand_array(&[1, 3, 4], 5);
    assert_check("add", |v| v[0].add(&v[1]).square().sum(), &[a.clone(), b.clone()]);
    assert_check("sub", |v| v[0].sub(&v[1]).square().sum(), &[a.clone(), c.clone()]);
    assert_check("mul", |v| v[0].mul(&v[1]).square().sum(), &[a.clone(), c.clone()]);
    assert_check("div", |v| v[0].div(&v[1]).square().sum(), &[a.clone(), b]);
    assert_check("mean_keepdims", |v| v[0].mean_keepdims(&[1, 2]).square().sum(), &[a]);
}

#[test]
fn shape_ops() {
    let a = rand_array(&[2, 3, 2], 6);
    let b = rand_array(&[2, 1, 2], 7);
    let m = rand_array(&[3, 4], 8);
    let n = rand_array(&[4, 2], 9);
    let w = rand_array(&[2, 4, 2], 10);
    assert_check(
        "concat",
        |v| Var::concat(&[v[0].clone(), v[1].clone()], 1).mul(&Var::constant(w.clone())).sum(),
        &[a.clone(), b],
    );
    assert_check(
        "narrow_embed",
        |v| v[0].narrow(1, 1, 2).embed(1, 0, 4).square().sum(),
        &[a.clone()],
    );
    assert_check("permute", |v| v[0].permute(&[2, 0, 1]).reshape(&[2, 6]).square().sum(), &[a]);
    assert_check("matmul", |v| v[0].matmul(&v[1]).tanh().sum(), &[m, n]);
}

#[test]
fn convolutions() {
    let x = rand_array(&[2, 3, 6, 6], 11);
    let w = rand_array(&[4, 3, 4, 4], 12);
    let wt = rand_array(&[3, 2, 4, 4], 13);
    let w1 = rand_array(&[2, 3, 1, 1], 14);
    assert_check("conv", |v| v[0].conv2d(&v[1], 2, 1).tanh().sum(), &[x.clone(), w]);
    assert_check("conv1x1", |v| v[0].conv2d(&v[1], 1, 0).square().sum(), &[x.clone(), w1]);
    assert_check("deconv", |v| v[0].conv_transpose2d(&v[1], 2, 1).tanh().sum(), &[x, wt]);
}

#[test]
fn second_order_through_conv_stack() {
    let x = rand_array(&[2, 2, 6, 6], 21);
    let w1 = rand_array(&[3, 2, 4, 4], 22).mapv(|v| v * 0.5);
    let w2 = rand_array(&[1, 27], 23).mapv(|v| v * 0.3);
    let w3 = rand_array(&[3, 2, 4, 4], 24).mapv(|v| v * 0.5);
    // (||d critic / d x||_2 - 1)^2 differentiated w.r.t. the critic weights.
    let penalty = |v: &[Var<f64>]| {
        let xl = Var::leaf(x.clone());
        let h = xl.conv2d(&v[0], 2, 1).leaky_relu(0.2).tanh();
        let h = h.conv_transpose2d(&v[2], 2, 1).sigmoid().conv2d(&v[0], 2, 1);
        let out = h.reshape(&[2, 27]).matmul(&v[1].t()).sum();
        let g = grad(&out, &[&xl], true).remove(0).unwrap();
        let norm = g.square().sum_to(&[2, 1, 1, 1]).shift(1e-16).sqrt();
        norm.shift(-1.0).square().mean()
    };
    let r = check(penalty, &[w1, w2, w3], 1e-6, 1e-8, 1);
    assert!(r.max_rel_error < 1e-5, "rel err {}", r.max_rel_error);
}

#[test]
fn no_grad_records_nothing() {
    let x = Var::leaf(rand_array(&[3], 30));
    let y = no_grad(|| x.square().sum());
    assert!(!y.requires_grad());
    let z = x.square().sum();
    assert!(z.requires_grad());
}

#[test]
fn shared_subexpression_accumulates() {
    let x = Var::leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0f64));
    let y = x.mul(&x).add(&x);
    let g = grad(&y.sum(), &[&x], false).remove(0).unwrap();
    assert_eq!(g.item(), 7.0);
}
