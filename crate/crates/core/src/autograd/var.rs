use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::kernels::{self, ConvGeom};
use super::Scalar;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _guard = GradModeGuard(prev);
    f()
}

/// Runs `f` without recording operations for differentiation.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

enum Op<T: Scalar> {
    Add(Var<T>, Var<T>),
    Sub(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Div(Var<T>, Var<T>),
    Scale(Var<T>, T),
    Shift(Var<T>),
    MulConst(Var<T>, Arc<ArrayD<T>>),
    SumTo(Var<T>),
    BroadcastTo(Var<T>),
    Reshape(Var<T>),
    Permute(Var<T>, Vec<usize>),
    MatMul(Var<T>, Var<T>),
    Conv(Var<T>, Var<T>, ConvGeom),
    ConvTranspose(Var<T>, Var<T>, ConvGeom),
    ConvWeight(Var<T>, Var<T>, ConvGeom),
    LeakyRelu(Var<T>, T),
    Tanh(Var<T>),
    Sigmoid(Var<T>),
    Log(Var<T>),
    Exp(Var<T>),
    Abs(Var<T>),
    Powf(Var<T>, T),
    Clamp(Var<T>, T, T),
    Concat(Vec<Var<T>>, usize),
    Narrow(Var<T>, usize, usize),
    Embed(Var<T>, usize, usize),
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<&Var<T>> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Conv(a, b, _) | ConvTranspose(a, b, _) | ConvWeight(a, b, _) => vec![a, b],
            Scale(a, _) | Shift(a) | MulConst(a, _) | SumTo(a) | BroadcastTo(a) | Reshape(a) => {
                vec![a]
            }
            Permute(a, _) | LeakyRelu(a, _) | Tanh(a) | Sigmoid(a) | Log(a) | Exp(a) | Abs(a) => {
                vec![a]
            }
            Powf(a, _) | Clamp(a, _, _) | Narrow(a, _, _) | Embed(a, _, _) => vec![a],
            Concat(parts, _) => parts.iter().collect(),
        }
    }

    /// Vector-Jacobian products for every parent that requires a gradient,
    /// expressed with differentiable ops so they can be differentiated again.
    fn vjp(&self, out: &Var<T>, g: &Var<T>) -> Vec<(Var<T>, Var<T>)> {
        use Op::*;
        let mut res = Vec::new();
        let mut push = |p: &Var<T>, f: &dyn Fn() -> Var<T>| {
            if p.requires_grad() {
                res.push((p.clone(), f()));
            }
        };
        match self {
            Add(a, b) => {
                push(a, &|| g.sum_to(a.shape()));
                push(b, &|| g.sum_to(b.shape()));
            }
            Sub(a, b) => {
                push(a, &|| g.sum_to(a.shape()));
                push(b, &|| g.sum_to(b.shape()).neg());
            }
            Mul(a, b) => {
                push(a, &|| g.mul(b).sum_to(a.shape()));
                push(b, &|| g.mul(a).sum_to(b.shape()));
            }
            Div(a, b) => {
                push(a, &|| g.div(b).sum_to(a.shape()));
                push(b, &|| g.mul(out).div(b).neg().sum_to(b.shape()));
            }
            Scale(a, c) => push(a, &|| g.scale(*c)),
            Shift(a) => push(a, &|| g.clone()),
            MulConst(a, m) => push(a, &|| g.mul_const(m.clone()).sum_to(a.shape())),
            SumTo(a) => push(a, &|| g.broadcast_to(a.shape())),
            BroadcastTo(a) => push(a, &|| g.sum_to(a.shape())),
            Reshape(a) => push(a, &|| g.reshape(a.shape())),
            Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                push(a, &|| g.permute(&inv));
            }
            MatMul(a, b) => {
                push(a, &|| g.matmul(&b.t()));
                push(b, &|| a.t().matmul(g));
            }
            Conv(x, w, geom) => {
                push(x, &|| g.conv_transpose_geom(w, *geom));
                push(w, &|| x.conv_weight_geom(g, *geom));
            }
            ConvTranspose(g0, w, geom) => {
                push(g0, &|| g.conv_geom(w, *geom));
                push(w, &|| g.conv_weight_geom(g0, *geom));
            }
            ConvWeight(x, g0, geom) => {
                push(x, &|| g0.conv_transpose_geom(g, *geom));
                push(g0, &|| x.conv_geom(g, *geom));
            }
            LeakyRelu(x, slope) => {
                let s = *slope;
                push(x, &|| {
                    let mask = x.value().mapv(|v| if v > T::zero() { T::one() } else { s });
                    g.mul_const(Arc::new(mask))
                });
            }
            Tanh(x) => push(x, &|| g.mul(&out.mul(out).neg().shift(T::one()))),
            Sigmoid(x) => push(x, &|| g.mul(out).mul(&out.neg().shift(T::one()))),
            Log(x) => push(x, &|| g.div(x)),
            Exp(x) => push(x, &|| g.mul(out)),
            Abs(x) => push(x, &|| {
                let sign = x.value().mapv(|v| {
                    if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                g.mul_const(Arc::new(sign))
            }),
            Powf(x, p) => {
                let p = *p;
                push(x, &|| g.mul(&x.powf(p - T::one())).scale(p));
            }
            Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                push(x, &|| {
                    let mask = x
                        .value()
                        .mapv(|v| if v >= lo && v <= hi { T::one() } else { T::zero() });
                    g.mul_const(Arc::new(mask))
                });
            }
            Concat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let len = p.shape()[*axis];
                    let start = offset;
                    push(p, &|| g.narrow(*axis, start, len));
                    offset += len;
                }
            }
            Narrow(a, axis, start) => push(a, &|| g.embed(*axis, *start, a.shape()[*axis])),
            Embed(a, axis, start) => push(a, &|| g.narrow(*axis, *start, a.shape()[*axis])),
        }
        res
    }
}

struct Node<T: Scalar> {
    id: u64,
    value: Arc<ArrayD<T>>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// A node in the computation graph. Cloning is cheap (reference counted).
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Sums `a` down to `shape`, the inverse of numpy-style broadcasting.
pub fn reduce_to<T: Scalar>(a: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if a.shape() == shape {
        return a.clone();
    }
    let mut cur = a.clone();
    while cur.ndim() > shape.len() {
        cur = cur.sum_axis(Axis(0));
    }
    for (ax, &target) in shape.iter().enumerate() {
        if target == 1 && cur.shape()[ax] != 1 {
            cur = cur.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    assert_eq!(cur.shape(), shape, "cannot reduce {:?} to {:?}", a.shape(), shape);
    cur
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            assert!(da == db || da == 1 || db == 1, "incompatible shapes {a:?} and {b:?}");
            da.max(db)
        })
        .collect()
}

fn zip_broadcast<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>, f: impl Fn(T, T) -> T) -> ArrayD<T> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let mut out = a.broadcast(IxDyn(&shape)).unwrap().to_owned();
    out.zip_mut_with(&b.broadcast(IxDyn(&shape)).unwrap(), |x, &y| *x = f(*x, y));
    out
}

fn matmul2<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> ArrayD<T> {
    assert!(a.ndim() == 2 && b.ndim() == 2, "matmul expects 2-D operands");
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.as_slice().unwrap(), false, b.as_slice().unwrap(), false, &mut out, false);
    ArrayD::from_shape_vec(IxDyn(&[m, n]), out).unwrap()
}

impl<T: Scalar> Var<T> {
    fn new(value: ArrayD<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        Var(Rc::new(Node { id: next_id(), value: Arc::new(value), requires_grad, op }))
    }

    fn from_op(value: ArrayD<T>, op: Op<T>) -> Self {
        let track = is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        if track {
            Var::new(value, true, Some(op))
        } else {
            Var::new(value, false, None)
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(value: ArrayD<T>) -> Self {
        Var::new(value, false, None)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: ArrayD<T>) -> Self {
        Var::new(value, true, None)
    }

    pub fn from_shared(value: Arc<ArrayD<T>>, requires_grad: bool) -> Self {
        Var(Rc::new(Node { id: next_id(), value, requires_grad, op: None }))
    }

    pub fn scalar_const(v: T) -> Self {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Var::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &ArrayD<T> {
        &self.0.value
    }

    pub fn shared_value(&self) -> Arc<ArrayD<T>> {
        Arc::clone(&self.0.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Self {
        Var::from_shared(self.shared_value(), false)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.value().len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.value().iter().next().unwrap()
    }

    pub fn add(&self, o: &Var<T>) -> Var<T> {
        let v = zip_broadcast(self.value(), o.value(), |a, b| a + b);
        Var::from_op(v, Op::Add(self.clone(), o.clone()))
    }

    pub fn sub(&self, o: &Var<T>) -> Var<T> {
        let v = zip_broadcast(self.value(), o.value(), |a, b| a - b);
        Var::from_op(v, Op::Sub(self.clone(), o.clone()))
    }

    pub fn mul(&self, o: &Var<T>) -> Var<T> {
        let v = zip_broadcast(self.value(), o.value(), |a, b| a * b);
        Var::from_op(v, Op::Mul(self.clone(), o.clone()))
    }

    pub fn div(&self, o: &Var<T>) -> Var<T> {
        let v = zip_broadcast(self.value(), o.value(), |a, b| a / b);
        Var::from_op(v, Op::Div(self.clone(), o.clone()))
    }

    pub fn scale(&self, c: T) -> Var<T> {
        Var::from_op(self.value().mapv(|v| v * c), Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn shift(&self, c: T) -> Var<T> {
        Var::from_op(self.value().mapv(|v| v + c), Op::Shift(self.clone()))
    }

    /// Multiplies by a tensor that is treated as a constant.
    pub fn mul_const(&self, m: Arc<ArrayD<T>>) -> Var<T> {
        let v = zip_broadcast(self.value(), &m, |a, b| a * b);
        Var::from_op(v, Op::MulConst(self.clone(), m))
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        Var::from_op(reduce_to(self.value(), shape), Op::SumTo(self.clone()))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        Var::from_op(v, Op::BroadcastTo(self.clone()))
    }

    pub fn sum(&self) -> Var<T> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.value().len().max(1);
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_keepdims(&self, axes: &[usize]) -> Var<T> {
        let mut shape = self.shape().to_vec();
        let mut count = 1usize;
        for &a in axes {
            count *= shape[a];
            shape[a] = 1;
        }
        self.sum_to(&shape).scale(T::one() / T::lit(count as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", self.shape(), shape));
        Var::from_op(v, Op::Reshape(self.clone()))
    }

    pub fn permute(&self, axes: &[usize]) -> Var<T> {
        let v = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        Var::from_op(v, Op::Permute(self.clone(), axes.to_vec()))
    }

    pub fn t(&self) -> Var<T> {
        self.permute(&[1, 0])
    }

    pub fn matmul(&self, o: &Var<T>) -> Var<T> {
        Var::from_op(matmul2(self.value(), o.value()), Op::MatMul(self.clone(), o.clone()))
    }

    fn conv_geom(&self, w: &Var<T>, geom: ConvGeom) -> Var<T> {
        let v = kernels::conv2d(self.value(), w.value(), &geom);
        Var::from_op(v, Op::Conv(self.clone(), w.clone(), geom))
    }

    fn conv_transpose_geom(&self, w: &Var<T>, geom: ConvGeom) -> Var<T> {
        let v = kernels::conv2d_transpose(self.value(), w.value(), &geom);
        Var::from_op(v, Op::ConvTranspose(self.clone(), w.clone(), geom))
    }

    fn conv_weight_geom(&self, g: &Var<T>, geom: ConvGeom) -> Var<T> {
        let v = kernels::conv2d_weight(self.value(), g.value(), &geom);
        Var::from_op(v, Op::ConvWeight(self.clone(), g.clone(), geom))
    }

    /// 2-D convolution of `self: [N, C, H, W]` with `w: [O, C, kh, kw]`.
    pub fn conv2d(&self, w: &Var<T>, stride: usize, pad: usize) -> Var<T> {
        let s = self.shape();
        let ws = w.shape();
        let geom = ConvGeom { stride, pad, in_hw: (s[2], s[3]), kernel: (ws[2], ws[3]) };
        self.conv_geom(w, geom)
    }

    /// Transposed convolution of `self: [N, I, H, W]` with `w: [I, O, kh, kw]`,
    /// producing `[N, O, H', W']` with `H' = (H - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(&self, w: &Var<T>, stride: usize, pad: usize) -> Var<T> {
        let s = self.shape();
        let ws = w.shape();
        let out_h = (s[2] - 1) * stride + ws[2] - 2 * pad;
        let out_w = (s[3] - 1) * stride + ws[3] - 2 * pad;
        let geom = ConvGeom { stride, pad, in_hw: (out_h, out_w), kernel: (ws[2], ws[3]) };
        self.conv_transpose_geom(w, geom)
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        let v = self.value().mapv(|x| if x > T::zero() { x } else { x * slope });
        Var::from_op(v, Op::LeakyRelu(self.clone(), slope))
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(T::zero())
    }

    pub fn tanh(&self) -> Var<T> {
        Var::from_op(self.value().mapv(|x| x.tanh()), Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Var<T> {
        let v = self.value().mapv(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        Var::from_op(v, Op::Sigmoid(self.clone()))
    }

    pub fn log(&self) -> Var<T> {
        Var::from_op(self.value().mapv(|x| x.ln()), Op::Log(self.clone()))
    }

    pub fn exp(&self) -> Var<T> {
        Var::from_op(self.value().mapv(|x| x.exp()), Op::Exp(self.clone()))
    }

    pub fn abs(&self) -> Var<T> {
        Var::from_op(self.value().mapv(|x| x.abs()), Op::Abs(self.clone()))
    }

    pub fn powf(&self, p: T) -> Var<T> {
        Var::from_op(self.value().mapv(|x| x.powf(p)), Op::Powf(self.clone(), p))
    }

    pub fn sqrt(&self) -> Var<T> {
        self.powf(T::lit(0.5))
    }

    pub fn square(&self) -> Var<T> {
        self.mul(self)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        let v = self.value().mapv(|x| x.max(lo).min(hi));
        Var::from_op(v, Op::Clamp(self.clone(), lo, hi))
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        Var::from_op(v, Op::Concat(parts.to_vec(), axis))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let v = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Var::from_op(v, Op::Narrow(self.clone(), axis, start))
    }

    /// Places `self` at `start` along `axis` inside a zero tensor whose
    /// extent on that axis is `total`. Adjoint of [`Var::narrow`].
    pub fn embed(&self, axis: usize, start: usize, total: usize) -> Var<T> {
        let mut shape = self.shape().to_vec();
        let len = shape[axis];
        shape[axis] = total;
        let mut v = ArrayD::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(self.value());
        Var::from_op(v, Op::Embed(self.clone(), axis, start))
    }
}

/// Gradients of a scalar `output` with respect to `inputs`.
///
/// With `create_graph` the returned gradients are themselves differentiable,
/// which is what the gradient penalty needs.
pub fn grad<T: Scalar>(
    output: &Var<T>,
    inputs: &[&Var<T>],
    create_graph: bool,
) -> Vec<Option<Var<T>>> {
    assert_eq!(output.value().len(), 1, "grad() needs a scalar output");
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        if let Some(op) = &v.0.op {
            stack.extend(op.parents().into_iter().cloned());
        }
        order.push(v);
    }
    // Ids grow monotonically, so descending id is a valid reverse topological order.
    order.sort_by_key(|v| std::cmp::Reverse(v.id()));

    let keep: HashSet<u64> = inputs.iter().map(|v| v.id()).collect();
    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    grads.insert(
        output.id(),
        Var::constant(ArrayD::from_elem(IxDyn(output.shape()), T::one())),
    );

    with_grad_mode(create_graph, || {
        for node in &order {
            let g = if keep.contains(&node.id()) {
                grads.get(&node.id()).cloned()
            } else {
                grads.remove(&node.id())
            };
            let (Some(g), Some(op)) = (g, &node.0.op) else { continue };
            for (parent, pg) in op.vjp(node, &g) {
                let acc = match grads.remove(&parent.id()) {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                grads.insert(parent.id(), acc);
            }
        }
    });

    inputs.iter().map(|v| grads.get(&v.id()).cloned()).collect()
}
