//! Parameter storage, layers and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] as shared immutable arrays so a loaded
//! model is `Send + Sync`. A forward pass first [`ParamStore::bind`]s them to
//! graph leaves.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Arc<ArrayD<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn values(&self) -> impl Iterator<Item = &ArrayD<T>> {
        self.values.iter().map(|v| v.as_ref())
    }

    pub fn value_at(&self, index: usize) -> &ArrayD<T> {
        &self.values[index]
    }

    pub fn set_at(&mut self, index: usize, value: ArrayD<T>) {
        assert_eq!(value.shape(), self.values[index].shape(), "shape change for {}", self.names[index]);
        self.values[index] = Arc::new(value);
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Graph leaves for one forward/backward pass.
    pub fn bind(&self, trainable: bool) -> Bound<T> {
        Bound {
            vars: self.values.iter().map(|v| Var::from_shared(Arc::clone(v), trainable)).collect(),
        }
    }

    /// Same parameters converted to another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| Arc::new(v.mapv(|x| U::lit(x.to_f64_lossy()))))
                .collect(),
        }
    }
}

/// Parameters bound as graph leaves.
pub struct Bound<T: Scalar> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> Vec<&Var<T>> {
        self.vars.iter().collect()
    }
}

fn uniform<T: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> ArrayD<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::lit(dist.sample(rng)))
}

/// Builder handed to model constructors; prefixes names and draws initial
/// values from a seeded generator.
pub struct Init<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub prefix: String,
}

impl<'a, T: Scalar, R: Rng> Init<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn scoped<F, O>(&mut self, scope: &str, f: F) -> O
    where
        F: FnOnce(&mut Init<'_, T, R>) -> O,
    {
        let prefix = self.full_name(scope);
        let mut inner = Init { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut inner)
    }

    /// Kaiming-uniform draw with bound `1/sqrt(fan_in)`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let v = uniform(shape, bound, self.rng);
        let n = self.full_name(name);
        self.store.add(n, v)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let v = ArrayD::from_elem(IxDyn(shape), T::lit(value));
        let n = self.full_name(name);
        self.store.add(n, v)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        init.scoped(name, |init| {
            let fan_in = in_ch * kernel * kernel;
            let weight = init.fan_in("weight", &[out_ch, in_ch, kernel, kernel], fan_in);
            let bias = bias.then(|| init.fan_in("bias", &[out_ch], fan_in));
            Conv2d { weight, bias, stride, pad }
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        let y = x.conv2d(p.get(self.weight), self.stride, self.pad);
        match self.bias {
            Some(b) => {
                let c = y.shape()[1];
                y.add(&p.get(b).reshape(&[1, c, 1, 1]))
            }
            None => y,
        }
    }
}

/// Transposed convolution; weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        init.scoped(name, |init| {
            let fan_in = out_ch * kernel * kernel;
            let weight = init.fan_in("weight", &[in_ch, out_ch, kernel, kernel], fan_in);
            let bias = bias.then(|| init.fan_in("bias", &[out_ch], fan_in));
            ConvTranspose2d { weight, bias, stride, pad }
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        let y = x.conv_transpose2d(p.get(self.weight), self.stride, self.pad);
        match self.bias {
            Some(b) => {
                let c = y.shape()[1];
                y.add(&p.get(b).reshape(&[1, c, 1, 1]))
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        init.scoped(name, |init| Linear {
            weight: init.fan_in("weight", &[out_dim, in_dim], in_dim),
            bias: init.fan_in("bias", &[out_dim], in_dim),
        })
    }

    /// `x: [N, in]` -> `[N, out]`.
    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        x.matmul(&p.get(self.weight).t()).add(p.get(self.bias))
    }
}

/// Per-sample, per-channel normalization over the spatial axes with a learned
/// affine transform.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize) -> Self {
        init.scoped(name, |init| InstanceNorm {
            gamma: init.constant("gamma", &[channels], 1.0),
            beta: init.constant("beta", &[channels], 0.0),
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        instance_norm(x, T::lit(self.eps))
            .mul(&p.get(self.gamma).reshape(&[1, x.shape()[1], 1, 1]))
            .add(&p.get(self.beta).reshape(&[1, x.shape()[1], 1, 1]))
    }
}

/// `(x - mean) / sqrt(var + eps)` over axes 2 and 3 of an NCHW tensor.
pub fn instance_norm<T: Scalar>(x: &Var<T>, eps: T) -> Var<T> {
    let centered = x.sub(&x.mean_keepdims(&[2, 3]));
    let var = centered.square().mean_keepdims(&[2, 3]);
    centered.mul(&var.shift(eps).powf(T::lit(-0.5)))
}

/// Global average pooling: `[N, C, H, W]` -> `[N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Var<T>) -> Var<T> {
    let s = x.shape();
    x.mean_keepdims(&[2, 3]).reshape(&[s[0], s[1]])
}

/// Broadcasts each entry of `v: [N, K]` to a constant `h x w` plane.
pub fn broadcast_planes<T: Scalar>(v: &Var<T>, h: usize, w: usize) -> Var<T> {
    let s = v.shape();
    v.reshape(&[s[0], s[1], 1, 1]).broadcast_to(&[s[0], s[1], h, w])
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64) -> Self {
        let zeros = |a: &ArrayD<T>| ArrayD::zeros(a.raw_dim());
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: store.values().map(zeros).collect(),
            v: store.values().map(zeros).collect(),
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Var<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::lit(lr);
        let eps = T::lit(self.eps);
        let one = T::one();
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let g = g.value();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (one - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (one - b2) * g * g);
            let mut p = store.value_at(i).clone();
            ndarray::Zip::from(&mut p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mh = m / c1;
                let vh = v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
            store.set_at(i, p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradcheck, grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn instance_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: ArrayD<f64> = uniform(&[2, 3, 4, 4], 1.0, &mut rng);
        let w: ArrayD<f64> = uniform(&[2, 3, 4, 4], 1.0, &mut rng);
        let r = gradcheck::check(
            |v| instance_norm(&v[0], 1e-5).mul(&Var::constant(w.clone())).sum(),
            &[x],
            1e-5,
            1e-8,
            1,
        );
        assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: ArrayD<f64> = uniform(&[1, 2, 5, 5], 3.0, &mut rng);
        let y = instance_norm(&Var::constant(x), 0.0);
        for c in 0..2 {
            let plane = y.value().index_axis(ndarray::Axis(1), c).to_owned();
            let mean = plane.mean().unwrap();
            let var = plane.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let mut opt = Adam::new(&store, 0.9, 0.999);
        for _ in 0..2000 {
            let p = store.bind(true);
            let loss = p.vars()[0].square().sum();
            let g = grad(&loss, &p.vars(), false);
            opt.update(&mut store, &g, 0.05);
        }
        assert!(store.value_at(0).iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn deconv_doubles_spatial_size() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        let layer = ConvTranspose2d::new(&mut init, "up", 4, 2, 4, 2, 1, true);
        let p = store.bind(false);
        let x = Var::constant(ArrayD::zeros(IxDyn(&[1, 4, 5, 5])));
        assert_eq!(layer.forward(&p, &x).shape(), &[1, 2, 10, 10]);
        assert_eq!(store.names(), &["up.weight".to_string(), "up.bias".to_string()]);
    }
}
