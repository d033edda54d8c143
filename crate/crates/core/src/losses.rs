//! Objective terms for the discriminator and generator.
//!
//! Every loss is a batch mean built from recorded autograd ops, so the same
//! code serves training (`f32`) and gradient checks (`f64`).

use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Scalar, Var};
use crate::data::AttributeVector;
use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-8;

/// Added under the square root of the penalty's gradient norm.
pub const NORM_EPS: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub att: f64,
    pub d_cls: f64,
    pub cm: f64,
    pub g_cls: f64,
    pub rec: f64,
    pub gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { att: 1.0, d_cls: 1.0, cm: 1.0, g_cls: 10.0, rec: 100.0, gp: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("att", self.att),
            ("d_cls", self.d_cls),
            ("cm", self.cm),
            ("g_cls", self.g_cls),
            ("rec", self.rec),
            ("gp", self.gp),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn complement_vector(v: &AttributeVector) -> AttributeVector {
    let flipped = v.values().iter().map(|b| 1 - b).collect();
    v.with_values(flipped).expect("complement of a binary vector is binary")
}

/// `1 - v` on raw bits; anything other than 0 or 1 is a domain error.
pub fn complement_bits(v: &[u8]) -> Result<Vec<u8>> {
    v.iter()
        .map(|&b| match b {
            0 | 1 => Ok(1 - b),
            other => Err(Error::Domain(format!("attribute bit must be 0 or 1, got {other}"))),
        })
        .collect()
}

/// `1 - t` for a batch of float targets.
pub fn complement_targets<T: Scalar>(t: &ArrayD<T>) -> ArrayD<T> {
    t.mapv(|x| T::one() - x)
}

fn check_finite<T: Scalar>(what: &str, a: &ArrayD<T>) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains NaN or infinity")))
    }
}

fn check_targets<T: Scalar>(pred: &[usize], t: &ArrayD<T>) -> Result<()> {
    if pred != t.shape() {
        return Err(Error::Shape(format!("predictions {pred:?} vs targets {:?}", t.shape())));
    }
    if pred.is_empty() || pred.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("empty prediction tensor {pred:?}")));
    }
    check_finite("targets", t)
}

/// Sums per-attribute terms over the last axis and averages over the rest.
fn attribute_sum_batch_mean<T: Scalar>(terms: &Var<T>) -> Var<T> {
    let s = terms.shape();
    let k = s[s.len() - 1];
    let rows = terms.value().len() / k;
    terms.sum().scale(T::one() / T::lit(rows as f64))
}

/// `-Σᵢ [tᵢ log pᵢ + (1-tᵢ) log(1-pᵢ)]` over the last axis, averaged over the
/// batch. `p` is clamped to `[ε, 1-ε]` with `ε = max(1e-8, machine epsilon)`.
pub fn binary_cross_entropy<T: Scalar>(p: &Var<T>, t: &ArrayD<T>) -> Result<Var<T>> {
    check_finite("probabilities", p.value())?;
    check_targets(p.shape(), t)?;
    let eps = T::lit(PROB_EPS).max(T::epsilon());
    let pc = p.clamp(eps, T::one() - eps);
    let t_arc = Arc::new(t.clone());
    let one_minus_t = Arc::new(complement_targets(t));
    let pos = pc.log().mul_const(t_arc);
    let neg = pc.neg().shift(T::one()).log().mul_const(one_minus_t);
    Ok(attribute_sum_batch_mean(&pos.add(&neg).neg()))
}

/// Same quantity as [`binary_cross_entropy`] with `p = sigmoid(z)`, computed
/// as `softplus(z) - t·z` so saturated logits keep their gradient.
pub fn binary_cross_entropy_with_logits<T: Scalar>(z: &Var<T>, t: &ArrayD<T>) -> Result<Var<T>> {
    check_finite("logits", z.value())?;
    check_targets(z.shape(), t)?;
    let softplus = z.relu().add(&z.abs().neg().exp().shift(T::one()).log());
    let terms = softplus.sub(&z.mul_const(Arc::new(t.clone())));
    Ok(attribute_sum_batch_mean(&terms))
}

pub fn loss_attention_ab<T: Scalar>(p_ab: &Var<T>, v_s: &ArrayD<T>) -> Result<Var<T>> {
    binary_cross_entropy(p_ab, v_s)
}

/// The complementary branch is scored against `1 - v_s`.
pub fn loss_attention_cab<T: Scalar>(p_cab: &Var<T>, v_s: &ArrayD<T>) -> Result<Var<T>> {
    binary_cross_entropy(p_cab, &complement_targets(v_s))
}

/// Sum of both classifier heads' cross-entropy against the real labels.
pub fn loss_cls_d<T: Scalar>(p_cls1: &Var<T>, p_cls2: &Var<T>, v_s: &ArrayD<T>) -> Result<Var<T>> {
    Ok(binary_cross_entropy(p_cls1, v_s)?.add(&binary_cross_entropy(p_cls2, v_s)?))
}

/// Both heads on the edited image against the target labels.
pub fn loss_cls_g<T: Scalar>(p_cls1: &Var<T>, p_cls2: &Var<T>, v_t: &ArrayD<T>) -> Result<Var<T>> {
    loss_cls_d(p_cls1, p_cls2, v_t)
}

/// Gradient penalty at `x̂ = αx + (1-α)y` with one `α` per sample.
///
/// The critic must map `[N, ...]` to `[N]` with samples independent, so the
/// gradient of the summed scores gives each sample's input gradient.
pub fn gradient_penalty_at<T, F>(critic: F, x: &Var<T>, y: &Var<T>, alpha: &[T]) -> Result<Var<T>>
where
    T: Scalar,
    F: FnOnce(&Var<T>) -> Result<Var<T>>,
{
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("real {:?} vs fake {:?}", x.shape(), y.shape())));
    }
    let n = x.shape()[0];
    if alpha.len() != n {
        return Err(Error::Shape(format!("{} interpolation weights for batch of {n}", alpha.len())));
    }
    let mut a_shape = vec![1; x.shape().len()];
    a_shape[0] = n;
    let a = ArrayD::from_shape_vec(IxDyn(&a_shape), alpha.to_vec()).expect("alpha shape");
    let (xv, yv) = (x.value(), y.value());
    let mixed = &yv.view() + &((xv - yv) * &a);
    let x_hat = Var::leaf(mixed);

    let scores = critic(&x_hat)?;
    if scores.value().len() != n {
        return Err(Error::Shape(format!("critic returned {:?} for batch of {n}", scores.shape())));
    }
    let g = grad(&scores.sum(), &[&x_hat], true)
        .pop()
        .flatten()
        .unwrap_or_else(|| Var::zeros(x.shape()));
    let norms = g.square().sum_to(&a_shape).shift(T::lit(NORM_EPS)).sqrt();
    Ok(norms.shift(-T::one()).square().mean())
}

pub fn gradient_penalty<T, F, R>(critic: F, x: &Var<T>, y: &Var<T>, rng: &mut R) -> Result<Var<T>>
where
    T: Scalar,
    F: FnOnce(&Var<T>) -> Result<Var<T>>,
    R: Rng,
{
    let n = x.shape().first().copied().unwrap_or(0);
    let alpha: Vec<T> = (0..n).map(|_| T::lit(rng.random::<f64>())).collect();
    gradient_penalty_at(critic, x, y, &alpha)
}

/// `E[D(x)] - E[D(y)] - λ_gp·gp`, the quantity the discriminator maximizes.
pub fn loss_adv_d<T: Scalar>(real: &Var<T>, fake: &Var<T>, gp: &Var<T>, lambda_gp: f64) -> Result<Var<T>> {
    if real.value().is_empty() || fake.value().is_empty() {
        return Err(Error::Shape("empty critic score batch".into()));
    }
    Ok(real.mean().sub(&fake.mean()).sub(&gp.scale(T::lit(lambda_gp))))
}

/// `E[D(y)]` on edited images.
pub fn loss_adv_g<T: Scalar>(fake: &Var<T>) -> Result<Var<T>> {
    if fake.value().is_empty() {
        return Err(Error::Shape("empty critic score batch".into()));
    }
    Ok(fake.mean())
}

/// Complementary matching between source-image features (`a_x`, `ac_x`) and
/// edited-image features (`a_y`, `ac_y`), all `[N, k, h, w]`.
///
/// Channels with `|v_d| = 1` are matched across branches, the rest within the
/// same branch. Each channel is normalized by `h·w`; the result is a batch mean.
pub fn loss_complementary_matching<T: Scalar>(
    a_x: &Var<T>,
    ac_x: &Var<T>,
    a_y: &Var<T>,
    ac_y: &Var<T>,
    v_d: &Array2<T>,
) -> Result<Var<T>> {
    let s = a_x.shape().to_vec();
    for (name, v) in [("CAFE(x)", ac_x), ("AF(y)", a_y), ("CAFE(y)", ac_y)] {
        if v.shape() != s.as_slice() {
            return Err(Error::Shape(format!("{name} is {:?}, AF(x) is {s:?}", v.shape())));
        }
    }
    if s.len() != 4 || v_d.dim() != (s[0], s[1]) {
        return Err(Error::Shape(format!("v_d {:?} does not match features {s:?}", v_d.dim())));
    }
    if let Some(bad) = v_d.iter().find(|d| ![-1.0, 0.0, 1.0].contains(&d.to_f64_lossy())) {
        return Err(Error::Domain(format!("difference entries must be -1, 0 or 1, got {bad}")));
    }
    let (n, k) = (s[0], s[1]);
    let swap = v_d.mapv(|d| d.abs()).into_shape_with_order(IxDyn(&[n, k, 1, 1])).unwrap();
    let keep = Arc::new(complement_targets(&swap));
    let swap = Arc::new(swap);
    let p = a_y.mul_const(keep.clone()).add(&ac_y.mul_const(swap.clone()));
    let q = ac_y.mul_const(keep).add(&a_y.mul_const(swap));
    let total = a_x.sub(&p).abs().add(&ac_x.sub(&q).abs()).sum();
    Ok(total.scale(T::one() / T::lit((n * s[2] * s[3]) as f64)))
}

/// Mean absolute pixel error.
pub fn loss_reconstruction<T: Scalar>(x: &Var<T>, x_rec: &Var<T>) -> Result<Var<T>> {
    if x.shape() != x_rec.shape() {
        return Err(Error::Shape(format!("image {:?} vs reconstruction {:?}", x.shape(), x_rec.shape())));
    }
    if x.value().is_empty() {
        return Err(Error::Shape("empty image batch".into()));
    }
    Ok(x.sub(x_rec).abs().mean())
}

/// Scalars that can be combined into weighted totals: plain numbers for
/// reporting, autograd nodes for training.
pub trait LossValue: Clone {
    fn plus(&self, o: &Self) -> Self;
    fn times(&self, w: f64) -> Self;
}

impl LossValue for f64 {
    fn plus(&self, o: &Self) -> Self {
        self + o
    }
    fn times(&self, w: f64) -> Self {
        self * w
    }
}

impl<T: Scalar> LossValue for Var<T> {
    fn plus(&self, o: &Self) -> Self {
        self.add(o)
    }
    fn times(&self, w: f64) -> Self {
        self.scale(T::lit(w))
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorLossParts<V> {
    /// Adversarial objective including the penalty (maximized by D).
    pub adv: V,
    /// `L_AB + L_CAB`.
    pub att: V,
    /// Sum over both classifier heads.
    pub cls: V,
}

#[derive(Debug, Clone)]
pub struct GeneratorLossParts<V> {
    /// `-E[D(y)]`, already in minimization sign.
    pub adv: V,
    pub cm: V,
    pub cls: V,
    pub rec: V,
}

pub fn total_loss_d<V: LossValue>(parts: &DiscriminatorLossParts<V>, w: &LossWeights) -> V {
    parts.adv.times(-1.0).plus(&parts.att.times(w.att)).plus(&parts.cls.times(w.d_cls))
}

pub fn total_loss_g<V: LossValue>(parts: &GeneratorLossParts<V>, w: &LossWeights) -> V {
    parts
        .adv
        .plus(&parts.cm.times(w.cm))
        .plus(&parts.cls.times(w.g_cls))
        .plus(&parts.rec.times(w.rec))
}
