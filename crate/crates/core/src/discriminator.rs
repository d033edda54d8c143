//! Discriminator with a shared mid-level feature extractor, an attention
//! branch (AB), a complementary attention branch (CAB), two attention-guided
//! multi-attribute classifiers and a Wasserstein critic head.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Scalar, Var};
use crate::error::{Error, Result};
use crate::generator::check_same_layout;
use crate::nn::{global_avg_pool, Bound, Conv2d, Init, InstanceNorm, Linear, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub attributes: usize,
    pub base_width: usize,
    pub max_width: usize,
    /// Stride-2 blocks before the attention tap point.
    pub extractor_blocks: usize,
    /// Extra stride-2 blocks in the critic head.
    pub adv_blocks: usize,
    pub classifier_width: usize,
    /// `false` builds the variant without CAB and classifier 2.
    pub complementary: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            attributes: 13,
            base_width: 32,
            max_width: 1024,
            extractor_blocks: 3,
            adv_blocks: 2,
            classifier_width: 128,
            complementary: true,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let depth = self.extractor_blocks + self.adv_blocks;
        if self.attributes == 0 || self.extractor_blocks == 0 || self.base_width == 0 {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        if self.resolution % (1 << depth) != 0 || self.resolution >> depth == 0 {
            return Err(Error::Config(format!(
                "resolution {} too small for {depth} stride-2 blocks",
                self.resolution
            )));
        }
        if (self.resolution >> self.extractor_blocks) < 2 {
            return Err(Error::Config("mid-level features need at least 2x2 pixels".into()));
        }
        Ok(())
    }

    pub fn width(&self, i: usize) -> usize {
        (self.base_width << i).min(self.max_width)
    }

    pub fn feature_channels(&self) -> usize {
        self.width(self.extractor_blocks - 1)
    }

    pub fn feature_size(&self) -> usize {
        self.resolution >> self.extractor_blocks
    }
}

/// Output of one attention branch.
#[derive(Debug, Clone)]
pub struct AttentionBundle<T: Scalar> {
    /// Attention features `[N, k, h, w]`.
    pub features: Var<T>,
    /// Attention maps `[N, k, h, w]`, entries in `(0, 1)`.
    pub maps: Var<T>,
    /// `GAP(features)` before the sigmoid, `[N, k]`.
    pub logits: Var<T>,
}

impl<T: Scalar> AttentionBundle<T> {
    pub fn probabilities(&self) -> Var<T> {
        self.logits.sigmoid()
    }
}

#[derive(Debug, Clone)]
pub struct AttentionBranch {
    feature_conv: Conv2d,
    map_in: Conv2d,
    map_norm: InstanceNorm,
    map_out: Conv2d,
}

impl AttentionBranch {
    fn new<T: Scalar, R: rand::Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize, k: usize) -> Self {
        init.scoped(name, |init| AttentionBranch {
            feature_conv: Conv2d::new(init, "features", channels, k, 1, 1, 0, true),
            map_in: Conv2d::new(init, "map_in", k, k, 1, 1, 0, true),
            map_norm: InstanceNorm::new(init, "map_norm", k),
            map_out: Conv2d::new(init, "map_out", k, k, 1, 1, 0, true),
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, f: &Var<T>) -> AttentionBundle<T> {
        let features = self.feature_conv.forward(p, f);
        let h = self.map_norm.forward(p, &self.map_in.forward(p, &features));
        let maps = self.map_out.forward(p, &h).sigmoid();
        let logits = global_avg_pool(&features);
        AttentionBundle { features, maps, logits }
    }
}

/// Weights `f'_i = f * M_i` for every attribute: `f: [N, C, h, w]`,
/// `maps: [N, k, h, w]` -> `[N, k, C, h, w]`.
pub fn apply_attention<T: Scalar>(f: &Var<T>, maps: &Var<T>) -> Result<Var<T>> {
    let (fs, ms) = (f.shape(), maps.shape());
    if fs.len() != 4 || ms.len() != 4 || fs[0] != ms[0] || fs[2..] != ms[2..] {
        return Err(Error::Shape(format!("cannot attend features {fs:?} with maps {ms:?}")));
    }
    let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let k = ms[1];
    Ok(f.reshape(&[n, 1, c, h, w]).mul(&maps.reshape(&[n, k, 1, h, w])))
}

/// Multi-attribute classifier whose trunk is shared by all attended stacks.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    conv1: Conv2d,
    conv2: Conv2d,
    out_weight: ParamId,
    out_bias: ParamId,
}

impl ClassifierHead {
    fn new<T: Scalar, R: rand::Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        channels: usize,
        width: usize,
        k: usize,
    ) -> Self {
        init.scoped(name, |init| ClassifierHead {
            conv1: Conv2d::new(init, "conv1", channels, width, 3, 1, 1, true),
            conv2: Conv2d::new(init, "conv2", width, width, 4, 2, 1, true),
            out_weight: init.fan_in("out_weight", &[k, width], width),
            out_bias: init.fan_in("out_bias", &[k], width),
        })
    }

    /// `attended: [N, k, C, h, w]` -> logits `[N, k]`.
    pub fn logits<T: Scalar>(&self, p: &Bound<T>, attended: &Var<T>) -> Result<Var<T>> {
        let s = attended.shape();
        if s.len() != 5 {
            return Err(Error::Shape(format!("classifier expects [N, k, C, h, w], got {s:?}")));
        }
        let (n, k) = (s[0], s[1]);
        let want_k = p.get(self.out_bias).shape()[0];
        if k != want_k {
            return Err(Error::Shape(format!("classifier built for {want_k} attributes, got {k}")));
        }
        let slope = T::lit(0.2);
        let stacked = attended.reshape(&[n * k, s[2], s[3], s[4]]);
        let h = self.conv1.forward(p, &stacked).leaky_relu(slope);
        let h = self.conv2.forward(p, &h).leaky_relu(slope);
        let pooled = global_avg_pool(&h);
        let width = pooled.shape()[1];
        let per_attr = pooled.reshape(&[n, k, width]).mul(&p.get(self.out_weight).reshape(&[1, k, width]));
        Ok(per_attr.sum_to(&[n, k, 1]).reshape(&[n, k]).add(p.get(self.out_bias)))
    }
}

#[derive(Debug, Clone)]
struct CriticHead {
    convs: Vec<Conv2d>,
    linear: Linear,
}

/// Everything the discriminator produces for one batch.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutputs<T: Scalar> {
    pub features: Var<T>,
    /// Critic scores `[N]`, unbounded.
    pub adv: Var<T>,
    pub ab: AttentionBundle<T>,
    pub cab: Option<AttentionBundle<T>>,
    /// Classifier logits `[N, k]`; head 2 is absent without CAB.
    pub cls1: Var<T>,
    pub cls2: Option<Var<T>>,
}

#[derive(Debug, Clone)]
pub struct Discriminator<T: Scalar> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    extractor: Vec<Conv2d>,
    ab: AttentionBranch,
    cab: Option<AttentionBranch>,
    cls1: ClassifierHead,
    cls2: Option<ClassifierHead>,
    critic: CriticHead,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut params, &mut rng);
        let k = config.attributes;

        let mut extractor = Vec::new();
        let mut in_ch = 3;
        for i in 0..config.extractor_blocks {
            let w = config.width(i);
            extractor.push(Conv2d::new(&mut init, &format!("extract{i}"), in_ch, w, 4, 2, 1, true));
            in_ch = w;
        }
        let c = config.feature_channels();
        let ab = AttentionBranch::new(&mut init, "ab", c, k);
        let cab = config.complementary.then(|| AttentionBranch::new(&mut init, "cab", c, k));
        let cls1 = ClassifierHead::new(&mut init, "cls1", c, config.classifier_width, k);
        let cls2 = config
            .complementary
            .then(|| ClassifierHead::new(&mut init, "cls2", c, config.classifier_width, k));

        let mut convs = Vec::new();
        let mut ch = c;
        for j in 0..config.adv_blocks {
            let w = config.width(config.extractor_blocks + j);
            convs.push(Conv2d::new(&mut init, &format!("critic{j}"), ch, w, 4, 2, 1, true));
            ch = w;
        }
        let s = config.resolution >> (config.extractor_blocks + config.adv_blocks);
        let linear = Linear::new(&mut init, "critic_out", ch * s * s, 1);
        let critic = CriticHead { convs, linear };
        Ok(Self { config, params, extractor, ab, cab, cls1, cls2, critic })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamStore<T>) -> Result<Self> {
        let mut d = Self::new(config, 0)?;
        check_same_layout(&d.params, &params, "discriminator")?;
        d.params = params;
        Ok(d)
    }

    pub fn extract_features(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let r = self.config.resolution;
        match x.shape() {
            [_, 3, h, w] if *h == r && *w == r => {}
            s => return Err(Error::Shape(format!("discriminator expects [N, 3, {r}, {r}], got {s:?}"))),
        }
        let slope = T::lit(0.2);
        let mut h = x.clone();
        for conv in &self.extractor {
            h = conv.forward(p, &h).leaky_relu(slope);
        }
        Ok(h)
    }

    pub fn attention(&self, p: &Bound<T>, f: &Var<T>) -> AttentionBundle<T> {
        self.ab.forward(p, f)
    }

    pub fn complementary_attention(&self, p: &Bound<T>, f: &Var<T>) -> Option<AttentionBundle<T>> {
        self.cab.as_ref().map(|b| b.forward(p, f))
    }

    /// Head 1 consumes AB-attended features, head 2 CAB-attended ones.
    pub fn classify(&self, p: &Bound<T>, attended: &Var<T>, head: usize) -> Result<Var<T>> {
        match head {
            1 => self.cls1.logits(p, attended),
            2 => self
                .cls2
                .as_ref()
                .ok_or_else(|| Error::Config("classifier 2 is disabled without CAB".into()))?
                .logits(p, attended),
            other => Err(Error::Config(format!("no classifier head {other}"))),
        }
    }

    /// Critic score per image from mid-level features: `[N]`.
    pub fn adversarial_score(&self, p: &Bound<T>, f: &Var<T>) -> Var<T> {
        let slope = T::lit(0.2);
        let mut h = f.clone();
        for conv in &self.critic.convs {
            h = conv.forward(p, &h).leaky_relu(slope);
        }
        let n = h.shape()[0];
        let flat = h.reshape(&[n, h.value().len() / n]);
        let s = self.critic.linear.forward(p, &flat);
        s.reshape(&[n])
    }

    /// Critic score straight from images (used for the gradient penalty).
    pub fn critic(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let f = self.extract_features(p, x)?;
        Ok(self.adversarial_score(p, &f))
    }

    pub fn forward(&self, p: &Bound<T>, x: &Var<T>) -> Result<DiscriminatorOutputs<T>> {
        let f = self.extract_features(p, x)?;
        let adv = self.adversarial_score(p, &f);
        let ab = self.attention(p, &f);
        let cls1 = self.classify(p, &apply_attention(&f, &ab.maps)?, 1)?;
        let (cab, cls2) = match self.complementary_attention(p, &f) {
            Some(cab) => {
                let c2 = self.classify(p, &apply_attention(&f, &cab.maps)?, 2)?;
                (Some(cab), Some(c2))
            }
            None => (None, None),
        };
        Ok(DiscriminatorOutputs { features: f, adv, ab, cab, cls1, cls2 })
    }

    /// Inference helper returning plain arrays.
    pub fn run(&self, x: &Array4<T>) -> Result<DiscriminatorArrays<T>> {
        no_grad(|| {
            let p = self.params.bind(false);
            let out = self.forward(&p, &Var::constant(x.clone().into_dyn()))?;
            let a4 = |v: &Var<T>| -> Array4<T> { v.value().clone().into_dimensionality().unwrap() };
            let a2 = |v: &Var<T>| -> Array2<T> { v.value().clone().into_dimensionality().unwrap() };
            Ok(DiscriminatorArrays {
                adv: out.adv.value().iter().copied().collect(),
                af: a4(&out.ab.features),
                maps: a4(&out.ab.maps),
                p_ab: a2(&out.ab.probabilities()),
                cafe: out.cab.as_ref().map(|b| a4(&b.features)),
                maps_c: out.cab.as_ref().map(|b| a4(&b.maps)),
                p_cab: out.cab.as_ref().map(|b| a2(&b.probabilities())),
                p_cls1: a2(&out.cls1.sigmoid()),
                p_cls2: out.cls2.as_ref().map(|c| a2(&c.sigmoid())),
            })
        })
    }
}

/// Detached discriminator outputs.
#[derive(Debug, Clone)]
pub struct DiscriminatorArrays<T> {
    pub adv: Vec<T>,
    pub af: Array4<T>,
    pub maps: Array4<T>,
    pub p_ab: Array2<T>,
    pub cafe: Option<Array4<T>>,
    pub maps_c: Option<Array4<T>>,
    pub p_cab: Option<Array2<T>>,
    pub p_cls1: Array2<T>,
    pub p_cls2: Option<Array2<T>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(k: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            resolution: 32,
            attributes: k,
            base_width: 8,
            max_width: 64,
            extractor_blocks: 2,
            adv_blocks: 1,
            classifier_width: 8,
            complementary: true,
        }
    }

    #[test]
    fn shape_calculus_at_full_resolution() {
        let cfg = DiscriminatorConfig { attributes: 3, base_width: 4, classifier_width: 4, ..Default::default() };
        assert_eq!(cfg.feature_size(), 16);
        let d = Discriminator::<f32>::new(cfg, 0).unwrap();
        let p = d.params.bind(false);
        let x = Var::constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 3, 128, 128])));
        let f = d.extract_features(&p, &x).unwrap();
        assert_eq!(f.shape(), &[1, 16, 16, 16]);
    }

    #[test]
    fn no_cab_variant_has_no_second_head() {
        let d = Discriminator::<f32>::new(DiscriminatorConfig { complementary: false, ..desk(3) }, 0).unwrap();
        assert!(d.params.names().iter().all(|n| !n.starts_with("cab") && !n.starts_with("cls2")));
        let out = d.run(&Array4::zeros((2, 3, 32, 32))).unwrap();
        assert!(out.cafe.is_none() && out.p_cls2.is_none());
        let p = d.params.bind(false);
        let attended = Var::zeros(&[1, 3, 32, 8, 8]);
        assert!(d.classify(&p, &attended, 2).is_err());
    }

    #[test]
    fn attention_rejects_spatial_mismatch() {
        let f = Var::<f32>::zeros(&[1, 4, 8, 8]);
        let m = Var::<f32>::zeros(&[1, 3, 4, 4]);
        assert!(matches!(apply_attention(&f, &m), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_of_n_gives_n_scores() {
        let d = Discriminator::<f32>::new(desk(3), 1).unwrap();
        let out = d.run(&Array4::from_elem((5, 3, 32, 32), 0.1)).unwrap();
        assert_eq!(out.adv.len(), 5);
    }
}
