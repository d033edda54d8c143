//! Encoder-decoder generator conditioned on a difference attribute vector.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Scalar, Var};
use crate::data::AttributeVector;
use crate::error::{Error, Result};
use crate::nn::{broadcast_planes, Bound, Conv2d, ConvTranspose2d, Init, InstanceNorm, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Encoder features pass through a `v_d`-conditioned sigmoid gate.
    Gated,
    /// Plain concatenation of encoder features.
    Concat,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub attributes: usize,
    pub levels: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub skip: SkipMode,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { resolution: 128, attributes: 13, levels: 5, base_width: 32, max_width: 1024, skip: SkipMode::Gated }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.attributes == 0 || self.base_width == 0 {
            return Err(Error::Config("generator levels, attributes and width must be positive".into()));
        }
        let div = 1usize << self.levels;
        if self.resolution % div != 0 || self.resolution < div {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^{} = {div}",
                self.resolution, self.levels
            )));
        }
        Ok(())
    }

    /// Channel width of encoder level `i` (0-based).
    pub fn width(&self, i: usize) -> usize {
        (self.base_width << i).min(self.max_width)
    }

    pub fn bottleneck_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.resolution >> self.levels;
        [batch, self.width(self.levels - 1), s, s]
    }
}

/// `v_t - v_s`, entries in `{-1, 0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DifferenceVector(Vec<i8>);

impl DifferenceVector {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0; k])
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

pub fn diff_vector(target: &AttributeVector, source: &AttributeVector) -> Result<DifferenceVector> {
    if target.len() != source.len() {
        return Err(Error::Shape(format!(
            "target has {} attributes, source has {}",
            target.len(),
            source.len()
        )));
    }
    Ok(DifferenceVector(
        target.values().iter().zip(source.values()).map(|(&t, &s)| t as i8 - s as i8).collect(),
    ))
}

/// Bottleneck plus the per-level encoder features kept for skips.
#[derive(Debug, Clone)]
pub struct Latent<T: Scalar> {
    /// Level outputs from finest to coarsest; the last one is the bottleneck.
    pub features: Vec<Var<T>>,
}

impl<T: Scalar> Latent<T> {
    pub fn bottleneck(&self) -> &Var<T> {
        self.features.last().expect("at least one level")
    }
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    conv: Conv2d,
    norm: InstanceNorm,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    deconv: ConvTranspose2d,
    norm: Option<InstanceNorm>,
}

#[derive(Debug, Clone)]
pub struct Generator<T: Scalar> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    encoder: Vec<EncoderLevel>,
    decoder: Vec<DecoderLevel>,
    /// `gates[i]` guards the skip from encoder level `i` (only for gated mode).
    gates: Vec<Option<Conv2d>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut params, &mut rng);
        let (l, k) = (config.levels, config.attributes);

        let mut encoder = Vec::with_capacity(l);
        let mut in_ch = 3;
        for i in 0..l {
            let w = config.width(i);
            encoder.push(init.scoped(&format!("enc{i}"), |init| EncoderLevel {
                conv: Conv2d::new(init, "conv", in_ch, w, 4, 2, 1, true),
                norm: InstanceNorm::new(init, "norm", w),
            }));
            in_ch = w;
        }

        let skips = config.skip != SkipMode::None;
        let mut gates = Vec::with_capacity(l);
        for i in 0..l.saturating_sub(1) {
            let w = config.width(i);
            gates.push(
                (config.skip == SkipMode::Gated)
                    .then(|| Conv2d::new(&mut init, &format!("gate{i}"), w + k, w, 1, 1, 0, true)),
            );
        }

        // Decoder step t maps level t (coarse) to level t - 1.
        let mut decoder = Vec::with_capacity(l);
        for t in (0..l).rev() {
            let input = if t == l - 1 {
                config.width(t) + k
            } else if skips {
                2 * config.width(t)
            } else {
                config.width(t)
            };
            let (out, last) = if t == 0 { (3, true) } else { (config.width(t - 1), false) };
            decoder.push(init.scoped(&format!("dec{t}"), |init| DecoderLevel {
                deconv: ConvTranspose2d::new(init, "deconv", input, out, 4, 2, 1, true),
                norm: (!last).then(|| InstanceNorm::new(init, "norm", out)),
            }));
        }
        Ok(Self { config, params, encoder, decoder, gates })
    }

    /// Rebuilds the architecture for `config` and adopts `params`, which must
    /// match it name for name and shape for shape.
    pub fn from_params(config: GeneratorConfig, params: ParamStore<T>) -> Result<Self> {
        let mut g = Self::new(config, 0)?;
        check_same_layout(&g.params, &params, "generator")?;
        g.params = params;
        Ok(g)
    }

    fn check_input(&self, x: &Var<T>) -> Result<()> {
        let r = self.config.resolution;
        match x.shape() {
            [_, 3, h, w] if *h == r && *w == r => Ok(()),
            s => Err(Error::Shape(format!("generator expects [N, 3, {r}, {r}], got {s:?}"))),
        }
    }

    pub fn encode(&self, p: &Bound<T>, x: &Var<T>) -> Result<Latent<T>> {
        self.check_input(x)?;
        let slope = T::lit(0.2);
        let mut h = x.clone();
        let mut features = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            h = level.norm.forward(p, &level.conv.forward(p, &h)).leaky_relu(slope);
            features.push(h.clone());
        }
        Ok(Latent { features })
    }

    /// `vd: [N, k]` with entries in `{-1, 0, 1}`.
    pub fn decode(&self, p: &Bound<T>, z: &Latent<T>, vd: &Var<T>) -> Result<Var<T>> {
        let l = self.config.levels;
        if z.features.len() != l {
            return Err(Error::Shape(format!("latent has {} levels, expected {l}", z.features.len())));
        }
        let expect = self.config.bottleneck_shape(z.bottleneck().shape()[0]);
        if z.bottleneck().shape() != expect {
            return Err(Error::Shape(format!(
                "bottleneck {:?} does not match config {:?}",
                z.bottleneck().shape(),
                expect
            )));
        }
        let n = expect[0];
        if vd.shape() != [n, self.config.attributes] {
            return Err(Error::Shape(format!(
                "difference vector {:?}, expected [{n}, {}]",
                vd.shape(),
                self.config.attributes
            )));
        }
        let planes = |h: usize| broadcast_planes(vd, h, h);
        let s = expect[2];
        let mut h = Var::concat(&[z.bottleneck().clone(), planes(s)], 1);
        for (step, level) in self.decoder.iter().enumerate() {
            let t = l - 1 - step;
            h = level.deconv.forward(p, &h);
            match &level.norm {
                Some(norm) => {
                    h = norm.forward(p, &h).relu();
                    let enc = &z.features[t - 1];
                    match self.config.skip {
                        SkipMode::None => {}
                        SkipMode::Concat => h = Var::concat(&[h, enc.clone()], 1),
                        SkipMode::Gated => {
                            let gate = self.gates[t - 1].as_ref().expect("gate per level");
                            let size = enc.shape()[2];
                            let g = gate
                                .forward(p, &Var::concat(&[enc.clone(), planes(size)], 1))
                                .sigmoid();
                            h = Var::concat(&[h, enc.mul(&g)], 1);
                        }
                    }
                }
                None => h = h.tanh(),
            }
        }
        Ok(h)
    }

    /// `decode(encode(x), v_t - v_s)`.
    pub fn forward(&self, p: &Bound<T>, x: &Var<T>, vd: &Var<T>) -> Result<Var<T>> {
        let z = self.encode(p, x)?;
        self.decode(p, &z, vd)
    }

    pub fn edit(&self, p: &Bound<T>, x: &Var<T>, source: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
        if source.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "source {:?} and target {:?} differ",
                source.shape(),
                target.shape()
            )));
        }
        self.forward(p, x, &target.sub(source))
    }

    /// Inference on plain arrays; `vd` rows are difference vectors.
    pub fn run(&self, x: &Array4<T>, vd: &Array2<T>) -> Result<Array4<T>> {
        no_grad(|| {
            let p = self.params.bind(false);
            let y = self.forward(&p, &Var::constant(x.clone().into_dyn()), &Var::constant(vd.clone().into_dyn()))?;
            Ok(y.value().clone().into_dimensionality().expect("4-D output"))
        })
    }

    pub fn reconstruct(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let vd = Array2::zeros((x.shape()[0], self.config.attributes));
        self.run(x, &vd)
    }
}

pub(crate) fn check_same_layout<T: Scalar>(want: &ParamStore<T>, got: &ParamStore<T>, what: &str) -> Result<()> {
    if want.names() != got.names() {
        return Err(Error::Checkpoint(format!("{what} parameter names do not match the configuration")));
    }
    for (i, name) in want.names().iter().enumerate() {
        if want.value_at(i).shape() != got.value_at(i).shape() {
            return Err(Error::Checkpoint(format!(
                "{what} parameter {name} has shape {:?}, expected {:?}",
                got.value_at(i).shape(),
                want.value_at(i).shape()
            )));
        }
    }
    Ok(())
}
