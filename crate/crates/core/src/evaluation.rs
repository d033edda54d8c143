//! Independent attribute classifier, edited-image accuracy, FID, attention
//! heatmaps, localization scoring and ablation tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, no_grad, Var};
use crate::data::{crop_resize_bilinear, epoch_order, ImageSource, InMemoryDataset};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{check_same_layout, Generator};
use crate::losses::binary_cross_entropy_with_logits;
use crate::nn::{global_avg_pool, Adam, Bound, Conv2d, Init, Linear, ParamStore};
use crate::training::{train, TrainConfig};

/// Inference chunk size.
const CHUNK: usize = 64;

// ---------------------------------------------------------------------------
// Evaluation classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub resolution: usize,
    pub attributes: Vec<String>,
    pub base_width: usize,
    pub blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Training fails below this held-out bit accuracy.
    pub min_heldout_accuracy: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            attributes: Vec::new(),
            base_width: 16,
            blocks: 3,
            epochs: 15,
            batch_size: 32,
            lr: 1e-3,
            seed: 7,
            min_heldout_accuracy: 0.85,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() || self.blocks == 0 || self.base_width == 0 || self.batch_size == 0 {
            return Err(Error::Config("classifier needs attributes, blocks, width and batch size".into()));
        }
        if self.resolution % (1 << self.blocks) != 0 {
            return Err(Error::Config(format!(
                "resolution {} not divisible by 2^{}",
                self.resolution, self.blocks
            )));
        }
        Ok(())
    }

    pub fn width(&self, i: usize) -> usize {
        self.base_width << i
    }

    pub fn embedding_dim(&self) -> usize {
        self.width(self.blocks - 1)
    }
}

/// Multi-label attribute classifier kept separate from the discriminator.
#[derive(Debug, Clone)]
pub struct EvalClassifier {
    pub config: ClassifierConfig,
    pub params: ParamStore<f32>,
    pub heldout_accuracy: f64,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl EvalClassifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init::new(&mut params, &mut rng);
        let mut convs = Vec::new();
        let mut ch = 3;
        for i in 0..config.blocks {
            convs.push(Conv2d::new(&mut init, &format!("conv{i}"), ch, config.width(i), 4, 2, 1, true));
            ch = config.width(i);
        }
        let head = Linear::new(&mut init, "head", ch, config.attributes.len());
        Ok(Self { config, params, heldout_accuracy: f64::NAN, convs, head })
    }

    pub fn from_params(config: ClassifierConfig, params: ParamStore<f32>, heldout_accuracy: f64) -> Result<Self> {
        let mut c = Self::new(config)?;
        check_same_layout(&c.params, &params, "classifier")?;
        c.params = params;
        c.heldout_accuracy = heldout_accuracy;
        Ok(c)
    }

    fn check_input(&self, x: &[usize]) -> Result<()> {
        let r = self.config.resolution;
        match x {
            [_, 3, h, w] if *h == r && *w == r => Ok(()),
            s => Err(Error::Shape(format!("classifier expects [N, 3, {r}, {r}], got {s:?}"))),
        }
    }

    fn embed_var(&self, p: &Bound<f32>, x: &Var<f32>) -> Var<f32> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(p, &h).leaky_relu(0.2);
        }
        global_avg_pool(&h)
    }

    fn logits_var(&self, p: &Bound<f32>, x: &Var<f32>) -> Var<f32> {
        self.head.forward(p, &self.embed_var(p, x))
    }

    fn chunked(&self, x: &Array4<f32>, f: impl Fn(&Bound<f32>, &Var<f32>) -> Var<f32>) -> Result<Array2<f32>> {
        self.check_input(x.shape())?;
        no_grad(|| {
            let p = self.params.bind(false);
            let mut parts = Vec::new();
            for start in (0..x.shape()[0]).step_by(CHUNK) {
                let end = (start + CHUNK).min(x.shape()[0]);
                let xb = Var::constant(x.slice(s![start..end, .., .., ..]).to_owned().into_dyn());
                parts.push(f(&p, &xb).value().clone().into_dimensionality::<ndarray::Ix2>().unwrap());
            }
            let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
            Ok(ndarray::concatenate(Axis(0), &views).unwrap_or_else(|_| Array2::zeros((0, 0))))
        })
    }

    pub fn logits(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        self.chunked(x, |p, xb| self.logits_var(p, xb))
    }

    pub fn probabilities(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        Ok(self.logits(x)?.mapv(|z| 1.0 / (1.0 + (-z).exp())))
    }

    /// Hard 0/1 predictions at probability 0.5.
    pub fn predict(&self, x: &Array4<f32>) -> Result<Array2<u8>> {
        Ok(self.logits(x)?.mapv(|z| u8::from(z > 0.0)))
    }

    /// Penultimate (pooled) features.
    pub fn embed(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        self.chunked(x, |p, xb| self.embed_var(p, xb))
    }

    /// Fraction of correctly predicted bits.
    pub fn bit_accuracy(&self, data: &dyn ImageSource) -> Result<f64> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let (x, labels) = data.batch(&idx)?;
        let pred = self.predict(&x)?;
        let hits = pred.iter().zip(labels.iter()).filter(|(p, l)| **p as f32 == **l).count();
        Ok(hits as f64 / pred.len().max(1) as f64)
    }
}

/// Trains the evaluation classifier and records its held-out accuracy.
pub fn train_eval_classifier(
    config: ClassifierConfig,
    train_set: &dyn ImageSource,
    heldout: &dyn ImageSource,
) -> Result<EvalClassifier> {
    let mut c = EvalClassifier::new(config)?;
    for data in [train_set, heldout] {
        if data.is_empty() {
            return Err(Error::Config("classifier train and held-out sets must be nonempty".into()));
        }
        if data.attribute_names() != c.config.attributes.as_slice() {
            return Err(Error::Config("dataset attributes differ from classifier attributes".into()));
        }
        c.check_input(&[1, 3, data.resolution(), data.resolution()])?;
    }
    let mut opt = Adam::new(&c.params, 0.9, 0.999);
    let n = train_set.len();
    for epoch in 0..c.config.epochs {
        let order = epoch_order(n, c.config.seed, epoch);
        for idx in order.chunks(c.config.batch_size) {
            let (x, y) = train_set.batch(idx)?;
            let p = c.params.bind(true);
            let loss = binary_cross_entropy_with_logits(
                &c.logits_var(&p, &Var::constant(x.into_dyn())),
                &y.into_dyn(),
            )?;
            if !loss.item().is_finite() {
                return Err(Error::Numeric("classifier loss is not finite".into()));
            }
            let grads = grad(&loss, &p.vars(), false);
            drop(p);
            opt.update(&mut c.params, &grads, c.config.lr);
        }
    }
    c.heldout_accuracy = c.bit_accuracy(heldout)?;
    if c.heldout_accuracy < c.config.min_heldout_accuracy {
        return Err(Error::Numeric(format!(
            "evaluation classifier underfits: held-out accuracy {:.4} < {:.2}",
            c.heldout_accuracy, c.config.min_heldout_accuracy
        )));
    }
    Ok(c)
}

// ---------------------------------------------------------------------------
// Edited-image accuracy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub model_id: String,
    pub attributes: Vec<String>,
    pub accuracy: Vec<f64>,
    pub counts: Vec<usize>,
    pub average: f64,
    pub note: String,
}

/// Printed with every report: the classifier is trained here, not borrowed.
pub const CLASSIFIER_CAVEAT: &str = "scored by a locally trained evaluation classifier; \
     full-scale numbers are not directly comparable to published tables";

impl AccuracyReport {
    pub fn new(model_id: impl Into<String>, attributes: Vec<String>, accuracy: Vec<f64>, counts: Vec<usize>) -> Self {
        let average = accuracy.iter().sum::<f64>() / accuracy.len().max(1) as f64;
        Self { model_id: model_id.into(), attributes, accuracy, counts, average, note: CLASSIFIER_CAVEAT.into() }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,attribute,accuracy,count\n");
        for ((a, acc), n) in self.attributes.iter().zip(&self.accuracy).zip(&self.counts) {
            let _ = writeln!(s, "{},{a},{acc:.6},{n}", self.model_id);
        }
        let total: usize = self.counts.iter().sum();
        let _ = writeln!(s, "{},average,{:.6},{total}", self.model_id, self.average);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{:<24}", self.model_id);
        for (a, acc) in self.attributes.iter().zip(&self.accuracy) {
            let _ = write!(s, " {a}={acc:.4}");
        }
        let _ = write!(s, " average={:.4}", self.average);
        s
    }
}

/// Forced-flip protocol: for every attribute, each of the first `n` test
/// images has that bit flipped (others kept), is edited by `editor`, and is
/// scored on whether the classifier reads the flipped bit back.
pub fn eval_edit_accuracy<F>(
    editor: F,
    classifier: &EvalClassifier,
    test: &dyn ImageSource,
    n: usize,
    model_id: &str,
) -> Result<AccuracyReport>
where
    F: Fn(&Array4<f32>, &Array2<f32>) -> Result<Array4<f32>>,
{
    if test.is_empty() || n == 0 {
        return Err(Error::Config("evaluation needs a nonempty test set".into()));
    }
    if n > test.len() {
        return Err(Error::Config(format!("{n} images per attribute requested, test set has {}", test.len())));
    }
    if test.attribute_names() != classifier.config.attributes.as_slice() {
        return Err(Error::Config("test set attributes differ from the classifier's".into()));
    }
    let k = test.attribute_names().len();
    let mut accuracy = Vec::with_capacity(k);
    for attr in 0..k {
        let mut hits = 0usize;
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let (x, v_s) = test.batch(&idx)?;
            let mut v_d = Array2::zeros(v_s.dim());
            for b in 0..idx.len() {
                v_d[[b, attr]] = 1.0 - 2.0 * v_s[[b, attr]];
            }
            let y = editor(&x, &v_d)?;
            let pred = classifier.predict(&y)?;
            for b in 0..idx.len() {
                let target = (1.0 - v_s[[b, attr]]) as u8;
                hits += usize::from(pred[[b, attr]] == target);
            }
        }
        accuracy.push(hits as f64 / n as f64);
    }
    Ok(AccuracyReport::new(model_id, test.attribute_names().to_vec(), accuracy, vec![n; k]))
}

pub fn eval_attribute_accuracy(
    generator: &Generator<f32>,
    classifier: &EvalClassifier,
    test: &dyn ImageSource,
    n: usize,
    model_id: &str,
) -> Result<AccuracyReport> {
    eval_edit_accuracy(|x, vd| generator.run(x, vd), classifier, test, n, model_id)
}

// ---------------------------------------------------------------------------
// FID
// ---------------------------------------------------------------------------

/// Regularizer added to both covariances when either is singular.
pub const FID_EPS: f64 = 1e-6;

/// Minimum set size for image-level FID.
pub const FID_MIN_IMAGES: usize = 64;

/// Anything that maps images to fixed-length feature vectors.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, x: &Array4<f32>) -> Result<Array2<f64>>;
}

impl Embedder for EvalClassifier {
    fn dim(&self) -> usize {
        self.config.embedding_dim()
    }

    fn embed(&self, x: &Array4<f32>) -> Result<Array2<f64>> {
        Ok(EvalClassifier::embed(self, x)?.mapv(f64::from))
    }
}

/// Sample mean and unbiased covariance of the rows of `x`.
pub fn gaussian_fit(x: ArrayView2<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::Shape(format!("need at least 2 feature rows, got {n}")));
    }
    let m = DMatrix::from_row_iterator(n, d, x.iter().copied());
    let mu = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new((a + a.transpose()) * 0.5);
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.min()
}

/// `‖μa−μb‖² + tr(Σa + Σb − 2(Σa Σb)^½)`, with the trace of the square root
/// taken as `tr((√Σa Σb √Σa)^½)`.
pub fn frechet_distance(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "Gaussian dimensions differ: {d} vs {} (covariances {:?}, {:?})",
            mu_b.len(),
            cov_a.shape(),
            cov_b.shape()
        )));
    }
    let (mut ca, mut cb) = (cov_a.clone(), cov_b.clone());
    if min_eigenvalue(&ca) < FID_EPS || min_eigenvalue(&cb) < FID_EPS {
        let reg = DMatrix::identity(d, d) * FID_EPS;
        ca += &reg;
        cb += &reg;
    }
    let ra = sym_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let tr_sqrt: f64 = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let dist = (mu_a - mu_b).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    if !dist.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(dist.max(0.0))
}

/// FID between two precomputed feature sets (rows are samples).
pub fn fid_from_features(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("embedding dimensions differ: {} vs {}", a.ncols(), b.ncols())));
    }
    let (mu_a, cov_a) = gaussian_fit(a)?;
    let (mu_b, cov_b) = gaussian_fit(b)?;
    frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b)
}

pub fn compute_fid(set_a: &Array4<f32>, set_b: &Array4<f32>, embedder: &dyn Embedder) -> Result<f64> {
    for (name, set) in [("first", set_a), ("second", set_b)] {
        if set.shape()[0] < FID_MIN_IMAGES {
            return Err(Error::Config(format!(
                "{name} FID set has {} images, need at least {FID_MIN_IMAGES}",
                set.shape()[0]
            )));
        }
    }
    let (fa, fb) = (embedder.embed(set_a)?, embedder.embed(set_b)?);
    if fa.ncols() != embedder.dim() || fb.ncols() != embedder.dim() {
        return Err(Error::Shape("embedder returned features of unexpected width".into()));
    }
    fid_from_features(fa.view(), fb.view())
}

// ---------------------------------------------------------------------------
// Attention heatmaps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "AF")]
    Af,
    #[serde(rename = "CAFE")]
    Cafe,
}

impl Branch {
    pub fn tag(&self) -> &'static str {
        match self {
            Branch::Af => "AF",
            Branch::Cafe => "CAFE",
        }
    }
}

/// One attribute's attention map, normalized to `[0, 1]` at image size.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapOverlay {
    pub attribute: String,
    pub branch: Branch,
    pub map: Array2<f32>,
}

/// Min-max normalization; a constant map becomes all zeros.
pub fn normalize_map(a: ArrayView2<f32>) -> Array2<f32> {
    let lo = a.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = a.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if range.is_finite() && range > 0.0 {
        a.mapv(|v| (v - lo) / range)
    } else {
        Array2::zeros(a.raw_dim())
    }
}

/// Bilinear upsampling of a single-channel map.
pub fn upsample_map(a: &Array2<f32>, size: usize) -> Array2<f32> {
    let (h, w) = a.dim();
    let chw = a.clone().insert_axis(Axis(0));
    crop_resize_bilinear(&chw, (0, 0, w, h), size, size).index_axis_move(Axis(0), 0)
}

fn colormap(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

impl HeatmapOverlay {
    /// Blends the colorized map onto `base` (`[3, r, r]` in `[-1, 1]`).
    pub fn render(&self, base: &Array3<f32>) -> RgbImage {
        let (h, w) = self.map.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let heat = colormap(self.map[[y, x]]);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let b = (base[[c, y, x]] + 1.0) * 0.5;
                px[c] = ((0.5 * b + 0.5 * heat[c]) * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            Rgb(px)
        })
    }

    /// Grayscale payload of the normalized map.
    pub fn to_gray(&self) -> image::GrayImage {
        let (h, w) = self.map.dim();
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([(self.map[[y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }

    pub fn file_name(&self, image: &str) -> String {
        format!("{image}_{}_{}.png", self.attribute, self.branch.tag())
    }
}

/// AF and CAFE overlays for one image; `cafe` is `None` without CAB.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub af: Vec<HeatmapOverlay>,
    pub cafe: Option<Vec<HeatmapOverlay>>,
}

impl AttentionMaps {
    pub fn count(&self) -> usize {
        self.af.len() + self.cafe.as_ref().map_or(0, Vec::len)
    }
}

fn overlays(features: &Array4<f32>, b: usize, names: &[String], branch: Branch, size: usize) -> Vec<HeatmapOverlay> {
    names
        .iter()
        .enumerate()
        .map(|(i, name)| HeatmapOverlay {
            attribute: name.clone(),
            branch,
            map: upsample_map(&normalize_map(features.slice(s![b, i, .., ..])), size),
        })
        .collect()
}

/// Attention overlays for a batch `x: [N, 3, r, r]`.
pub fn render_attention_batch(d: &Discriminator<f32>, x: &Array4<f32>, names: &[String]) -> Result<Vec<AttentionMaps>> {
    if names.len() != d.config.attributes {
        return Err(Error::Config(format!(
            "{} attribute names for a discriminator with {}",
            names.len(),
            d.config.attributes
        )));
    }
    let size = x.shape()[2];
    let mut out = Vec::with_capacity(x.shape()[0]);
    for start in (0..x.shape()[0]).step_by(CHUNK) {
        let end = (start + CHUNK).min(x.shape()[0]);
        let arrays = d.run(&x.slice(s![start..end, .., .., ..]).to_owned())?;
        for b in 0..end - start {
            out.push(AttentionMaps {
                af: overlays(&arrays.af, b, names, Branch::Af, size),
                cafe: arrays.cafe.as_ref().map(|c| overlays(c, b, names, Branch::Cafe, size)),
            });
        }
    }
    Ok(out)
}

/// Attention overlays for a single image `x: [3, r, r]`.
pub fn render_attention_maps(d: &Discriminator<f32>, x: &Array3<f32>, names: &[String]) -> Result<AttentionMaps> {
    let batch = x.clone().insert_axis(Axis(0));
    Ok(render_attention_batch(d, &batch, names)?.remove(0))
}

/// Writes `{image}_{attribute}_{AF|CAFE}.png` files into `dir`.
pub fn write_heatmaps(maps: &AttentionMaps, base: &Array3<f32>, image: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for o in maps.af.iter().chain(maps.cafe.iter().flatten()) {
        let path = dir.join(o.file_name(image));
        o.render(base).save(&path)?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Localization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub passed: usize,
    pub total: usize,
    pub fraction: f64,
}

fn inside_beats_outside(map: &Array2<f32>, mask: &Array2<bool>) -> bool {
    let (mut si, mut ni, mut so, mut no) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (v, &m) in map.iter().zip(mask.iter()) {
        if m {
            si += *v as f64;
            ni += 1;
        } else {
            so += *v as f64;
            no += 1;
        }
    }
    ni > 0 && no > 0 && si / ni as f64 > so / no as f64
}

/// An image passes when, for every attribute with a local support, the AF
/// map (attribute present) or CAFE map (absent) has a higher mean inside the
/// support than outside. Attributes flagged `global` are not scored; absent
/// attributes are skipped for models without CAB.
pub fn attention_localization(
    d: &Discriminator<f32>,
    data: &InMemoryDataset,
    masks: &[Array2<bool>],
    global: &[bool],
) -> Result<LocalizationReport> {
    let k = data.names.len();
    if masks.len() != k || global.len() != k {
        return Err(Error::Config("one mask and global flag per attribute required".into()));
    }
    let maps = render_attention_batch(d, &data.images, &data.names)?;
    let (mut passed, mut total) = (0, 0);
    for (i, m) in maps.iter().enumerate() {
        let mut checks = Vec::new();
        for a in (0..k).filter(|&a| !global[a]) {
            if data.labels[[i, a]] == 1 {
                checks.push(inside_beats_outside(&m.af[a].map, &masks[a]));
            } else if let Some(cafe) = &m.cafe {
                checks.push(inside_beats_outside(&cafe[a].map, &masks[a]));
            }
        }
        if !checks.is_empty() {
            total += 1;
            passed += usize::from(checks.iter().all(|&c| c));
        }
    }
    let fraction = if total == 0 { 0.0 } else { passed as f64 / total as f64 };
    Ok(LocalizationReport { passed, total, fraction })
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCm,
    NoCab,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no_CM" | "no_cm" => Ok(Self::NoCm),
            "no_CAB" | "no_cab" => Ok(Self::NoCab),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected full, no_CM or no_CAB)"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoCm => "no_CM",
            Self::NoCab => "no_CAB",
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.no_cm = *self == Self::NoCm;
        c.no_cab = *self == Self::NoCab;
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<(Variant, AccuracyReport)>,
}

impl AblationTable {
    /// Variant ids sorted by decreasing average accuracy.
    pub fn ordering(&self) -> Vec<&'static str> {
        let mut rows: Vec<_> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.1.average.total_cmp(&a.1.average));
        rows.into_iter().map(|(v, _)| v.id()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant");
        if let Some((_, r)) = self.rows.first() {
            for a in &r.attributes {
                s.push(',');
                s.push_str(a);
            }
        }
        s.push_str(",average\n");
        for (v, r) in &self.rows {
            s.push_str(v.id());
            for acc in &r.accuracy {
                let _ = write!(s, ",{acc:.6}");
            }
            let _ = writeln!(s, ",{:.6}", r.average);
        }
        s
    }
}

/// Trains each variant on the same data and seed and scores it.
pub fn run_ablation(
    config: &TrainConfig,
    variants: &[Variant],
    train_set: &dyn ImageSource,
    test: &dyn ImageSource,
    classifier: &EvalClassifier,
    n: usize,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for v in variants {
        let (state, _) = train(v.apply(config), train_set)?;
        rows.push((*v, eval_attribute_accuracy(&state.generator, classifier, test, n, v.id())?));
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_map_normalizes_to_zero() {
        let m = Array2::from_elem((4, 4), 3.5f32);
        assert!(normalize_map(m.view()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_ignores_positive_affine_rescaling() {
        let m = array![[0.1f32, 0.7], [-0.3, 0.2]];
        let scaled = m.mapv(|v| 4.0 * v + 2.5);
        let (a, b) = (normalize_map(m.view()), normalize_map(scaled.view()));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn report_average_is_mean() {
        let r = AccuracyReport::new("m", vec!["a".into(), "b".into()], vec![0.5, 1.0], vec![3, 3]);
        assert_eq!(r.average, 0.75);
        assert!(r.to_csv().contains("m,average,0.750000,6"));
    }

    #[test]
    fn fid_rejects_small_or_mismatched_sets() {
        let a = Array2::<f64>::zeros((5, 3));
        let b = Array2::<f64>::zeros((5, 4));
        assert!(matches!(fid_from_features(a.view(), b.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn classifier_rejects_wrong_resolution() {
        let c = EvalClassifier::new(ClassifierConfig { attributes: vec!["a".into()], ..Default::default() }).unwrap();
        assert!(matches!(c.predict(&Array4::zeros((1, 3, 16, 16))), Err(Error::Shape(_))));
    }
}
