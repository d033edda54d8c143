//! Alternating discriminator/generator optimization.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, no_grad, Var};
use crate::data::{
    epoch_order, make_synthetic_dataset, read_partition, sample_target_vectors, split_indices, FolderDataset, ImageSource,
    InMemoryDataset, SyntheticAttribute, SyntheticSpec, TargetPolicy, DEFAULT_ATTRIBUTES,
};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, SkipMode};
use crate::losses::{
    binary_cross_entropy_with_logits, complement_targets, gradient_penalty, loss_adv_d, loss_adv_g,
    loss_complementary_matching, loss_reconstruction, total_loss_d, total_loss_g, DiscriminatorLossParts,
    GeneratorLossParts, LossWeights,
};
use crate::nn::Adam;

/// Flat training configuration; unknown keys are rejected when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decayed: f64,
    /// Last epoch (1-based) trained at `lr`.
    pub lr_decay_after: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub d_steps_per_g: usize,

    pub lambda_att: f64,
    pub lambda_d_cls: f64,
    pub lambda_cm: f64,
    pub lambda_g_cls: f64,
    pub lambda_rec: f64,
    pub lambda_gp: f64,

    pub no_cm: bool,
    pub no_cab: bool,
    pub seed: u64,

    /// `synthetic` or a directory of images with an annotation file.
    pub dataset: String,
    pub annotation: String,
    /// Split file inside the dataset directory; empty means hold out the
    /// last `holdout` rows.
    pub partition: String,
    pub celeba_frames: bool,
    pub synthetic_n: usize,
    pub holdout: usize,
    pub resolution: usize,
    pub attributes: Vec<String>,
    pub target_policy: String,
    pub flip_probability: f64,

    pub g_levels: usize,
    pub g_base_width: usize,
    pub g_max_width: usize,
    pub skip: SkipMode,
    pub d_base_width: usize,
    pub d_max_width: usize,
    pub d_extractor_blocks: usize,
    pub d_adv_blocks: usize,
    pub d_classifier_width: usize,

    pub output_dir: String,
    /// Epochs between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 2e-4,
            lr_decayed: 1e-4,
            lr_decay_after: 100,
            beta1: 0.5,
            beta2: 0.999,
            d_steps_per_g: 5,
            lambda_att: w.att,
            lambda_d_cls: w.d_cls,
            lambda_cm: w.cm,
            lambda_g_cls: w.g_cls,
            lambda_rec: w.rec,
            lambda_gp: w.gp,
            no_cm: false,
            no_cab: false,
            seed: 0,
            dataset: "celeba".into(),
            annotation: "list_attr_celeba.txt".into(),
            partition: "list_eval_partition.txt".into(),
            celeba_frames: true,
            synthetic_n: 256,
            holdout: 2000,
            resolution: 128,
            attributes: DEFAULT_ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
            target_policy: "shuffle-batch-labels".into(),
            flip_probability: 0.5,
            g_levels: 5,
            g_base_width: 64,
            g_max_width: 1024,
            skip: SkipMode::Gated,
            d_base_width: 64,
            d_max_width: 1024,
            d_extractor_blocks: 3,
            d_adv_blocks: 2,
            d_classifier_width: 128,
            output_dir: "runs/cafegan".into(),
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    /// Small synthetic setup that trains on one CPU in minutes.
    pub fn desk() -> Self {
        Self {
            epochs: 150,
            batch_size: 16,
            d_steps_per_g: 1,
            dataset: "synthetic".into(),
            partition: String::new(),
            celeba_frames: false,
            synthetic_n: 256,
            holdout: 128,
            resolution: 32,
            attributes: [SyntheticAttribute::HatBand, SyntheticAttribute::ChinPatch, SyntheticAttribute::BrightSkin]
                .iter()
                .map(|a| a.name().to_string())
                .collect(),
            g_levels: 3,
            g_base_width: 16,
            g_max_width: 64,
            d_base_width: 16,
            d_max_width: 64,
            d_extractor_blocks: 2,
            d_adv_blocks: 1,
            d_classifier_width: 16,
            output_dir: "runs/desk".into(),
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            att: self.lambda_att,
            d_cls: self.lambda_d_cls,
            cm: if self.no_cm || self.no_cab { 0.0 } else { self.lambda_cm },
            g_cls: self.lambda_g_cls,
            rec: self.lambda_rec,
            gp: self.lambda_gp,
        }
    }

    pub fn policy(&self) -> Result<TargetPolicy> {
        TargetPolicy::parse(&self.target_policy, self.flip_probability)
    }

    /// Learning rate for a 1-based epoch number.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_decay_after {
            self.lr
        } else {
            self.lr_decayed
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            resolution: self.resolution,
            attributes: self.attributes.len(),
            levels: self.g_levels,
            base_width: self.g_base_width,
            max_width: self.g_max_width,
            skip: self.skip,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            resolution: self.resolution,
            attributes: self.attributes.len(),
            base_width: self.d_base_width,
            max_width: self.d_max_width,
            extractor_blocks: self.d_extractor_blocks,
            adv_blocks: self.d_adv_blocks,
            classifier_width: self.d_classifier_width,
            complementary: !self.no_cab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("d_steps_per_g", self.d_steps_per_g),
            ("resolution", self.resolution),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr_decayed > 0.0 && self.lr_decayed <= self.lr) {
            return Err(Error::Config(format!(
                "learning rates must be positive and non-increasing, got {} then {}",
                self.lr, self.lr_decayed
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.attributes.is_empty() {
            return Err(Error::Config("attribute list is empty".into()));
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if self.attributes[..i].contains(a) {
                return Err(Error::Config(format!("attribute {a} listed twice")));
            }
        }
        self.weights().validate()?;
        self.policy()?;
        self.generator_config().validate()?;
        self.discriminator_config().validate()
    }
}

/// One logged value.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

/// Append-only `step,epoch,term,value` log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub const HEADER: &'static str = "step,epoch,term,value";

    pub fn push(&mut self, step: u64, epoch: usize, metrics: &[(&'static str, f64)]) {
        for &(term, value) in metrics {
            self.rows.push(MetricRow { step, epoch, term: term.to_string(), value });
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:?}", r.step, r.epoch, r.term, r.value);
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let src = Path::new("<metric log>");
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = |message: String| Error::Parse { path: src.to_path_buf(), line: i + 1, message };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", f.len())));
            }
            rows.push(MetricRow {
                step: f[0].parse().map_err(|_| bad(format!("bad step `{}`", f[0])))?,
                epoch: f[1].parse().map_err(|_| bad(format!("bad epoch `{}`", f[1])))?,
                term: f[2].to_string(),
                value: f[3].parse().map_err(|_| bad(format!("bad value `{}`", f[3])))?,
            });
        }
        Ok(Self { rows })
    }

    /// Values of one term in log order.
    pub fn series(&self, term: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.term == term).map(|r| r.value).collect()
    }
}

pub type Metrics = Vec<(&'static str, f64)>;

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Next batch within the current epoch.
    pub batch: usize,
    /// Batches processed so far.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

fn to_var(a: &Array4<f32>) -> Var<f32> {
    Var::constant(a.clone().into_dyn())
}

fn ensure_finite(what: &str, metrics: &Metrics) -> Result<()> {
    if metrics.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let dump: Vec<String> = metrics.iter().map(|(k, v)| format!("{k}={v}")).collect();
    Err(Error::Numeric(format!("{what} loss is not finite: {}", dump.join(", "))))
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator_config(), config.seed)?;
        let discriminator = Discriminator::new(config.discriminator_config(), config.seed ^ 0xD15C)?;
        let opt_g = Adam::new(&generator.params, config.beta1, config.beta2);
        let opt_d = Adam::new(&discriminator.params, config.beta1, config.beta2);
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED));
        Ok(Self { config, generator, discriminator, opt_g, opt_d, epoch: 0, batch: 0, step: 0, rng })
    }

    fn sample_difference(&mut self, v_s: &Array2<f32>) -> Result<(Array2<f32>, Array2<f32>)> {
        let v_t = sample_target_vectors(v_s, &mut self.rng, self.config.policy()?);
        let v_d = &v_t - v_s;
        Ok((v_t, v_d))
    }

    fn check_batch(&self, x: &Array4<f32>, v_s: &Array2<f32>) -> Result<()> {
        let (r, k) = (self.config.resolution, self.config.attributes.len());
        let n = x.shape()[0];
        if n == 0 || x.shape()[1..] != [3, r, r] || v_s.dim() != (n, k) {
            return Err(Error::Shape(format!(
                "batch {:?} with labels {:?} does not match resolution {r} and {k} attributes",
                x.shape(),
                v_s.dim()
            )));
        }
        Ok(())
    }

    /// One discriminator update on a real batch with labels `v_s`.
    pub fn train_step_d(&mut self, x: &Array4<f32>, v_s: &Array2<f32>) -> Result<Metrics> {
        self.check_batch(x, v_s)?;
        let (_, v_d) = self.sample_difference(v_s)?;
        let y = self.generator.run(x, &v_d)?;
        let w = self.config.weights();
        let lr = self.config.lr_at(self.epoch + 1);
        let d = &self.discriminator;
        let p = d.params.bind(true);
        let (xv, yv) = (to_var(x), to_var(&y));

        let real = d.forward(&p, &xv)?;
        let fake = d.critic(&p, &yv)?;
        let gp = gradient_penalty(|z| d.critic(&p, z), &xv, &yv, &mut self.rng)?;
        let adv = loss_adv_d(&real.adv, &fake, &gp, w.gp)?;

        let vs = v_s.clone().into_dyn();
        let ab = binary_cross_entropy_with_logits(&real.ab.logits, &vs)?;
        let mut cls = binary_cross_entropy_with_logits(&real.cls1, &vs)?;
        let mut att = ab.clone();
        let mut cab_value = 0.0;
        if let (Some(cab), Some(cls2)) = (&real.cab, &real.cls2) {
            let l = binary_cross_entropy_with_logits(&cab.logits, &complement_targets(&vs))?;
            cab_value = l.item() as f64;
            att = att.add(&l);
            cls = cls.add(&binary_cross_entropy_with_logits(cls2, &vs)?);
        }
        let parts = DiscriminatorLossParts { adv, att, cls };
        let total = total_loss_d(&parts, &w);

        let metrics: Metrics = vec![
            ("d_adv", parts.adv.item() as f64),
            ("d_gp", gp.item() as f64),
            ("d_att_ab", ab.item() as f64),
            ("d_att_cab", cab_value),
            ("d_cls", parts.cls.item() as f64),
            ("d_total", total.item() as f64),
        ];
        ensure_finite("discriminator", &metrics)?;
        let grads = grad(&total, &p.vars(), false);
        drop(p);
        self.opt_d.update(&mut self.discriminator.params, &grads, lr);
        Ok(metrics)
    }

    /// One generator update; the reconstruction branch reuses the encoding.
    pub fn train_step_g(&mut self, x: &Array4<f32>, v_s: &Array2<f32>) -> Result<Metrics> {
        self.check_batch(x, v_s)?;
        let (v_t, v_d) = self.sample_difference(v_s)?;
        let w = self.config.weights();
        let lr = self.config.lr_at(self.epoch + 1);
        let g = &self.generator;
        let d = &self.discriminator;
        let p = g.params.bind(true);
        let pd = d.params.bind(false);
        let xv = to_var(x);

        let z = g.encode(&p, &xv)?;
        let y = g.decode(&p, &z, &Var::constant(v_d.clone().into_dyn()))?;
        let x_rec = g.decode(&p, &z, &Var::zeros(&[x.shape()[0], v_s.ncols()]))?;

        let out_y = d.forward(&pd, &y)?;
        let adv = loss_adv_g(&out_y.adv)?.neg();
        let vt = v_t.into_dyn();
        let mut cls = binary_cross_entropy_with_logits(&out_y.cls1, &vt)?;
        if let Some(cls2) = &out_y.cls2 {
            cls = cls.add(&binary_cross_entropy_with_logits(cls2, &vt)?);
        }
        let cm = match (&out_y.cab, self.config.no_cm) {
            (Some(cab_y), false) => {
                let (a_x, ac_x) = no_grad(|| -> Result<_> {
                    let fx = d.extract_features(&pd, &xv)?;
                    let ab = d.attention(&pd, &fx).features;
                    let cab = d.complementary_attention(&pd, &fx).expect("CAB enabled").features;
                    Ok((ab, cab))
                })?;
                loss_complementary_matching(&a_x, &ac_x, &out_y.ab.features, &cab_y.features, &v_d)?
            }
            _ => Var::scalar_const(0.0),
        };
        let rec = loss_reconstruction(&xv, &x_rec)?;
        let parts = GeneratorLossParts { adv, cm, cls, rec };
        let total = total_loss_g(&parts, &w);

        let metrics: Metrics = vec![
            ("g_adv", parts.adv.item() as f64),
            ("g_cm", parts.cm.item() as f64),
            ("g_cls", parts.cls.item() as f64),
            ("g_rec", parts.rec.item() as f64),
            ("g_total", total.item() as f64),
        ];
        ensure_finite("generator", &metrics)?;
        let grads = grad(&total, &p.vars(), false);
        drop((p, pd));
        self.opt_g.update(&mut self.generator.params, &grads, lr);
        Ok(metrics)
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Runs one batch: a discriminator step, plus a generator step on every
    /// `d_steps_per_g`-th batch. Advances the epoch counter at epoch end.
    pub fn train_batch(&mut self, data: &dyn ImageSource, log: &mut MetricLog) -> Result<()> {
        let n = data.len();
        let order = epoch_order(n, self.config.seed, self.epoch);
        let bs = self.config.batch_size;
        let idx = &order[self.batch * bs..((self.batch + 1) * bs).min(n)];
        let (x, v_s) = data.batch(idx)?;
        let epoch = self.epoch + 1;

        let dm = self.train_step_d(&x, &v_s)?;
        log.push(self.step, epoch, &dm);
        if (self.step + 1) % self.config.d_steps_per_g as u64 == 0 {
            let gm = self.train_step_g(&x, &v_s)?;
            log.push(self.step, epoch, &gm);
        }
        self.step += 1;
        self.batch += 1;
        if self.batch == self.batches_per_epoch(n) {
            self.batch = 0;
            self.epoch += 1;
        }
        Ok(())
    }

    fn check_data(&self, data: &dyn ImageSource) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        if data.attribute_names() != self.config.attributes.as_slice() {
            return Err(Error::Config(format!(
                "dataset attributes [{}] differ from config [{}]",
                data.attribute_names().join(", "),
                self.config.attributes.join(", ")
            )));
        }
        if data.resolution() != self.config.resolution {
            return Err(Error::Config(format!(
                "dataset resolution {} differs from config {}",
                data.resolution(),
                self.config.resolution
            )));
        }
        Ok(())
    }

    /// Trains until `max_batches` more batches ran or the configured epochs
    /// are done. `on_epoch` runs after every completed epoch.
    pub fn run(
        &mut self,
        data: &dyn ImageSource,
        log: &mut MetricLog,
        max_batches: Option<u64>,
        on_epoch: &mut dyn FnMut(&TrainState, &MetricLog) -> Result<()>,
    ) -> Result<()> {
        self.check_data(data)?;
        let mut done = 0u64;
        while !self.finished() && max_batches.is_none_or(|m| done < m) {
            let epoch = self.epoch;
            self.train_batch(data, log)?;
            done += 1;
            if self.epoch != epoch {
                on_epoch(self, log)?;
            }
        }
        Ok(())
    }
}

/// Trains from scratch for the configured number of epochs.
pub fn train(config: TrainConfig, data: &dyn ImageSource) -> Result<(TrainState, MetricLog)> {
    let mut state = TrainState::new(config)?;
    let mut log = MetricLog::default();
    state.run(data, &mut log, None, &mut |_, _| Ok(()))?;
    Ok((state, log))
}

/// Train, test and classifier-training sets described by a config.
pub struct Datasets {
    pub train: Box<dyn ImageSource>,
    pub test: InMemoryDataset,
    pub classifier_train: Box<dyn ImageSource>,
    /// Support masks and global flags of the test set (synthetic data only).
    pub masks: Option<(Vec<ndarray::Array2<bool>>, Vec<bool>)>,
}

/// Synthetic spec for a config whose attributes all have synthetic renderers.
pub fn synthetic_spec(config: &TrainConfig, n: usize, seed: u64) -> Result<SyntheticSpec> {
    let attributes = config
        .attributes
        .iter()
        .map(|a| {
            SyntheticAttribute::from_name(a).ok_or_else(|| Error::UnknownAttribute {
                name: a.clone(),
                valid: SyntheticAttribute::ALL.iter().map(|s| s.name().to_string()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = SyntheticSpec { resolution: config.resolution, attributes, n, seed };
    spec.validate()?;
    Ok(spec)
}

/// Opens the configured data. Synthetic sets are drawn from disjoint seeds:
/// `seed` for training, `seed + 1` for testing, `seed + 2` for the
/// evaluation classifier. Folder datasets use the partition file when one is
/// configured and cap the materialized test set at `holdout` images.
pub fn open_datasets(config: &TrainConfig) -> Result<Datasets> {
    if config.dataset == "synthetic" {
        let train = make_synthetic_dataset(&synthetic_spec(config, config.synthetic_n, config.seed)?)?;
        let test = make_synthetic_dataset(&synthetic_spec(config, config.holdout, config.seed + 1)?)?;
        let ctrain = make_synthetic_dataset(&synthetic_spec(config, 2 * config.synthetic_n, config.seed + 2)?)?;
        let global = test.spec.attributes.iter().map(|a| a.is_global()).collect();
        return Ok(Datasets {
            train: Box::new(train.data),
            test: test.data,
            classifier_train: Box::new(ctrain.data),
            masks: Some((test.masks, global)),
        });
    }
    let root = Path::new(&config.dataset);
    let open = || {
        FolderDataset::open(root, &root.join(&config.annotation), &config.attributes, config.resolution, config.celeba_frames)
    };
    let full = open()?;
    let partition = if config.partition.is_empty() {
        None
    } else {
        Some(read_partition(&root.join(&config.partition), full.filenames())?)
    };
    let (train_idx, test_idx) = split_indices(full.len(), partition.as_deref(), config.holdout);
    let test_idx = &test_idx[..test_idx.len().min(config.holdout)];
    let test = open()?.restrict(test_idx).materialize()?;
    Ok(Datasets {
        train: Box::new(full.restrict(&train_idx)),
        test,
        classifier_train: Box::new(open()?.restrict(&train_idx)),
        masks: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundary() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(1), 2e-4);
        assert_eq!(c.lr_at(100), 2e-4);
        assert_eq!(c.lr_at(101), 1e-4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(TrainConfig::from_toml_str("epochs = 3\nbogus = 1\n"), Err(Error::Config(_))));
        let c = TrainConfig::from_toml_str("epochs = 3\n").unwrap();
        assert_eq!(c.epochs, 3);
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig::desk();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn increasing_schedule_rejected() {
        let c = TrainConfig { lr_decayed: 1e-3, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn metric_csv_round_trip() {
        let mut log = MetricLog::default();
        log.push(3, 1, &[("d_adv", -0.1), ("d_gp", 1.0 / 3.0)]);
        assert_eq!(MetricLog::parse_csv(&log.to_csv()).unwrap(), log);
    }
}
