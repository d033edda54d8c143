//! Single-file checkpoint container.
//!
//! Layout: `CAFECKPT`, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f32` in header order. The
//! header carries a SHA-256 digest of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::evaluation::{ClassifierConfig, EvalClassifier};
use crate::generator::Generator;
use crate::nn::{Adam, ParamStore};
use crate::training::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"CAFECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupEntry {
    name: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    groups: Vec<GroupEntry>,
    payload_sha256: String,
}

/// Named tensors stored together.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGroup {
    pub name: String,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl TensorGroup {
    pub fn from_store(name: &str, store: &ParamStore<f32>) -> Self {
        Self {
            name: name.into(),
            tensors: store.names().iter().cloned().zip(store.values().cloned()).collect(),
        }
    }

    fn from_moments(name: &str, store: &ParamStore<f32>, moments: &[ArrayD<f32>]) -> Self {
        Self { name: name.into(), tensors: store.names().iter().cloned().zip(moments.iter().cloned()).collect() }
    }

    pub fn to_store(&self) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for (n, v) in &self.tensors {
            s.add(n.clone(), v.clone());
        }
        s
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_container(path: &Path, meta: serde_json::Value, groups: &[TensorGroup]) -> Result<()> {
    let mut payload = Vec::new();
    for g in groups {
        for (_, t) in &g.tensors {
            for v in t.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        meta,
        groups: groups
            .iter()
            .map(|g| GroupEntry {
                name: g.name.clone(),
                tensors: g
                    .tensors
                    .iter()
                    .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
                    .collect(),
            })
            .collect(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&payload)?;
        f.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<TensorGroup>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(&format!("format version {version}, this build reads {FORMAT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if hlen > body.len() {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let payload = &body[hlen..];
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    let total: usize = header.groups.iter().flat_map(|g| &g.tensors).map(|t| t.shape.iter().product::<usize>()).sum();
    if total * 4 != payload.len() {
        return Err(corrupt("payload size does not match header"));
    }
    let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let groups = header
        .groups
        .iter()
        .map(|g| TensorGroup {
            name: g.name.clone(),
            tensors: g
                .tensors
                .iter()
                .map(|t| {
                    let n = t.shape.iter().product();
                    let data: Vec<f32> = floats.by_ref().take(n).collect();
                    (t.name.clone(), ArrayD::from_shape_vec(IxDyn(&t.shape), data).unwrap())
                })
                .collect(),
        })
        .collect();
    Ok((header.meta, groups))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl OptimizerMeta {
    fn of(a: &Adam<f32>) -> Self {
        Self { step: a.step, beta1: a.beta1, beta2: a.beta2, eps: a.eps }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassifierMeta {
    config: ClassifierConfig,
    /// `None` for a classifier that was never scored.
    heldout_accuracy: Option<f64>,
}

impl ClassifierMeta {
    fn of(c: &EvalClassifier) -> Self {
        Self { config: c.config.clone(), heldout_accuracy: Some(c.heldout_accuracy).filter(|a| a.is_finite()) }
    }

    fn accuracy(&self) -> f64 {
        self.heldout_accuracy.unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainMeta {
    config: TrainConfig,
    epoch: usize,
    batch: usize,
    step: u64,
    rng_seed: String,
    rng_word_pos: String,
    opt_g: OptimizerMeta,
    opt_d: OptimizerMeta,
    classifier: Option<ClassifierMeta>,
}

/// A training checkpoint, optionally bundling the evaluation classifier.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub classifier: Option<EvalClassifier>,
}

fn group<'a>(groups: &'a [TensorGroup], name: &str) -> Result<&'a TensorGroup> {
    groups
        .iter()
        .find(|g| g.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor group `{name}`")))
}

fn moments(groups: &[TensorGroup], name: &str, like: &ParamStore<f32>) -> Result<Vec<ArrayD<f32>>> {
    let g = group(groups, name)?;
    let ok = g.tensors.len() == like.len()
        && g.tensors.iter().zip(like.values()).all(|((_, t), p)| t.shape() == p.shape());
    if !ok {
        return Err(Error::Checkpoint(format!("optimizer group `{name}` does not match the parameters")));
    }
    Ok(g.tensors.iter().map(|(_, t)| t.clone()).collect())
}

fn restore_adam(meta: &OptimizerMeta, groups: &[TensorGroup], prefix: &str, like: &ParamStore<f32>) -> Result<Adam<f32>> {
    Ok(Adam {
        beta1: meta.beta1,
        beta2: meta.beta2,
        eps: meta.eps,
        step: meta.step,
        m: moments(groups, &format!("{prefix}.m"), like)?,
        v: moments(groups, &format!("{prefix}.v"), like)?,
    })
}

pub fn save_checkpoint(state: &TrainState, classifier: Option<&EvalClassifier>, path: &Path) -> Result<()> {
    let meta = TrainMeta {
        config: state.config.clone(),
        epoch: state.epoch,
        batch: state.batch,
        step: state.step,
        rng_seed: hex(&state.rng.get_seed()),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        opt_g: OptimizerMeta::of(&state.opt_g),
        opt_d: OptimizerMeta::of(&state.opt_d),
        classifier: classifier.map(ClassifierMeta::of),
    };
    let (g, d) = (&state.generator.params, &state.discriminator.params);
    let mut groups = vec![
        TensorGroup::from_store("generator", g),
        TensorGroup::from_store("discriminator", d),
        TensorGroup::from_moments("opt_g.m", g, &state.opt_g.m),
        TensorGroup::from_moments("opt_g.v", g, &state.opt_g.v),
        TensorGroup::from_moments("opt_d.m", d, &state.opt_d.m),
        TensorGroup::from_moments("opt_d.v", d, &state.opt_d.v),
    ];
    if let Some(c) = classifier {
        groups.push(TensorGroup::from_store("classifier", &c.params));
    }
    let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_container(path, meta, &groups)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (meta, groups) = read_container(path)?;
    let meta: TrainMeta =
        serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    meta.config.validate()?;
    let generator = Generator::from_params(meta.config.generator_config(), group(&groups, "generator")?.to_store())?;
    let discriminator =
        Discriminator::from_params(meta.config.discriminator_config(), group(&groups, "discriminator")?.to_store())?;
    let opt_g = restore_adam(&meta.opt_g, &groups, "opt_g", &generator.params)?;
    let opt_d = restore_adam(&meta.opt_d, &groups, "opt_d", &discriminator.params)?;

    let seed_bytes: Vec<u8> = (0..meta.rng_seed.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(meta.rng_seed.get(i..i + 2).unwrap_or("zz"), 16))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint("bad RNG seed".into()))?;
    let seed: [u8; 32] = seed_bytes.try_into().map_err(|_| Error::Checkpoint("bad RNG seed length".into()))?;
    let word_pos: u128 = meta.rng_word_pos.parse().map_err(|_| Error::Checkpoint("bad RNG position".into()))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_word_pos(word_pos);

    let classifier = match meta.classifier {
        Some(c) => Some(EvalClassifier::from_params(c.config.clone(), group(&groups, "classifier")?.to_store(), c.accuracy())?),
        None => None,
    };
    let state = TrainState {
        config: meta.config,
        generator,
        discriminator,
        opt_g,
        opt_d,
        epoch: meta.epoch,
        batch: meta.batch,
        step: meta.step,
        rng,
    };
    Ok(Checkpoint { state, classifier })
}

/// Loads a checkpoint and rejects it unless its attribute list is `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &[String]) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.state.config.attributes != expected {
        return Err(Error::Config(format!(
            "checkpoint attributes [{}] differ from requested [{}]",
            ck.state.config.attributes.join(", "),
            expected.join(", ")
        )));
    }
    Ok(ck)
}

/// Standalone classifier file.
pub fn save_classifier(c: &EvalClassifier, path: &Path) -> Result<()> {
    let meta = serde_json::to_value(ClassifierMeta::of(c))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_container(path, meta, &[TensorGroup::from_store("classifier", &c.params)])
}

pub fn load_classifier(path: &Path) -> Result<EvalClassifier> {
    let (meta, groups) = read_container(path)?;
    let meta: ClassifierMeta =
        serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    EvalClassifier::from_params(meta.config.clone(), group(&groups, "classifier")?.to_store(), meta.accuracy())
}
