//! A loaded checkpoint ready for inference.

use std::path::Path;

use anyhow::{bail, Context};
use cafegan::checkpoint::{load_checkpoint, Checkpoint};
use cafegan::data::{preprocess_any, preprocess_image, CELEBA_HEIGHT, CELEBA_WIDTH};
use cafegan::discriminator::Discriminator;
use cafegan::evaluation::{render_attention_maps, AttentionMaps, EvalClassifier};
use cafegan::generator::Generator;
use cafegan::Error;
use image::DynamicImage;
use ndarray::{Array2, Array3, Array4, Axis};

#[derive(Debug)]
pub struct Model {
    pub id: String,
    pub names: Vec<String>,
    pub resolution: usize,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub classifier: Option<EvalClassifier>,
}

impl Model {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let id = path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
        Ok(Self::from_checkpoint(ck, id))
    }

    pub fn from_checkpoint(ck: Checkpoint, id: String) -> Self {
        let cfg = &ck.state.config;
        Self {
            id,
            names: cfg.attributes.clone(),
            resolution: cfg.resolution,
            generator: ck.state.generator,
            discriminator: ck.state.discriminator,
            classifier: ck.classifier,
        }
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    /// CelebA-sized frames get the fixed face crop; anything else is
    /// center-cropped to a square.
    pub fn prepare(&self, img: &DynamicImage) -> anyhow::Result<Array4<f32>> {
        if img.width() == CELEBA_WIDTH && img.height() == CELEBA_HEIGHT {
            Ok(preprocess_image(img, self.resolution)?)
        } else {
            Ok(preprocess_any(img, self.resolution))
        }
    }

    /// Source attributes estimated by the bundled evaluation classifier.
    pub fn estimate_source(&self, x: &Array4<f32>) -> anyhow::Result<Vec<u8>> {
        let Some(c) = &self.classifier else {
            bail!("checkpoint has no bundled classifier to estimate source attributes");
        };
        Ok(c.predict(x)?.row(0).to_vec())
    }

    /// Edits a single image `[1, 3, r, r]` from `v_s` to `v_t`.
    pub fn edit(&self, x: &Array4<f32>, v_s: &[u8], v_t: &[u8]) -> anyhow::Result<(Array3<f32>, Vec<i8>)> {
        if v_s.len() != self.k() || v_t.len() != self.k() {
            bail!("attribute vectors must have {} entries", self.k());
        }
        let v_d: Vec<i8> = v_t.iter().zip(v_s).map(|(&t, &s)| t as i8 - s as i8).collect();
        let vd = Array2::from_shape_vec((1, self.k()), v_d.iter().map(|&d| d as f32).collect())?;
        let y = self.generator.run(x, &vd)?;
        Ok((y.index_axis_move(Axis(0), 0), v_d))
    }

    pub fn attention(&self, x: &Array4<f32>) -> anyhow::Result<AttentionMaps> {
        Ok(render_attention_maps(&self.discriminator, &x.index_axis(Axis(0), 0).to_owned(), &self.names)?)
    }
}

/// Parses `Name=0|1[,Name=0|1...]`; an empty spec yields no changes.
pub fn parse_attribute_spec(spec: &str, names: &[String]) -> Result<Vec<(usize, u8)>, Error> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`{part}` is not of the form Name=0|1")))?;
        let idx = names.iter().position(|n| n == name.trim()).ok_or_else(|| Error::UnknownAttribute {
            name: name.trim().to_string(),
            valid: names.to_vec(),
        })?;
        let bit = match value.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Config(format!("value for {name} must be 0 or 1, got `{other}`"))),
        };
        out.push((idx, bit));
    }
    Ok(out)
}

pub fn apply_overrides(base: &[u8], overrides: &[(usize, u8)]) -> Vec<u8> {
    let mut v = base.to_vec();
    for &(i, b) in overrides {
        v[i] = b;
    }
    v
}
