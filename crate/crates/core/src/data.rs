//! Attribute annotations, image preprocessing, target sampling and the
//! synthetic face dataset used for desk-scale verification.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{DynamicImage, Rgb, Rgb32FImage, RgbImage};
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Source images are 178 wide and 218 tall.
pub const CELEBA_WIDTH: u32 = 178;
pub const CELEBA_HEIGHT: u32 = 218;
pub const CELEBA_CROP: u32 = 170;
/// Offsets of the centered 170x170 crop.
pub const CELEBA_CROP_X: u32 = 4;
pub const CELEBA_CROP_Y: u32 = 24;

pub const DEFAULT_ATTRIBUTES: [&str; 13] = [
    "Bald",
    "Bangs",
    "Black_Hair",
    "Blond_Hair",
    "Brown_Hair",
    "Bushy_Eyebrows",
    "Eyeglasses",
    "Male",
    "Mouth_Slightly_Open",
    "Mustache",
    "No_Beard",
    "Pale_Skin",
    "Young",
];

/// Raw annotation matrix, one binary row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    pub names: Vec<String>,
    pub filenames: Vec<String>,
    pub rows: Vec<Vec<u8>>,
}

impl AttributeTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, filename: &str) -> Option<&[u8]> {
        self.filenames.iter().position(|f| f == filename).map(|i| self.rows[i].as_slice())
    }

    /// Writes the table in the CelebA text layout (`-1`/`1` entries).
    pub fn to_annotation_string(&self) -> String {
        let mut out = format!("{}\n{}\n", self.rows.len(), self.names.join(" "));
        for (f, row) in self.filenames.iter().zip(&self.rows) {
            out.push_str(f);
            for &v in row {
                out.push_str(if v == 1 { " 1" } else { " -1" });
            }
            out.push('\n');
        }
        out
    }
}

/// Binary attribute labels for one image, tied to the attribute names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeVector {
    names: Arc<[String]>,
    values: Vec<u8>,
}

impl AttributeVector {
    pub fn new(names: Arc<[String]>, values: Vec<u8>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Domain("attribute vector needs k >= 1".into()));
        }
        if names.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} names but {} values",
                names.len(),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Domain(format!("attribute value {v} is not binary")));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Domain(format!("duplicate attribute name {n}")));
            }
        }
        Ok(Self { names, values })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    pub fn with_values(&self, values: Vec<u8>) -> Result<Self> {
        Self::new(Arc::clone(&self.names), values)
    }
}

/// Parses a CelebA-style annotation file.
pub fn parse_attribute_annotations(path: &Path) -> Result<AttributeTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotation_text(&text, path)
}

pub fn parse_annotation_text(text: &str, source: &Path) -> Result<AttributeTable> {
    let perr = |line: usize, message: String| Error::Parse { path: source.to_path_buf(), line, message };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (ln, count_line) = lines.next().ok_or_else(|| perr(1, "empty annotation file".into()))?;
    let declared: usize = count_line
        .trim()
        .parse()
        .map_err(|_| perr(ln + 1, format!("expected image count, found `{}`", count_line.trim())))?;
    let (ln, names_line) = lines.next().ok_or_else(|| perr(ln + 2, "missing attribute names".into()))?;
    let names: Vec<String> = names_line.split_whitespace().map(String::from).collect();
    if names.is_empty() {
        return Err(perr(ln + 1, "no attribute names".into()));
    }

    let mut filenames = Vec::with_capacity(declared);
    let mut rows = Vec::with_capacity(declared);
    let mut seen: HashMap<String, usize> = HashMap::with_capacity(declared);
    for (ln, line) in lines {
        let mut fields = line.split_whitespace();
        let file = fields.next().expect("non-empty line").to_string();
        let values: Vec<&str> = fields.collect();
        if values.len() != names.len() {
            return Err(perr(
                ln + 1,
                format!("expected {} attribute values, found {}", names.len(), values.len()),
            ));
        }
        let row = values
            .iter()
            .map(|v| match *v {
                "1" => Ok(1u8),
                "-1" => Ok(0u8),
                other => Err(perr(ln + 1, format!("attribute value `{other}` is not -1 or 1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if let Some(prev) = seen.insert(file.clone(), ln + 1) {
            return Err(Error::Integrity(format!(
                "{file} appears on lines {prev} and {}",
                ln + 1
            )));
        }
        filenames.push(file);
        rows.push(row);
    }
    if rows.len() != declared {
        return Err(Error::Integrity(format!(
            "header declares {declared} images but {} rows were read",
            rows.len()
        )));
    }
    Ok(AttributeTable { names, filenames, rows })
}

/// The table projected onto `k` selected attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSelection {
    pub names: Arc<[String]>,
    pub filenames: Vec<String>,
    pub labels: Array2<u8>,
}

impl AttributeSelection {
    pub fn vector(&self, i: usize) -> AttributeVector {
        AttributeVector { names: Arc::clone(&self.names), values: self.labels.row(i).to_vec() }
    }
}

pub fn select_attributes<S: AsRef<str>>(table: &AttributeTable, names: &[S]) -> Result<AttributeSelection> {
    let columns = names
        .iter()
        .map(|n| {
            table.names.iter().position(|t| t == n.as_ref()).ok_or_else(|| Error::UnknownAttribute {
                name: n.as_ref().to_string(),
                valid: table.names.clone(),
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    let labels = Array2::from_shape_fn((table.len(), columns.len()), |(r, c)| table.rows[r][columns[c]]);
    let names: Vec<String> = names.iter().map(|n| n.as_ref().to_string()).collect();
    Ok(AttributeSelection { names: names.into(), filenames: table.filenames.clone(), labels })
}

/// Bilinear resampling with half-pixel centres and edge clamping.
///
/// `src` is `[C, H, W]`; the crop window `(x0, y0, w, h)` is resampled to
/// `out x out`.
pub fn crop_resize_bilinear(
    src: &Array3<f32>,
    window: (usize, usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Array3<f32> {
    let (x0, y0, cw, ch) = window;
    let channels = src.shape()[0];
    let sy = ch as f64 / out_h as f64;
    let sx = cw as f64 / out_w as f64;
    let taps = |dst: usize, scale: f64, len: usize| {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let mut out = Array3::zeros((channels, out_h, out_w));
    for oy in 0..out_h {
        let (y_lo, y_hi, fy) = taps(oy, sy, ch);
        for ox in 0..out_w {
            let (x_lo, x_hi, fx) = taps(ox, sx, cw);
            for c in 0..channels {
                let p = |y: usize, x: usize| src[[c, y0 + y, x0 + x]];
                let top = p(y_lo, x_lo) * (1.0 - fx) + p(y_lo, x_hi) * fx;
                let bottom = p(y_hi, x_lo) * (1.0 - fx) + p(y_hi, x_hi) * fx;
                out[[c, oy, ox]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// `[C, H, W]` in `[0, 1]`.
pub fn image_to_chw(img: &DynamicImage) -> Array3<f32> {
    let rgb: Rgb32FImage = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c])
}

/// Center-crops the CelebA frame to 170x170 and resizes to `resolution`,
/// mapping intensities to `[-1, 1]`. Output is `[1, 3, r, r]`.
pub fn preprocess_image(raw: &DynamicImage, resolution: usize) -> Result<Array4<f32>> {
    if raw.width() != CELEBA_WIDTH || raw.height() != CELEBA_HEIGHT {
        return Err(Error::Shape(format!(
            "expected a {}x{} image, got {}x{}",
            CELEBA_WIDTH,
            CELEBA_HEIGHT,
            raw.width(),
            raw.height()
        )));
    }
    let chw = image_to_chw(raw);
    let window = (
        CELEBA_CROP_X as usize,
        CELEBA_CROP_Y as usize,
        CELEBA_CROP as usize,
        CELEBA_CROP as usize,
    );
    let out = crop_resize_bilinear(&chw, window, resolution, resolution);
    Ok(to_signed(out).insert_axis(Axis(0)))
}

/// Largest centered square of an arbitrary image resized to `resolution`.
pub fn preprocess_any(raw: &DynamicImage, resolution: usize) -> Array4<f32> {
    let chw = image_to_chw(raw);
    let (h, w) = (chw.shape()[1], chw.shape()[2]);
    let side = h.min(w);
    let window = ((w - side) / 2, (h - side) / 2, side, side);
    to_signed(crop_resize_bilinear(&chw, window, resolution, resolution)).insert_axis(Axis(0))
}

fn to_signed(a: Array3<f32>) -> Array3<f32> {
    a.mapv(|v| (v * 2.0 - 1.0).clamp(-1.0, 1.0))
}

/// `[3, H, W]` in `[-1, 1]` to an 8-bit RGB image.
pub fn tensor_to_image(t: &Array3<f32>) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (((t[[c, y as usize, x as usize]] + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum TargetPolicy {
    /// Permute the source vectors within the batch.
    ShuffleBatchLabels,
    /// Flip each bit independently with probability `p`.
    UniformRandomFlip { p: f64 },
}

impl TargetPolicy {
    pub fn parse(id: &str, flip_probability: f64) -> Result<Self> {
        match id {
            "shuffle-batch-labels" => Ok(Self::ShuffleBatchLabels),
            "uniform-random-flip" => {
                if !(0.0..=1.0).contains(&flip_probability) {
                    return Err(Error::Config(format!(
                        "flip probability {flip_probability} outside [0, 1]"
                    )));
                }
                Ok(Self::UniformRandomFlip { p: flip_probability })
            }
            other => Err(Error::Config(format!(
                "unknown target policy `{other}` (expected shuffle-batch-labels or uniform-random-flip)"
            ))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Self::ShuffleBatchLabels => "shuffle-batch-labels",
            Self::UniformRandomFlip { .. } => "uniform-random-flip",
        }
    }
}

/// Draws target vectors for a batch of source vectors (`[N, k]`, entries 0/1).
pub fn sample_target_vectors<R: Rng>(source: &Array2<f32>, rng: &mut R, policy: TargetPolicy) -> Array2<f32> {
    match policy {
        TargetPolicy::ShuffleBatchLabels => {
            let mut order: Vec<usize> = (0..source.nrows()).collect();
            order.shuffle(rng);
            source.select(Axis(0), &order)
        }
        TargetPolicy::UniformRandomFlip { p } => source.mapv(|v| {
            // always draw so the stream position does not depend on p
            let flip = rng.random::<f64>() < p;
            if flip { 1.0 - v } else { v }
        }),
    }
}

/// Single-vector form: shuffle-batch-labels degenerates to the identity.
pub fn sample_target_vector<R: Rng>(
    source: &AttributeVector,
    rng: &mut R,
    policy: TargetPolicy,
) -> AttributeVector {
    let row = Array2::from_shape_vec((1, source.len()), source.as_f32()).unwrap();
    let t = sample_target_vectors(&row, rng, policy);
    AttributeVector { names: Arc::clone(&source.names), values: t.iter().map(|&v| v as u8).collect() }
}

/// Deterministic visiting order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Read-only access to labeled, preprocessed images.
pub trait ImageSource: Send + Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn resolution(&self) -> usize;
    fn attribute_names(&self) -> &[String];
    /// `[3, r, r]` in `[-1, 1]`.
    fn image(&self, index: usize) -> Result<Array3<f32>>;
    fn labels(&self, index: usize) -> &[u8];

    /// Stacks `indices` into `([N, 3, r, r], [N, k])`.
    fn batch(&self, indices: &[usize]) -> Result<(Array4<f32>, Array2<f32>)> {
        let r = self.resolution();
        let k = self.attribute_names().len();
        let mut images = Array4::zeros((indices.len(), 3, r, r));
        let mut labels = Array2::zeros((indices.len(), k));
        for (b, &i) in indices.iter().enumerate() {
            images.slice_mut(s![b, .., .., ..]).assign(&self.image(i)?);
            for (j, &v) in self.labels(i).iter().enumerate() {
                labels[[b, j]] = v as f32;
            }
        }
        Ok((images, labels))
    }
}

/// Fully materialized dataset.
#[derive(Debug, Clone)]
pub struct InMemoryDataset {
    pub names: Vec<String>,
    pub images: Array4<f32>,
    pub labels: Array2<u8>,
}

impl InMemoryDataset {
    pub fn subset(&self, indices: &[usize]) -> InMemoryDataset {
        InMemoryDataset {
            names: self.names.clone(),
            images: self.images.select(Axis(0), indices),
            labels: self.labels.select(Axis(0), indices),
        }
    }

    pub fn labels_f32(&self) -> Array2<f32> {
        self.labels.mapv(|v| v as f32)
    }
}

impl ImageSource for InMemoryDataset {
    fn len(&self) -> usize {
        self.images.shape()[0]
    }

    fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    fn attribute_names(&self) -> &[String] {
        &self.names
    }

    fn image(&self, index: usize) -> Result<Array3<f32>> {
        Ok(self.images.index_axis(Axis(0), index).to_owned())
    }

    fn labels(&self, index: usize) -> &[u8] {
        let k = self.names.len();
        &self.labels.as_slice().expect("standard layout")[index * k..(index + 1) * k]
    }
}

/// Images read lazily from a directory listed by an annotation file.
#[derive(Debug)]
pub struct FolderDataset {
    root: PathBuf,
    selection: AttributeSelection,
    names: Vec<String>,
    resolution: usize,
    celeba_frames: bool,
}

impl FolderDataset {
    /// `celeba_frames` selects the fixed 178x218 crop; otherwise images are
    /// center-cropped to a square.
    pub fn open(
        root: &Path,
        annotation: &Path,
        attributes: &[String],
        resolution: usize,
        celeba_frames: bool,
    ) -> Result<Self> {
        let table = parse_attribute_annotations(annotation)?;
        let selection = select_attributes(&table, attributes)?;
        Ok(Self {
            root: root.to_path_buf(),
            names: attributes.to_vec(),
            selection,
            resolution,
            celeba_frames,
        })
    }

    pub fn filenames(&self) -> &[String] {
        &self.selection.filenames
    }

    /// Restricts to the given row indices (e.g. a train/test split).
    pub fn restrict(mut self, indices: &[usize]) -> Self {
        self.selection.filenames = indices.iter().map(|&i| self.selection.filenames[i].clone()).collect();
        self.selection.labels = self.selection.labels.select(Axis(0), indices);
        self
    }

    pub fn materialize(&self) -> Result<InMemoryDataset> {
        let idx: Vec<usize> = (0..self.len()).collect();
        let (images, _) = self.batch(&idx)?;
        Ok(InMemoryDataset { names: self.names.clone(), images, labels: self.selection.labels.clone() })
    }
}

impl ImageSource for FolderDataset {
    fn len(&self) -> usize {
        self.selection.filenames.len()
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn attribute_names(&self) -> &[String] {
        &self.names
    }

    fn image(&self, index: usize) -> Result<Array3<f32>> {
        let path = self.root.join(&self.selection.filenames[index]);
        let img = image::open(&path)?;
        let t = if self.celeba_frames {
            preprocess_image(&img, self.resolution)?
        } else {
            preprocess_any(&img, self.resolution)
        };
        Ok(t.index_axis_move(Axis(0), 0))
    }

    fn labels(&self, index: usize) -> &[u8] {
        let k = self.names.len();
        &self.selection.labels.as_slice().expect("standard layout")[index * k..(index + 1) * k]
    }
}

/// Train/test row indices. The official partition (0 train, 1 val, 2 test)
/// is used when supplied; otherwise the last `holdout` rows are held out.
pub fn split_indices(n: usize, partition: Option<&[u8]>, holdout: usize) -> (Vec<usize>, Vec<usize>) {
    match partition {
        Some(p) => {
            let train = (0..n).filter(|&i| p[i] != 2).collect();
            let test = (0..n).filter(|&i| p[i] == 2).collect();
            (train, test)
        }
        None => {
            let cut = n.saturating_sub(holdout);
            ((0..cut).collect(), (cut..n).collect())
        }
    }
}

/// Reads `list_eval_partition.txt` (`filename split` per line) aligned to
/// `filenames`.
pub fn read_partition(path: &Path, filenames: &[String]) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let (Some(f), Some(p)) = (it.next(), it.next()) else { continue };
        let p: u8 = p.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: ln + 1,
            message: format!("bad partition id `{p}`"),
        })?;
        map.insert(f.to_string(), p);
    }
    filenames
        .iter()
        .map(|f| map.get(f).copied().ok_or_else(|| Error::Integrity(format!("{f} missing from partition file"))))
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic faces
// ---------------------------------------------------------------------------

/// Attributes the synthetic renderer knows how to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticAttribute {
    HatBand,
    ChinPatch,
    BrightSkin,
    Eyeglasses,
    MouthOpen,
}

impl SyntheticAttribute {
    pub const ALL: [SyntheticAttribute; 5] = [
        Self::HatBand,
        Self::ChinPatch,
        Self::BrightSkin,
        Self::Eyeglasses,
        Self::MouthOpen,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::HatBand => "Hat_Band",
            Self::ChinPatch => "Chin_Patch",
            Self::BrightSkin => "Bright_Skin",
            Self::Eyeglasses => "Eyeglasses",
            Self::MouthOpen => "Mouth_Open",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Support region in normalized coordinates `(u0, v0, u1, v1)`.
    fn region(&self) -> (f32, f32, f32, f32) {
        match self {
            Self::HatBand => (0.12, 0.06, 0.88, 0.26),
            Self::ChinPatch => (0.34, 0.80, 0.66, 0.96),
            Self::BrightSkin => (0.0, 0.0, 1.0, 1.0),
            Self::Eyeglasses => (0.22, 0.42, 0.78, 0.58),
            Self::MouthOpen => (0.38, 0.68, 0.62, 0.80),
        }
    }

    /// Whether the support covers the whole frame.
    pub fn is_global(&self) -> bool {
        matches!(self, Self::BrightSkin)
    }
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub resolution: usize,
    pub attributes: Vec<SyntheticAttribute>,
    pub n: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The three-attribute desk configuration.
    pub fn desk(n: usize, seed: u64) -> Self {
        Self {
            resolution: 32,
            attributes: vec![
                SyntheticAttribute::HatBand,
                SyntheticAttribute::ChinPatch,
                SyntheticAttribute::BrightSkin,
            ],
            n,
            seed,
        }
    }

    pub fn k(&self) -> usize {
        self.attributes.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name().to_string()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one attribute".into()));
        }
        if self.resolution < 8 {
            return Err(Error::Config(format!("resolution {} too small", self.resolution)));
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if self.attributes[..i].contains(a) {
                return Err(Error::Config(format!("attribute {} listed twice", a.name())));
            }
            if !support_mask(*a, self.resolution).iter().any(|&m| m) {
                return Err(Error::Config(format!(
                    "attribute {} has an empty support at resolution {}",
                    a.name(),
                    self.resolution
                )));
            }
        }
        Ok(())
    }
}

/// Pixels (row, col) whose centre lies in the attribute's support region.
pub fn support_mask(attr: SyntheticAttribute, resolution: usize) -> Array2<bool> {
    let (u0, v0, u1, v1) = attr.region();
    let r = resolution as f32;
    Array2::from_shape_fn((resolution, resolution), |(y, x)| {
        let u = (x as f32 + 0.5) / r;
        let v = (y as f32 + 0.5) / r;
        u >= u0 && u < u1 && v >= v0 && v < v1
    })
}

const BACKGROUND: [f32; 3] = [-0.55, -0.45, -0.25];
const SKIN: [f32; 3] = [0.55, 0.15, -0.1];
const HAIR: [f32; 3] = [-0.35, -0.6, -0.75];
const FEATURE: [f32; 3] = [-0.8, -0.8, -0.7];
const LIPS: [f32; 3] = [0.3, -0.45, -0.4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Background,
    Hair,
    Skin,
    Feature,
    Lips,
}

fn template_region(u: f32, v: f32) -> Region {
    let face = ((u - 0.5) / 0.31).powi(2) + ((v - 0.56) / 0.38).powi(2) <= 1.0;
    let head = ((u - 0.5) / 0.36).powi(2) + ((v - 0.45) / 0.40).powi(2) <= 1.0;
    let eye = |cx: f32| ((u - cx) / 0.05).powi(2) + ((v - 0.5) / 0.03).powi(2) <= 1.0;
    if face && (eye(0.38) || eye(0.62)) {
        Region::Feature
    } else if face && (u - 0.5).abs() < 0.09 && (v - 0.74).abs() < 0.018 {
        Region::Lips
    } else if head && v < 0.32 {
        Region::Hair
    } else if face {
        Region::Skin
    } else if head && v < 0.5 {
        Region::Hair
    } else {
        Region::Background
    }
}

/// Attribute-free face, `[3, r, r]`.
pub fn base_template(resolution: usize) -> Array3<f32> {
    let r = resolution as f32;
    Array3::from_shape_fn((3, resolution, resolution), |(c, y, x)| {
        let u = (x as f32 + 0.5) / r;
        let v = (y as f32 + 0.5) / r;
        match template_region(u, v) {
            Region::Background => BACKGROUND[c],
            Region::Hair => HAIR[c],
            Region::Skin => SKIN[c],
            Region::Feature => FEATURE[c],
            Region::Lips => LIPS[c],
        }
    })
}

/// Per-image appearance parameters of present attributes.
#[derive(Debug, Clone, Copy)]
struct Jitter {
    band_tone: f32,
    patch_tone: f32,
    brightness: f32,
    frame_tone: f32,
    mouth_depth: f32,
}

impl Jitter {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        Self {
            band_tone: rng.random_range(-0.15..0.15),
            patch_tone: rng.random_range(-0.1..0.1),
            brightness: rng.random_range(0.3..0.42),
            frame_tone: rng.random_range(-0.1..0.1),
            mouth_depth: rng.random_range(-0.1..0.1),
        }
    }
}

fn render(resolution: usize, attrs: &[SyntheticAttribute], labels: &[u8], jitter: &Jitter) -> Array3<f32> {
    let mut img = base_template(resolution);
    let r = resolution as f32;
    let on = |a: SyntheticAttribute| attrs.iter().position(|&x| x == a).is_some_and(|i| labels[i] == 1);
    let pixels = |f: &mut dyn FnMut(usize, usize, f32, f32)| {
        for y in 0..resolution {
            for x in 0..resolution {
                f(y, x, (x as f32 + 0.5) / r, (y as f32 + 0.5) / r);
            }
        }
    };
    // global first so the local renderers paint over it
    if on(SyntheticAttribute::BrightSkin) {
        let b = jitter.brightness;
        pixels(&mut |y, x, u, v| {
            if template_region(u, v) == Region::Skin {
                for c in 0..3 {
                    img[[c, y, x]] = (img[[c, y, x]] + b).min(1.0);
                }
            }
        });
    }
    let fill = |img: &mut Array3<f32>, mask: &Array2<bool>, color: &dyn Fn(f32, f32) -> Option<[f32; 3]>| {
        for y in 0..resolution {
            for x in 0..resolution {
                if mask[[y, x]] {
                    if let Some(col) = color((x as f32 + 0.5) / r, (y as f32 + 0.5) / r) {
                        for c in 0..3 {
                            img[[c, y, x]] = col[c].clamp(-1.0, 1.0);
                        }
                    }
                }
            }
        }
    };
    if on(SyntheticAttribute::HatBand) {
        let t = jitter.band_tone;
        let mask = support_mask(SyntheticAttribute::HatBand, resolution);
        fill(&mut img, &mask, &|_, _| Some([0.85 + t * 0.5, -0.7 + t, -0.55 - t]));
    }
    if on(SyntheticAttribute::ChinPatch) {
        let t = jitter.patch_tone;
        let mask = support_mask(SyntheticAttribute::ChinPatch, resolution);
        fill(&mut img, &mask, &|_, _| Some([-0.15 + t, 0.45 + t, -0.65]));
    }
    if on(SyntheticAttribute::Eyeglasses) {
        let t = jitter.frame_tone;
        let mask = support_mask(SyntheticAttribute::Eyeglasses, resolution);
        fill(&mut img, &mask, &|u, v| {
            let lens = |cx: f32| ((u - cx) / 0.11).powi(2) + ((v - 0.5) / 0.07).powi(2);
            let ring = |cx: f32| (0.55..=1.0).contains(&lens(cx));
            let bridge = (u - 0.5).abs() < 0.04 && (v - 0.5).abs() < 0.02;
            (ring(0.38) || ring(0.62) || bridge).then_some([-0.9 + t, -0.9 + t, 0.6 + t])
        });
    }
    if on(SyntheticAttribute::MouthOpen) {
        let t = jitter.mouth_depth;
        let mask = support_mask(SyntheticAttribute::MouthOpen, resolution);
        fill(&mut img, &mask, &|u, v| {
            let inside = ((u - 0.5) / 0.1).powi(2) + ((v - 0.74) / 0.05).powi(2) <= 1.0;
            inside.then_some([-0.95 + t, -0.95, -0.9])
        });
    }
    img
}

/// Synthetic dataset with per-attribute support masks.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub data: InMemoryDataset,
    /// One `[r, r]` mask per attribute.
    pub masks: Vec<Array2<bool>>,
}

pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let (r, k) = (spec.resolution, spec.k());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Array4::zeros((spec.n, 3, r, r));
    let mut labels = Array2::zeros((spec.n, k));
    for i in 0..spec.n {
        let row: Vec<u8> = (0..k).map(|_| rng.random_bool(0.5) as u8).collect();
        let jitter = Jitter::draw(&mut rng);
        images.slice_mut(s![i, .., .., ..]).assign(&render(r, &spec.attributes, &row, &jitter));
        for (j, v) in row.into_iter().enumerate() {
            labels[[i, j]] = v;
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        data: InMemoryDataset { names: spec.names(), images, labels },
        masks: spec.attributes.iter().map(|&a| support_mask(a, r)).collect(),
    })
}

/// Renders one image with explicit labels and a seeded appearance draw.
pub fn render_synthetic(spec: &SyntheticSpec, labels: &[u8], appearance_seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(appearance_seed);
    render(spec.resolution, &spec.attributes, labels, &Jitter::draw(&mut rng))
}

/// Writes `NNNNNN.png` files plus `list_attr.txt` in the CelebA layout.
pub fn write_image_folder(dataset: &InMemoryDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut table = AttributeTable { names: dataset.names.clone(), filenames: Vec::new(), rows: Vec::new() };
    for i in 0..dataset.len() {
        let name = format!("{i:06}.png");
        let img = tensor_to_image(&dataset.images.index_axis(Axis(0), i).to_owned());
        img.save(dir.join(&name))?;
        table.filenames.push(name);
        table.rows.push(dataset.labels.row(i).to_vec());
    }
    let ann = dir.join("list_attr.txt");
    fs::write(&ann, table.to_annotation_string()).map_err(|e| Error::io(&ann, e))?;
    Ok(ann)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_text(rows: &[(&str, [i8; 3])]) -> String {
        let mut s = format!("{}\nA B C\n", rows.len());
        for (f, r) in rows {
            s.push_str(&format!("{f} {} {} {}\n", r[0], r[1], r[2]));
        }
        s
    }

    #[test]
    fn all_negative_row_maps_to_zeros() {
        let names: Vec<String> = (0..40).map(|i| format!("A{i}")).collect();
        let text = format!("1\n{}\na.jpg {}\n", names.join(" "), vec!["-1"; 40].join(" "));
        let t = parse_annotation_text(&text, Path::new("x")).unwrap();
        assert_eq!(t.rows, vec![vec![0u8; 40]]);
        assert_eq!(t.names.len(), 40);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let bad_value = "1\nA B\nx.jpg 1 0\n";
        match parse_annotation_text(bad_value, Path::new("f")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let short = "2\nA B\nx.jpg 1 1\ny.jpg 1\n";
        match parse_annotation_text(short, Path::new("f")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let count = "3\nA B\nx.jpg 1 1\n";
        assert!(matches!(parse_annotation_text(count, Path::new("f")), Err(Error::Integrity(_))));
        let dup = "2\nA B\nx.jpg 1 1\nx.jpg 1 1\n";
        assert!(matches!(parse_annotation_text(dup, Path::new("f")), Err(Error::Integrity(_))));
    }

    #[test]
    fn selection_orders_and_rejects() {
        let text = table_text(&[("a", [1, -1, 1]), ("b", [-1, -1, 1])]);
        let t = parse_annotation_text(&text, Path::new("f")).unwrap();
        let rev = select_attributes(&t, &["C", "B", "A"]).unwrap();
        assert_eq!(rev.labels, ndarray::array![[1, 0, 1], [1, 0, 0]]);
        let err = select_attributes(&t, &["Z"]).unwrap_err();
        assert!(err.to_string().contains("A, B, C"), "{err}");
    }

    #[test]
    fn attribute_vector_validation() {
        let names: Arc<[String]> = vec!["a".to_string(), "b".to_string()].into();
        assert!(AttributeVector::new(names.clone(), vec![1, 2]).is_err());
        assert!(AttributeVector::new(names.clone(), vec![1]).is_err());
        assert!(AttributeVector::new(vec!["a".to_string(), "a".to_string()].into(), vec![0, 1]).is_err());
        assert!(AttributeVector::new(vec![].into(), vec![]).is_err());
        assert!(AttributeVector::new(names, vec![1, 0]).is_ok());
    }

    #[test]
    fn preprocess_rejects_wrong_size() {
        let img = DynamicImage::new_rgb8(100, 100);
        assert!(matches!(preprocess_image(&img, 128), Err(Error::Shape(_))));
    }

    #[test]
    fn target_policies() {
        let names: Arc<[String]> = vec!["a".into(), "b".into(), "c".into()].into();
        let v = AttributeVector::new(names, vec![1, 0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let same = sample_target_vector(&v, &mut rng, TargetPolicy::UniformRandomFlip { p: 0.0 });
        assert_eq!(same, v);
        let all = sample_target_vector(&v, &mut rng, TargetPolicy::UniformRandomFlip { p: 1.0 });
        assert_eq!(all.values(), &[0, 1, 0]);

        let batch = Array2::from_elem((6, 3), 1.0f32);
        let t = sample_target_vectors(&batch, &mut rng, TargetPolicy::ShuffleBatchLabels);
        assert_eq!(t, batch);

        assert!(TargetPolicy::parse("nope", 0.5).is_err());
        assert_eq!(TargetPolicy::parse("shuffle-batch-labels", 0.5).unwrap(), TargetPolicy::ShuffleBatchLabels);
    }

    #[test]
    fn seeded_targets_repeat() {
        let mut src_rng = ChaCha8Rng::seed_from_u64(5);
        let batch = Array2::from_shape_fn((8, 4), |_| src_rng.random_bool(0.5) as u8 as f32);
        for policy in [TargetPolicy::ShuffleBatchLabels, TargetPolicy::UniformRandomFlip { p: 0.3 }] {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                (0..5).map(|_| sample_target_vectors(&batch, &mut rng, policy)).collect::<Vec<_>>()
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn split_without_partition_holds_out_tail() {
        let (train, test) = split_indices(10, None, 3);
        assert_eq!(train, (0..7).collect::<Vec<_>>());
        assert_eq!(test, vec![7, 8, 9]);
        let part = [0, 2, 1, 2];
        let (train, test) = split_indices(4, Some(&part), 0);
        assert_eq!(train, vec![0, 2]);
        assert_eq!(test, vec![1, 3]);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 3, 2);
        assert_eq!(a, epoch_order(50, 3, 2));
        assert_ne!(a, epoch_order(50, 3, 3));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
