//! Ipsilateral view pairs: manifest ingestion, stratified splitting,
//! batching, and a synthetic cross-view dataset.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const MANIFEST_HEADER: [&str; 6] =
    ["patient_id", "side", "view", "image_path", "label", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    L,
    R,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    CC,
    MLO,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

macro_rules! parse_enum {
    ($ty:ty, $field:literal, { $($s:literal => $v:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($s => Ok($v),)+
                    _ => Err(Error::Manifest(format!("invalid {} `{}`", $field, s))),
                }
            }
        }
    };
}

parse_enum!(Side, "side", { "l" => Side::L, "left" => Side::L, "r" => Side::R, "right" => Side::R });
parse_enum!(View, "view", { "cc" => View::CC, "mlo" => View::MLO });
parse_enum!(Split, "split", { "train" => Split::Train, "training" => Split::Train, "test" => Split::Test });

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::L => "L",
            Side::R => "R",
        })
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::CC => "CC",
            View::MLO => "MLO",
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Which view feeds the examined input. The other one is auxiliary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewRoles {
    #[default]
    #[serde(rename = "cc_examined")]
    CcExamined,
    #[serde(rename = "mlo_examined")]
    MloExamined,
}

/// One breast: both views, square grayscale images with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IpsilateralCase {
    pub patient_id: String,
    pub side: Side,
    pub image_size: usize,
    pub examined: Vec<f64>,
    pub auxiliary: Vec<f64>,
    /// 0 = benign, 1 = suspicious/malignant.
    pub label: usize,
    pub split: Option<Split>,
}

impl IpsilateralCase {
    pub fn swap_roles(&mut self) {
        std::mem::swap(&mut self.examined, &mut self.auxiliary);
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
struct ManifestRow {
    patient_id: String,
    side: String,
    view: String,
    image_path: String,
    label: String,
    #[serde(default)]
    split: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub image_size: usize,
    pub roles: ViewRoles,
}

/// Decodes an 8-bit image to grayscale, resizes bilinearly to a square edge
/// and scales to `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = img.to_luma8();
    let gray = if gray.width() as usize == size && gray.height() as usize == size {
        gray
    } else {
        image::imageops::resize(&gray, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(gray.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect())
}

/// Reads a manifest CSV and pairs its CC/MLO rows per (patient, side, split).
/// Image paths are resolved against the manifest's directory.
pub fn load_manifest(path: &Path, options: &LoadOptions) -> Result<Vec<IpsilateralCase>> {
    if options.image_size < 16 {
        return Err(Error::config("image_size", "must be at least 16"));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Manifest(format!("{other:?}")),
    })?;
    type Key = (String, Side, Option<Split>);
    let mut groups: BTreeMap<Key, [Option<(PathBuf, usize)>; 2]> = BTreeMap::new();
    let mut order: Vec<Key> = Vec::new();
    for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::Manifest(format!("row {}: {e}", line + 2)))?;
        let side: Side = row.side.parse()?;
        let view: View = row.view.parse()?;
        let label = match row.label.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Manifest(format!(
                    "row {}: label `{other}` not in {{0,1}}",
                    line + 2
                )))
            }
        };
        let split = match row.split.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<Split>()?),
        };
        let key = (row.patient_id.trim().to_string(), side, split);
        let slot = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            [None, None]
        });
        let idx = match view {
            View::CC => 0,
            View::MLO => 1,
        };
        if slot[idx].is_some() {
            return Err(Error::Manifest(format!(
                "duplicate {view} view for patient {} side {side}",
                key.0
            )));
        }
        slot[idx] = Some((base.join(row.image_path.trim()), label));
    }
    let mut cases = Vec::with_capacity(order.len());
    for key in order {
        let (patient_id, side, split) = key.clone();
        let [cc, mlo] = groups.remove(&key).expect("grouped key");
        let (Some((cc_path, cc_label)), Some((mlo_path, mlo_label))) = (cc, mlo) else {
            return Err(Error::Manifest(format!(
                "patient {patient_id} side {side}: missing partner view (both CC and MLO required)"
            )));
        };
        if cc_label != mlo_label {
            return Err(Error::Manifest(format!(
                "patient {patient_id} side {side}: CC label {cc_label} differs from MLO label {mlo_label}"
            )));
        }
        let cc = load_image(&cc_path, options.image_size)?;
        let mlo = load_image(&mlo_path, options.image_size)?;
        let (examined, auxiliary) = match options.roles {
            ViewRoles::CcExamined => (cc, mlo),
            ViewRoles::MloExamined => (mlo, cc),
        };
        cases.push(IpsilateralCase {
            patient_id,
            side,
            image_size: options.image_size,
            examined,
            auxiliary,
            label: cc_label,
            split,
        });
    }
    if cases.is_empty() {
        return Err(Error::Manifest("manifest has no rows".into()));
    }
    Ok(cases)
}

/// Splits cases per class so that each class keeps `train_fraction` of its
/// cases in training. Test counts per class are `round(n_c · (1 − f))`.
pub fn stratified_split(
    cases: Vec<IpsilateralCase>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<IpsilateralCase>, Vec<IpsilateralCase>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(
            "train_fraction",
            format!("{train_fraction} leaves an empty split; must lie in (0, 1)"),
        ));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, c) in cases.iter().enumerate() {
        by_class
            .get_mut(c.label)
            .ok_or_else(|| Error::Usage(format!("label {} out of range", c.label)))?
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; cases.len()];
    for (class, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Usage(format!(
                "class {class} has {} cases; stratified splitting needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_test = test_count(idx.len(), train_fraction);
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (mut case, t) in cases.into_iter().zip(is_test) {
        case.split = Some(if t { Split::Test } else { Split::Train });
        if t {
            test.push(case);
        } else {
            train.push(case);
        }
    }
    Ok((train, test))
}

/// Per-class test count: rounded, but at least one case on each side.
pub fn test_count(n: usize, train_fraction: f64) -> usize {
    let raw = (n as f64 * (1.0 - train_fraction)).round() as usize;
    raw.clamp(1, n - 1)
}

/// Partitions cases by their manifest split column.
pub fn split_by_column(
    cases: Vec<IpsilateralCase>,
) -> Result<(Vec<IpsilateralCase>, Vec<IpsilateralCase>)> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in cases {
        match c.split {
            Some(Split::Train) => train.push(c),
            Some(Split::Test) => test.push(c),
            None => {
                return Err(Error::Manifest(format!(
                    "patient {} side {} has no split; use stratified splitting",
                    c.patient_id, c.side
                )))
            }
        }
    }
    Ok((train, test))
}

/// Case indices for one epoch, chunked into batches of `batch_cases`.
/// The order depends only on `(seed, epoch)`.
pub fn make_batches(
    n_cases: usize,
    batch_cases: usize,
    seed: u64,
    epoch: usize,
    shuffle: bool,
) -> Vec<Vec<usize>> {
    assert!(batch_cases >= 1, "batch_cases must be positive");
    let mut order: Vec<usize> = (0..n_cases).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order.chunks(batch_cases).map(<[usize]>::to_vec).collect()
}

/// Scalar pixel standardization estimated on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Default for Standardizer {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl Standardizer {
    pub fn fit(cases: &[IpsilateralCase]) -> Self {
        let n: usize = cases
            .iter()
            .map(|c| c.examined.len() + c.auxiliary.len())
            .sum();
        if n == 0 {
            return Self::default();
        }
        let pixels = || {
            cases
                .iter()
                .flat_map(|c| c.examined.iter().chain(&c.auxiliary))
        };
        let mean = pixels().sum::<f64>() / n as f64;
        let var = pixels().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }
}

/// Cases of one split with the tensors the network consumes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub cases: Vec<IpsilateralCase>,
    pub image_size: usize,
    pub standardizer: Standardizer,
}

/// One batch: examined and auxiliary images `(cases, 1, size, size)`, labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub examined: FeatureMap,
    pub auxiliary: FeatureMap,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(cases: Vec<IpsilateralCase>, standardizer: Standardizer) -> Result<Self> {
        let image_size = cases.first().map_or(0, |c| c.image_size);
        for c in &cases {
            let px = image_size * image_size;
            if c.image_size != image_size || c.examined.len() != px || c.auxiliary.len() != px {
                return Err(Error::dimension("case images", image_size, c.image_size));
            }
        }
        Ok(Self {
            cases,
            image_size,
            standardizer,
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.cases.iter().map(|c| c.label).collect()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let pos = self.cases.iter().filter(|c| c.label == 1).count();
        [self.cases.len() - pos, pos]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let s = self.image_size;
        let Standardizer { mean, std } = self.standardizer;
        let mut ex = Vec::with_capacity(indices.len() * s * s);
        let mut aux = Vec::with_capacity(indices.len() * s * s);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let c = &self.cases[i];
            ex.extend(c.examined.iter().map(|v| (v - mean) / std));
            aux.extend(c.auxiliary.iter().map(|v| (v - mean) / std));
            labels.push(c.label);
        }
        Ok(Batch {
            examined: FeatureMap::from_vec([indices.len(), 1, s, s], ex)?,
            auxiliary: FeatureMap::from_vec([indices.len(), 1, s, s], aux)?,
            labels,
        })
    }
}

/// Synthetic two-view XOR task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_cases: usize,
    pub image_size: usize,
    pub positive_rate: f64,
    /// Keys the fixed per-view cell permutation of the glyphs.
    pub view_scramble_seed: u64,
    pub noise_level: f64,
    /// Keys the per-case bits and noise.
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_cases: 400,
            image_size: 64,
            positive_rate: 0.5,
            view_scramble_seed: 7,
            noise_level: 0.1,
            seed: 0,
        }
    }
}

/// Glyph grid resolution (cells per edge).
pub const GLYPH_GRID: usize = 8;
const BACKGROUND: f64 = 0.25;
const FOREGROUND: f64 = 0.75;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cases < 4 {
            return Err(Error::config("n_cases", "must be at least 4"));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size", "must be at least 16"));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::config(
                "positive_rate",
                "must lie strictly between 0 and 1",
            ));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(Error::config(
                "noise_level",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }

    /// Noise-free rendering of a view's bit: `templates()[view][bit]`, values
    /// in `{BACKGROUND, FOREGROUND}`.
    pub fn templates(&self) -> [[Vec<f64>; 2]; 2] {
        let g = GLYPH_GRID;
        // Bit 0: a ring; bit 1: a plus sign. Both on the g×g grid.
        let ring = |r: usize, c: usize| {
            (1..g - 1).contains(&r)
                && (1..g - 1).contains(&c)
                && (r == 1 || r == g - 2 || c == 1 || c == g - 2)
        };
        let plus =
            |r: usize, c: usize| (r == g / 2 - 1 || r == g / 2) || (c == g / 2 - 1 || c == g / 2);
        let mut out: [[Vec<f64>; 2]; 2] = Default::default();
        for (view, slot) in out.iter_mut().enumerate() {
            let mut perm: Vec<usize> = (0..g * g).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.view_scramble_seed);
            rng.set_stream(view as u64 + 1);
            perm.shuffle(&mut rng);
            for (bit, img) in slot.iter_mut().enumerate() {
                let s = self.image_size;
                *img = (0..s * s)
                    .map(|i| {
                        let cell = (i / s) * g / s * g + (i % s) * g / s;
                        let src = perm[cell];
                        let on = if bit == 0 {
                            ring(src / g, src % g)
                        } else {
                            plus(src / g, src % g)
                        };
                        if on {
                            FOREGROUND
                        } else {
                            BACKGROUND
                        }
                    })
                    .collect();
            }
        }
        out
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Cases whose label is the XOR of one hidden bit per view. Each view's bit
/// is uniform and independent of the label, so neither view alone carries
/// information about the class. Pixels are quantized to 8 bits so that the
/// in-memory set equals its PNG rendering.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<IpsilateralCase>> {
    spec.validate()?;
    let templates = spec.templates();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_level.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut cases = Vec::with_capacity(spec.n_cases);
    for i in 0..spec.n_cases {
        let label = usize::from(rng.random_bool(spec.positive_rate));
        let examined_bit = usize::from(rng.random_bool(0.5));
        let auxiliary_bit = examined_bit ^ label;
        let mut render = |view: usize, bit: usize| -> Vec<f64> {
            templates[view][bit]
                .iter()
                .map(|&v| {
                    let n = if spec.noise_level > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    quantize(v + n)
                })
                .collect()
        };
        let examined = render(0, examined_bit);
        let auxiliary = render(1, auxiliary_bit);
        cases.push(IpsilateralCase {
            patient_id: format!("synth{i:05}"),
            side: if i % 2 == 0 { Side::L } else { Side::R },
            image_size: spec.image_size,
            examined,
            auxiliary,
            label,
            split: None,
        });
    }
    Ok(cases)
}

fn save_png(path: &Path, pixels: &[f64], size: usize) -> Result<()> {
    let bytes: Vec<u8> = pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(size as u32, size as u32, bytes)
        .ok_or_else(|| Error::dimension("png buffer", size * size, pixels.len()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes `manifest.csv` and `images/*.png` for a set of cases. The examined
/// image is written as the CC view.
pub fn write_dataset(cases: &[IpsilateralCase], out_dir: &Path) -> Result<PathBuf> {
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = out_dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(MANIFEST_HEADER)?;
    for c in cases {
        for (view, pixels) in [(View::CC, &c.examined), (View::MLO, &c.auxiliary)] {
            let rel = format!("images/{}_{}_{}.png", c.patient_id, c.side, view);
            save_png(&out_dir.join(&rel), pixels, c.image_size)?;
            let split = c.split.map(|s| s.to_string()).unwrap_or_default();
            w.write_record([
                c.patient_id.as_str(),
                &c.side.to_string(),
                &view.to_string(),
                &rel,
                &c.label.to_string(),
                &split,
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
