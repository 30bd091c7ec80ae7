//! Dataset manifests, mask-to-multilabel conversion, deterministic
//! splitting, and image preprocessing/augmentation.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered class names; the order fixes the label-vector index mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    names: Vec<String>,
}

impl LabelVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Data("vocabulary must be non-empty".into()));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(Error::Data("class names must be non-empty".into()));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Data(format!("duplicate class name {name:?}")));
            }
        }
        Ok(LabelVocabulary { names })
    }

    /// The ten RescueNet-derived classes: four building damage levels, two
    /// road states, and the four object classes.
    pub fn rescuenet_default() -> Self {
        LabelVocabulary::new(
            [
                "building-no-damage",
                "building-medium-damage",
                "building-major-damage",
                "building-total-destruction",
                "road-clear",
                "road-blocked",
                "tree",
                "water",
                "vehicle",
                "pool",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
        .expect("static vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: PathBuf,
    pub label: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub vocabulary: LabelVocabulary,
    pub samples: Vec<Sample>,
    pub provenance: Vec<String>,
}

impl DatasetManifest {
    pub fn new(vocabulary: LabelVocabulary, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            if s.label.len() != vocabulary.len() {
                return Err(Error::Data(format!(
                    "sample {:?} has {} labels, vocabulary has {}",
                    s.image,
                    s.label.len(),
                    vocabulary.len()
                )));
            }
        }
        Ok(DatasetManifest {
            vocabulary,
            samples,
            provenance: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Parse the CSV form: header `image,<class1>,...,<classC>`, cells 0/1.
    /// Relative image paths are resolved against `base_dir`.
    pub fn parse_csv(text: &str, base_dir: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::Data(format!("manifest header: {e}")))?
            .clone();
        if header.len() < 2 || header.get(0) != Some("image") {
            return Err(Error::Data(
                "manifest header must be `image,<class1>,...,<classC>`".into(),
            ));
        }
        let vocabulary = LabelVocabulary::new(header.iter().skip(1).map(String::from).collect())?;
        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        for (row_idx, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::Data(format!("manifest row {}: {e}", row_idx + 1)))?;
            if row.len() != header.len() {
                return Err(Error::Data(format!(
                    "manifest row {} has {} cells, expected {}",
                    row_idx + 1,
                    row.len(),
                    header.len()
                )));
            }
            let image_raw = row.get(0).unwrap();
            if !seen.insert(image_raw.to_string()) {
                return Err(Error::Data(format!(
                    "duplicate image entry {image_raw:?} at row {}",
                    row_idx + 1
                )));
            }
            let mut label = Vec::with_capacity(vocabulary.len());
            for (col, cell) in row.iter().skip(1).enumerate() {
                match cell.trim() {
                    "0" => label.push(0),
                    "1" => label.push(1),
                    other => {
                        return Err(Error::Data(format!(
                            "non-binary label {other:?} at row {}, column {:?}",
                            row_idx + 1,
                            vocabulary.names()[col]
                        )))
                    }
                }
            }
            let image = base_dir.join(image_raw);
            samples.push(Sample { image, label });
        }
        DatasetManifest::new(vocabulary, samples)
    }

    pub fn to_csv(&self, base_dir: &Path) -> String {
        let mut out = String::from("image");
        for name in self.vocabulary.names() {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for s in &self.samples {
            let rel = s.image.strip_prefix(base_dir).unwrap_or(&s.image);
            out.push_str(&rel.display().to_string());
            for &v in &s.label {
                out.push(',');
                out.push_str(if v == 1 { "1" } else { "0" });
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::write(path, self.to_csv(base))?;
        Ok(())
    }
}

/// Load and validate a manifest; every referenced image must exist, and the
/// failure lists all missing paths.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {path:?}: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let manifest = DatasetManifest::parse_csv(&text, base)?;
    let missing: Vec<&Path> = manifest
        .samples
        .iter()
        .map(|s| s.image.as_path())
        .filter(|p| !p.exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{} referenced images missing: {missing:?}",
            missing.len()
        )));
    }
    Ok(manifest)
}

/// Mapping from mask pixel ids to vocabulary indices; unmapped ids must be
/// explicitly ignored.
#[derive(Debug, Clone, Default)]
pub struct MaskIdMap {
    pub map: HashMap<u32, usize>,
    pub ignore: HashSet<u32>,
}

/// Class j is present iff its mapped pixel count reaches `min_pixels`.
pub fn derive_labels_from_mask(
    mask: &[u32],
    id_map: &MaskIdMap,
    min_pixels: usize,
    vocab_size: usize,
) -> Result<Vec<u8>> {
    if min_pixels == 0 {
        return Err(Error::invalid("min_pixels must be positive"));
    }
    let mut counts = vec![0usize; vocab_size];
    let mut unmapped = Vec::new();
    for &id in mask {
        if let Some(&j) = id_map.map.get(&id) {
            if j >= vocab_size {
                return Err(Error::Data(format!(
                    "id_map sends mask id {id} to index {j}, vocabulary has {vocab_size} classes"
                )));
            }
            counts[j] += 1;
        } else if !id_map.ignore.contains(&id) && !unmapped.contains(&id) {
            unmapped.push(id);
        }
    }
    if !unmapped.is_empty() {
        return Err(Error::Data(format!(
            "mask contains unmapped, non-ignored ids {unmapped:?}"
        )));
    }
    Ok(counts
        .iter()
        .map(|&c| if c >= min_pixels { 1 } else { 0 })
        .collect())
}

/// Seeded uniform shuffle, then a prefix split of floor(N * train_fraction).
/// Deterministic for a fixed seed; both sides must be non-empty.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction must lie strictly in (0,1), got {train_fraction}"
        )));
    }
    let n = manifest.len();
    let n_train = ((n as f64) * train_fraction).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Data(format!(
            "split of {n} samples at fraction {train_fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let pick = |indices: &[usize]| DatasetManifest {
        vocabulary: manifest.vocabulary.clone(),
        samples: indices.iter().map(|&i| manifest.samples[i].clone()).collect(),
        provenance: manifest.provenance.clone(),
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Decoded RGB image with values in [0,1], HWC layout.
#[derive(Debug, Clone)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl RgbImage {
    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![value; width * height * 3],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("cannot decode image {path:?}: {e}")))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Ok(RgbImage {
            width: w,
            height: h,
            pixels,
        })
    }

    fn get(&self, x: usize, y: usize, ch: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + ch]
    }
}

/// Per-channel normalization constants applied after scaling to [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConstants {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormConstants {
    fn default() -> Self {
        NormConstants {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Augmentation decisions; sampled once per image so results are
/// reproducible and order-independent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_w: usize,
    pub crop_h: usize,
}

impl AugmentParams {
    pub fn identity(width: usize, height: usize) -> Self {
        AugmentParams {
            flip: false,
            crop_x: 0,
            crop_y: 0,
            crop_w: width,
            crop_h: height,
        }
    }

    /// Random horizontal flip (p = 0.5) and a random resized crop covering a
    /// 0.8..1.0 linear fraction of each side.
    pub fn sample(rng: &mut impl Rng, width: usize, height: usize) -> Self {
        let flip = rng.gen_bool(0.5);
        let scale = 0.8 + 0.2 * rng.gen::<f64>();
        let crop_w = ((width as f64 * scale).round() as usize).clamp(1, width);
        let crop_h = ((height as f64 * scale).round() as usize).clamp(1, height);
        let crop_x = rng.gen_range(0..=width - crop_w);
        let crop_y = rng.gen_range(0..=height - crop_h);
        AugmentParams {
            flip,
            crop_x,
            crop_y,
            crop_w,
            crop_h,
        }
    }
}

fn bilinear_resize(img: &RgbImage, crop: &AugmentParams, size: usize) -> Vec<f64> {
    // half-pixel center mapping; identity when source and target sizes match
    let mut out = vec![0.0; 3 * size * size];
    let sx = crop.crop_w as f64 / size as f64;
    let sy = crop.crop_h as f64 / size as f64;
    for oy in 0..size {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, crop.crop_h as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(crop.crop_h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..size {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, crop.crop_w as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(crop.crop_w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..3 {
                let p00 = img.get(crop.crop_x + x0, crop.crop_y + y0, ch);
                let p01 = img.get(crop.crop_x + x1, crop.crop_y + y0, ch);
                let p10 = img.get(crop.crop_x + x0, crop.crop_y + y1, ch);
                let p11 = img.get(crop.crop_x + x1, crop.crop_y + y1, ch);
                let top = p00 + wx * (p01 - p00);
                let bot = p10 + wx * (p11 - p10);
                out[(ch * size + oy) * size + ox] = top + wy * (bot - top);
            }
        }
    }
    out
}

/// Crop (train only), bilinear-resize to S x S, mirror if flipping, then
/// per-channel standardize. Returns a [3,S,S] tensor.
pub fn preprocess_with(
    img: &RgbImage,
    size: usize,
    params: &AugmentParams,
    norm: &NormConstants,
) -> Result<Tensor> {
    if size == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let mut data = bilinear_resize(img, params, size);
    if params.flip {
        for ch in 0..3 {
            for y in 0..size {
                let row = &mut data[(ch * size + y) * size..(ch * size + y + 1) * size];
                row.reverse();
            }
        }
    }
    for ch in 0..3 {
        let (m, s) = (norm.mean[ch], norm.std[ch]);
        for v in &mut data[ch * size * size..(ch + 1) * size * size] {
            *v = (*v - m) / s;
        }
    }
    Tensor::new(vec![3, size, size], data)
}

/// Deterministic eval-mode preprocessing.
pub fn preprocess_eval(img: &RgbImage, size: usize, norm: &NormConstants) -> Result<Tensor> {
    preprocess_with(img, size, &AugmentParams::identity(img.width, img.height), norm)
}

/// Train-mode preprocessing with augmentation drawn from `rng`.
pub fn preprocess_train(
    img: &RgbImage,
    size: usize,
    norm: &NormConstants,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let params = AugmentParams::sample(rng, img.width, img.height);
    preprocess_with(img, size, &params, norm)
}
