//! Synthetic ordinal-imbalanced datasets, stratified splitting, lightweight
//! augmentation, and the binary dataset file format.
//!
//! Classes are ordinal by construction: class k's clean prototype is the
//! background plus the first k blobs from a fixed, shared blob layout, so the
//! pattern extent grows monotonically with the class index and noisy samples
//! are most easily confused with adjacent classes. The layout is a task
//! constant (independent of the dataset seed); per-dataset appearance varies
//! only through blob intensity and background bias, which keeps transfer
//! between datasets meaningful.

use crate::autodiff::Tensor;
use crate::rng::{derive_seed, SeedStream};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const DATASET_MAGIC: &[u8; 8] = b"STDS0001";
/// Fixed seed for the shared blob layout (prototype family).
const PROTOTYPE_LAYOUT_SEED: u64 = 0x70726f746f; // "proto"

#[derive(Debug, Error)]
pub enum DataError {
    #[error("class proportions must be non-negative and sum to 1, got {0:?}")]
    BadDistribution(Vec<f64>),
    #[error("sample count {n} is smaller than the {classes} classes with positive proportion")]
    TooFewSamples { n: usize, classes: usize },
    #[error("image dimensions must be positive, got {h}x{w}")]
    BadImageSize { h: usize, w: usize },
    #[error("difficulty (noise sigma) must be non-negative, got {0}")]
    NegativeNoise(f64),
    #[error("label noise rate must lie in [0, 1], got {0}")]
    BadLabelNoise(f64),
    #[error("blob decay must be positive and finite, got {0}")]
    BadBlobDecay(f64),
    #[error("validation fraction must lie strictly between 0 and 1, got {0}")]
    BadValFraction(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has {0} classes; the file format stores labels as u8 (max 256)")]
    TooManyClasses(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unrecognized dataset format: bad magic")]
    UnrecognizedFormat,
    #[error("truncated dataset: header promises more data than the file holds")]
    Truncated,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-class proportions, summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn new(proportions: Vec<f64>) -> Result<Self, DataError> {
        let sum: f64 = proportions.iter().sum();
        if proportions.is_empty()
            || proportions.iter().any(|&p| p < 0.0 || !p.is_finite())
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(DataError::BadDistribution(proportions));
        }
        Ok(ClassDistribution(proportions))
    }

    /// The default skew: [0.32, 0.05, 0.33, 0.18, 0.12].
    pub fn idrid_default() -> Self {
        ClassDistribution(vec![0.32, 0.05, 0.33, 0.18, 0.12])
    }

    pub fn uniform(classes: usize) -> Self {
        ClassDistribution(vec![1.0 / classes as f64; classes])
    }

    pub fn proportions(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f64>> for ClassDistribution {
    type Error = DataError;
    fn try_from(v: Vec<f64>) -> Result<Self, DataError> {
        ClassDistribution::new(v)
    }
}

impl From<ClassDistribution> for Vec<f64> {
    fn from(d: ClassDistribution) -> Vec<f64> {
        d.0
    }
}

/// Recipe for one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub distribution: ClassDistribution,
    /// Per-pixel Gaussian noise sigma.
    #[serde(default)]
    pub difficulty: f64,
    #[serde(default)]
    pub seed: u64,
    /// Constant added to every pixel (per-dataset appearance shift).
    #[serde(default)]
    pub background: f64,
    /// Blob intensity multiplier (per-dataset appearance shift).
    #[serde(default = "default_intensity")]
    pub blob_intensity: f64,
    /// Per-blob contrast decay: blob j of a prototype contributes
    /// `blob_decay^j` (j = 0, 1, ...). Values below 1 make the marginal
    /// difference between adjacent upper classes fainter, concentrating
    /// difficulty in the tail grades.
    #[serde(default = "default_intensity")]
    pub blob_decay: f64,
    /// Probability that a sample's label is replaced by a uniform random
    /// class. Nonzero rates perturb the per-class label counts.
    #[serde(default)]
    pub label_noise: f64,
}

fn default_intensity() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// Largest-remainder apportionment of `n` over `proportions`, with a
/// guaranteed minimum of 1 for every positive-proportion class when
/// `n >= classes`. Remainder ties break toward the lower class index.
pub fn largest_remainder_counts(n: usize, proportions: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(proportions.len());
    let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(proportions.len());
    for (k, &p) in proportions.iter().enumerate() {
        let exact = n as f64 * p;
        let floor = exact.floor() as usize;
        counts.push(floor);
        fractions.push((k, exact - floor as f64));
    }
    let assigned: usize = counts.iter().sum();
    // stable sort keeps index order for equal fractions
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for i in 0..n.saturating_sub(assigned) {
        counts[fractions[i % fractions.len()].0] += 1;
    }
    // min-1 repair for positive-proportion classes
    let positive = proportions.iter().filter(|&&p| p > 0.0).count();
    if n >= positive {
        for k in 0..proportions.len() {
            if proportions[k] > 0.0 && counts[k] == 0 {
                let donor = counts
                    .iter()
                    .enumerate()
                    .max_by_key(|&(_, &c)| c)
                    .map(|(i, _)| i)
                    .expect("non-empty proportions");
                counts[donor] -= 1;
                counts[k] += 1;
            }
        }
    }
    counts
}

/// Blob layout shared by every dataset: the first four blob centers sit at
/// the quarter positions, further ones are rejection-sampled from the fixed
/// layout seed with a minimum separation.
fn blob_centers(h: usize, w: usize, blobs: usize) -> Vec<(usize, usize)> {
    let mut centers: Vec<(usize, usize)> = vec![
        (h / 4, w / 4),
        (3 * h / 4, 3 * w / 4),
        (h / 4, 3 * w / 4),
        (3 * h / 4, w / 4),
    ];
    centers.truncate(blobs.max(0));
    if blobs > 4 {
        let mut stream = SeedStream::new(PROTOTYPE_LAYOUT_SEED);
        let min_sep = (h.min(w) / 4).max(1);
        let mut attempts = 0;
        while centers.len() < blobs {
            let y = stream.uniform_below(h as u64) as usize;
            let x = stream.uniform_below(w as u64) as usize;
            attempts += 1;
            let far_enough = centers.iter().all(|&(cy, cx)| {
                let dy = cy.abs_diff(y);
                let dx = cx.abs_diff(x);
                dy * dy + dx * dx >= min_sep * min_sep
            });
            if far_enough || attempts > 10_000 {
                centers.push((y, x));
            }
        }
    }
    centers
}

fn blob_radius(h: usize, w: usize) -> usize {
    (h.min(w) / 5).max(1)
}

/// Clean prototype for class k: discs at the first k blob centers, so the
/// pattern extent grows monotonically with the class and near misses land on
/// adjacent grades. The first three blobs are full contrast and later ones
/// fade geometrically (`decay^(j-2)` for blob j >= 2, 0-indexed), which
/// concentrates the difficulty in the highest grades. Class 0 is the empty
/// pattern.
pub fn prototype_decayed(class: usize, h: usize, w: usize, decay: f64) -> Vec<f64> {
    let mut img = vec![0.0; h * w];
    let r = blob_radius(h, w);
    for (j, &(cy, cx)) in blob_centers(h, w, class).iter().enumerate() {
        let level = decay.powi(j.saturating_sub(2) as i32);
        for y in cy.saturating_sub(r)..(cy + r + 1).min(h) {
            for x in cx.saturating_sub(r)..(cx + r + 1).min(w) {
                let dy = y.abs_diff(cy);
                let dx = x.abs_diff(cx);
                if dy * dy + dx * dx <= r * r {
                    img[y * w + x] = level;
                }
            }
        }
    }
    img
}

/// Clean prototype with uniform blob contrast.
pub fn prototype(class: usize, h: usize, w: usize) -> Vec<f64> {
    prototype_decayed(class, h, w, 1.0)
}

/// Pixel mask of the class prototype (true on blob pixels).
pub fn prototype_mask(class: usize, h: usize, w: usize) -> Vec<bool> {
    prototype(class, h, w).iter().map(|&v| v != 0.0).collect()
}

/// Generates a synthetic dataset. Identical specs give bit-identical
/// datasets; samples are ordered by class.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset, DataError> {
    let props = spec.distribution.proportions();
    let classes = props.len();
    if classes > 256 {
        return Err(DataError::TooManyClasses(classes));
    }
    if spec.h == 0 || spec.w == 0 {
        return Err(DataError::BadImageSize { h: spec.h, w: spec.w });
    }
    if spec.difficulty < 0.0 {
        return Err(DataError::NegativeNoise(spec.difficulty));
    }
    if !(0.0..=1.0).contains(&spec.label_noise) {
        return Err(DataError::BadLabelNoise(spec.label_noise));
    }
    if !(spec.blob_decay > 0.0 && spec.blob_decay.is_finite()) {
        return Err(DataError::BadBlobDecay(spec.blob_decay));
    }
    let positive = props.iter().filter(|&&p| p > 0.0).count();
    if spec.n < positive {
        return Err(DataError::TooFewSamples {
            n: spec.n,
            classes: positive,
        });
    }

    let counts = largest_remainder_counts(spec.n, props);
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|k| prototype_decayed(k, spec.h, spec.w, spec.blob_decay))
        .collect();

    let mut noise = SeedStream::new(derive_seed(spec.seed, 1));
    let mut label_flip = SeedStream::new(derive_seed(spec.seed, 2));
    let mut samples = Vec::with_capacity(spec.n);
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut pixels: Vec<f64> = prototypes[class]
                .iter()
                .map(|&p| spec.background + spec.blob_intensity * p)
                .collect();
            if spec.difficulty > 0.0 {
                for px in &mut pixels {
                    *px += spec.difficulty * noise.normal();
                }
            }
            let mut label = class;
            if spec.label_noise > 0.0 && label_flip.uniform() < spec.label_noise {
                label = label_flip.uniform_below(classes as u64) as usize;
            }
            samples.push(Sample {
                image: Tensor::new(vec![1, spec.h, spec.w], pixels)
                    .expect("spec dims validated above"),
                label,
            });
        }
    }
    Ok(Dataset {
        name: String::new(),
        classes,
        h: spec.h,
        w: spec.w,
        samples,
    })
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Seeded stratified split. Per class: validation count is
/// `round(count * fraction)` (half rounds up) clamped to [1, count-1] when
/// the class has at least 2 samples; single-sample classes stay in train
/// with a warning. Original sample order is preserved inside each part.
pub fn stratified_split(
    ds: &Dataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(0.0 < val_fraction && val_fraction < 1.0) {
        return Err(DataError::BadValFraction(val_fraction));
    }
    if ds.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (idx, s) in ds.samples.iter().enumerate() {
        if s.label >= ds.classes {
            return Err(DataError::LabelOutOfRange {
                label: s.label,
                classes: ds.classes,
            });
        }
        by_class[s.label].push(idx);
    }

    let mut in_val = vec![false; ds.len()];
    for (class, indices) in by_class.iter().enumerate() {
        let count = indices.len();
        if count == 0 {
            continue;
        }
        if count == 1 {
            log::warn!(
                "stratified_split: class {class} has a single sample; keeping it in train"
            );
            continue;
        }
        let val_count = round_half_up(count as f64 * val_fraction)
            .max(1)
            .min(count - 1);
        let mut shuffled = indices.clone();
        SeedStream::new(derive_seed(seed, class as u64)).shuffle(&mut shuffled);
        for &idx in shuffled.iter().take(val_count) {
            in_val[idx] = true;
        }
    }

    let pick = |val: bool| -> Vec<Sample> {
        ds.samples
            .iter()
            .enumerate()
            .filter(|(i, _)| in_val[*i] == val)
            .map(|(_, s)| s.clone())
            .collect()
    };
    let train = Dataset {
        name: format!("{}-train", ds.name),
        classes: ds.classes,
        h: ds.h,
        w: ds.w,
        samples: pick(false),
    };
    let val = Dataset {
        name: format!("{}-val", ds.name),
        classes: ds.classes,
        h: ds.h,
        w: ds.w,
        samples: pick(true),
    };
    Ok((train, val))
}

/// Augmentation configuration: each enabled op is applied independently with
/// probability 1/2 per call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AugmentOps {
    #[serde(default)]
    pub hflip: bool,
    #[serde(default)]
    pub vflip: bool,
    /// Number of 90-degree counterclockwise turns (1..=3). Odd turns require
    /// square images.
    #[serde(default)]
    pub rot90: Option<u8>,
    /// Additive brightness jitter amplitude: delta ~ Uniform(-a, a).
    #[serde(default)]
    pub jitter: Option<f64>,
}

impl AugmentOps {
    pub fn none() -> Self {
        AugmentOps::default()
    }

    pub fn any_enabled(&self) -> bool {
        self.hflip || self.vflip || self.rot90.is_some() || self.jitter.is_some()
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<(), String> {
        if let Some(k) = self.rot90 {
            if !(1..=3).contains(&k) {
                return Err(format!("rot90 turns must be 1..=3, got {k}"));
            }
            if k % 2 == 1 && h != w {
                return Err(format!(
                    "rot90 with odd turns requires square images, got {h}x{w}"
                ));
            }
        }
        if let Some(a) = self.jitter {
            if a < 0.0 || !a.is_finite() {
                return Err(format!("jitter amplitude must be non-negative, got {a}"));
            }
        }
        Ok(())
    }
}

fn hflip_pixels(px: &mut [f64], h: usize, w: usize) {
    for y in 0..h {
        px[y * w..(y + 1) * w].reverse();
    }
}

fn vflip_pixels(px: &mut [f64], h: usize, w: usize) {
    for y in 0..h / 2 {
        for x in 0..w {
            px.swap(y * w + x, (h - 1 - y) * w + x);
        }
    }
}

/// One counterclockwise quarter turn of a square image.
fn rot90_pixels(px: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = px[x * n + (n - 1 - y)];
        }
    }
    out
}

/// Applies each enabled op with probability 1/2, in the fixed order
/// hflip, vflip, rot90, jitter. Deterministic given (ops, seed). The label
/// and image shape are never changed.
///
/// Panics if an odd rot90 is enabled for a non-square image; validate ops
/// against the dataset shape first.
pub fn augment(image: &Tensor, ops: &AugmentOps, seed: u64) -> Tensor {
    let shape = image.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut px = image.values().to_vec();
    let mut stream = SeedStream::new(seed);
    if ops.hflip && stream.uniform() < 0.5 {
        hflip_pixels(&mut px, h, w);
    }
    if ops.vflip && stream.uniform() < 0.5 {
        vflip_pixels(&mut px, h, w);
    }
    if let Some(k) = ops.rot90 {
        if stream.uniform() < 0.5 {
            assert!(
                k % 2 == 0 || h == w,
                "odd rot90 requires square images, got {h}x{w}"
            );
            for _ in 0..k {
                px = rot90_pixels(&px, h);
            }
        }
    }
    if let Some(a) = ops.jitter {
        if stream.uniform() < 0.5 {
            let delta = stream.uniform_in(-a, a);
            for v in &mut px {
                *v += delta;
            }
        }
    }
    Tensor::new(shape, px).expect("augmentation preserves shape")
}

// ---- binary dataset format --------------------------------------------------
//
// magic "STDS0001"; u32 n; u16 C; u16 h; u16 w; then n records of
// (u8 label, h*w little-endian f64 pixels). All integers little-endian.

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    if ds.classes > 256 {
        return Err(DataError::TooManyClasses(ds.classes));
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&(ds.len() as u32).to_le_bytes())?;
    out.write_all(&(ds.classes as u16).to_le_bytes())?;
    out.write_all(&(ds.h as u16).to_le_bytes())?;
    out.write_all(&(ds.w as u16).to_le_bytes())?;
    for s in &ds.samples {
        if s.label >= ds.classes {
            return Err(DataError::LabelOutOfRange {
                label: s.label,
                classes: ds.classes,
            });
        }
        out.write_all(&[s.label as u8])?;
        for v in s.image.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated
        } else {
            DataError::Io(e)
        }
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut file = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or_truncated(&mut file, &mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(DataError::UnrecognizedFormat);
    }
    let mut b4 = [0u8; 4];
    let mut b2 = [0u8; 2];
    read_exact_or_truncated(&mut file, &mut b4)?;
    let n = u32::from_le_bytes(b4) as usize;
    read_exact_or_truncated(&mut file, &mut b2)?;
    let classes = u16::from_le_bytes(b2) as usize;
    read_exact_or_truncated(&mut file, &mut b2)?;
    let h = u16::from_le_bytes(b2) as usize;
    read_exact_or_truncated(&mut file, &mut b2)?;
    let w = u16::from_le_bytes(b2) as usize;

    let mut samples = Vec::with_capacity(n);
    let mut pixel_buf = vec![0u8; h * w * 8];
    for _ in 0..n {
        let mut label_byte = [0u8; 1];
        read_exact_or_truncated(&mut file, &mut label_byte)?;
        let label = label_byte[0] as usize;
        if label >= classes {
            return Err(DataError::LabelOutOfRange { label, classes });
        }
        read_exact_or_truncated(&mut file, &mut pixel_buf)?;
        let pixels: Vec<f64> = pixel_buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(Sample {
            image: Tensor::new(vec![1, h, w], pixels).map_err(|_| DataError::Truncated)?,
            label,
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        name,
        classes,
        h,
        w,
        samples,
    })
}
