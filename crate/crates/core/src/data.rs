//! Long-tailed datasets: exponential-decay subsampling, a procedural blob
//! dataset for desk-scale experiments, and the `LTDD1` binary format.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{self, Reader, Writer};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

const DATASET_MAGIC: &[u8; 5] = b"LTDD1";

/// Parameters of the exponential-decay class profile
/// `|D_c| = n0 · β^(−c/(C−1))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongTailSpec {
    pub num_classes: usize,
    pub largest_class_count: usize,
    pub imbalance_factor: f64,
    pub seed: u64,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("long-tail profile needs at least 2 classes"));
        }
        if self.largest_class_count == 0 {
            return Err(invalid("largest class count must be at least 1"));
        }
        if !(self.imbalance_factor >= 1.0) {
            return Err(invalid(format!(
                "imbalance factor {} < 1",
                self.imbalance_factor
            )));
        }
        Ok(())
    }

    /// Sample count of class `c`: rounded half-to-even, floored at one.
    pub fn count(&self, c: usize) -> usize {
        let exponent = -(c as f64) / (self.num_classes - 1) as f64;
        let raw = self.largest_class_count as f64 * self.imbalance_factor.powf(exponent);
        (raw.round_ties_even() as usize).max(1)
    }

    pub fn counts(&self) -> Vec<usize> {
        (0..self.num_classes).map(|c| self.count(c)).collect()
    }
}

/// Labeled 8-bit image collection, NCHW, with a per-class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LongTailDataset {
    num_classes: usize,
    shape: [usize; 3],
    labels: Vec<usize>,
    images: Vec<u8>,
    per_class_index: Vec<Vec<usize>>,
}

impl LongTailDataset {
    pub fn new(
        num_classes: usize,
        shape: [usize; 3],
        labels: Vec<usize>,
        images: Vec<u8>,
    ) -> Result<Self> {
        if num_classes == 0 || num_classes > u16::MAX as usize + 1 {
            return Err(invalid(format!("unsupported class count {num_classes}")));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(invalid(format!("image shape {shape:?}")));
        }
        let pixels: usize = shape.iter().product();
        if images.len() != labels.len() * pixels {
            return Err(Error::ShapeMismatch(format!(
                "{} pixel bytes for {} images of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        let mut per_class_index = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: num_classes,
                });
            }
            per_class_index[y].push(i);
        }
        Ok(Self {
            num_classes,
            shape,
            labels,
            images,
            per_class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn pixels_per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn raw_images(&self) -> &[u8] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    /// Pixels of image `i` scaled to `[0, 1]`.
    pub fn image_f32(&self, i: usize) -> Vec<f32> {
        self.image(i).iter().map(|&v| v as f32 / 255.0).collect()
    }

    /// `[n, c, h, w]` tensor of the given images, scaled to `[0, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let p = self.pixels_per_image();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| v as f32 / 255.0));
        }
        let [c, h, w] = self.shape;
        Tensor::new(vec![indices.len(), c, h, w], data).expect("sizes agree")
    }

    pub fn per_class_index(&self) -> &[Vec<usize>] {
        &self.per_class_index
    }

    pub fn class_indices(&self, c: usize) -> &[usize] {
        &self.per_class_index[c]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.per_class_index.iter().map(Vec::len).collect()
    }

    /// Largest over smallest class count; infinite if a class is empty.
    pub fn imbalance_ratio(&self) -> f64 {
        let counts = self.class_counts();
        let max = *counts.iter().max().unwrap_or(&0) as f64;
        let min = *counts.iter().min().unwrap_or(&0) as f64;
        max / min
    }

    /// New dataset holding the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let p = self.pixels_per_image();
        let mut images = Vec::with_capacity(indices.len() * p);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self::new(self.num_classes, self.shape, labels, images).expect("subset of a valid dataset")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [c, h, w] = self.shape;
        let mut wr = Writer::new();
        wr.bytes(DATASET_MAGIC)
            .len_u32(self.len())
            .len_u32(self.num_classes)
            .len_u32(c)
            .len_u32(h)
            .len_u32(w);
        for &y in &self.labels {
            wr.u16(y as u16);
        }
        wr.bytes(&self.images);
        let mut bytes = wr.finish();
        let digest = codec::sha256(&bytes);
        bytes.extend_from_slice(&digest);
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let what = "dataset";
        let mut r = Reader::new(bytes, what);
        r.magic(DATASET_MAGIC)?;
        let n = r.usize()?;
        let num_classes = r.usize()?;
        let shape = [r.usize()?, r.usize()?, r.usize()?];
        let mut labels = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            labels.push(r.u16()? as usize);
        }
        let pixels = shape.iter().try_fold(n, |acc, &d| acc.checked_mul(d));
        let images = r
            .take(pixels.ok_or_else(|| Error::Truncated(what.into()))?)?
            .to_vec();
        let body_end = r.position();
        let digest = r.take(32)?;
        r.expect_end()?;
        if codec::sha256(&bytes[..body_end]) != digest {
            return Err(Error::Checksum(what.into()));
        }
        Self::new(num_classes, shape, labels, images)
    }

    /// SHA-256 of the serialized dataset.
    pub fn hash(&self) -> String {
        codec::sha256_hex(&self.to_bytes())
    }
}

pub fn save_dataset(path: &Path, dataset: &LongTailDataset) -> Result<()> {
    codec::write_file(path, &dataset.to_bytes())
}

pub fn load_dataset(path: &Path) -> Result<LongTailDataset> {
    LongTailDataset::from_bytes(&codec::read_file(path)?)
}

/// Loads a `path,label` CSV manifest whose paths (relative to the manifest's
/// directory) name raw pixel files of exactly `c·h·w` bytes each.
pub fn load_manifest(
    path: &Path,
    num_classes: usize,
    shape: [usize; 3],
) -> Result<LongTailDataset> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label"] {
        return Err(Error::Config(format!(
            "manifest header must be `path,label`, got {headers:?}"
        )));
    }
    let pixels: usize = shape.iter().product();
    let (mut labels, mut images) = (Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let label: usize = record[1].trim().parse().map_err(|_| {
            Error::Config(format!(
                "manifest row {}: bad label {:?}",
                row + 1,
                &record[1]
            ))
        })?;
        let raw = codec::read_file(&base.join(record[0].trim()))?;
        if raw.len() != pixels {
            return Err(Error::ShapeMismatch(format!(
                "{}: {} bytes, expected {pixels}",
                &record[0],
                raw.len()
            )));
        }
        labels.push(label);
        images.extend_from_slice(&raw);
    }
    LongTailDataset::new(num_classes, shape, labels, images)
}

/// Subsamples a balanced source to the long-tailed profile of `spec`.
/// Class `c` keeps `spec.count(c)` samples drawn uniformly without
/// replacement; the output is grouped by class in sampled order.
pub fn make_long_tail(source: &LongTailDataset, spec: &LongTailSpec) -> Result<LongTailDataset> {
    spec.validate()?;
    if spec.num_classes != source.num_classes {
        return Err(invalid(format!(
            "profile has {} classes, source has {}",
            spec.num_classes, source.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked = Vec::new();
    for c in 0..spec.num_classes {
        let pool = source.class_indices(c);
        let want = spec.count(c);
        if pool.len() < want {
            return Err(Error::InsufficientSamples(format!(
                "class {c} has {} samples, profile needs {want}",
                pool.len()
            )));
        }
        picked.extend(
            index::sample(&mut rng, pool.len(), want)
                .into_iter()
                .map(|k| pool[k]),
        );
    }
    Ok(source.subset(&picked))
}

/// Splits off a class-balanced test set with `per_class` samples per class.
/// Returns `(test, remainder)`; the remainder keeps the source order.
pub fn balanced_split(
    dataset: &LongTailDataset,
    per_class: usize,
    seed: u64,
) -> Result<(LongTailDataset, LongTailDataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = vec![false; dataset.len()];
    let mut test = Vec::new();
    for c in 0..dataset.num_classes {
        let pool = dataset.class_indices(c);
        if pool.len() < per_class {
            return Err(Error::InsufficientSamples(format!(
                "class {c} has {} samples, split needs {per_class}",
                pool.len()
            )));
        }
        for k in index::sample(&mut rng, pool.len(), per_class) {
            taken[pool[k]] = true;
            test.push(pool[k]);
        }
    }
    let rest: Vec<usize> = (0..dataset.len()).filter(|&i| !taken[i]).collect();
    Ok((dataset.subset(&test), dataset.subset(&rest)))
}

/// Rendering knobs for [`gen_blobs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobStyle {
    /// Max displacement of the blob center from its class anchor, in pixels.
    pub jitter: f32,
    /// Std-dev of per-pixel Gaussian noise, in `[0, 1]` units.
    pub noise: f32,
    /// Probability of a second, randomly colored and placed distractor blob.
    pub distractor: f32,
}

impl Default for BlobStyle {
    fn default() -> Self {
        Self {
            jitter: 1.5,
            noise: 0.08,
            distractor: 0.0,
        }
    }
}

const ANCHORS: usize = 9;
const PALETTE_RGB: [[f32; 3]; 6] = [
    [0.95, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.9, 0.15],
    [0.85, 0.2, 0.9],
    [0.15, 0.9, 0.9],
];
const PALETTE_MONO: [[f32; 3]; 2] = [[0.95; 3], [0.55; 3]];

fn palette(channels: usize) -> &'static [[f32; 3]] {
    if channels >= 3 {
        &PALETTE_RGB
    } else {
        &PALETTE_MONO
    }
}

/// Number of distinct class patterns [`gen_blobs`] can render.
pub fn blob_pattern_count(channels: usize) -> usize {
    ANCHORS * palette(channels).len()
}

/// `(anchor cell, palette color)` of class `c`; unique per class.
fn blob_pattern(c: usize, colors: usize) -> (usize, usize) {
    let anchor = c % ANCHORS;
    (anchor, (c / ANCHORS + anchor) % colors)
}

/// Balanced procedural dataset: class `c` is a Gaussian blob with a
/// class-specific anchor position and color, plus per-sample jitter,
/// brightness variation and pixel noise.
pub fn gen_blobs(
    num_classes: usize,
    n_per_class: usize,
    shape: [usize; 3],
    seed: u64,
    style: BlobStyle,
) -> Result<LongTailDataset> {
    if num_classes == 0 || n_per_class == 0 || shape.iter().any(|&d| d == 0) {
        return Err(invalid("gen_blobs arguments must be positive"));
    }
    let available = blob_pattern_count(shape[0]);
    if num_classes > available {
        return Err(invalid(format!(
            "{num_classes} classes requested, only {available} distinguishable patterns"
        )));
    }
    let [ch, h, w] = shape;
    let colors = palette(ch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, style.noise.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    let mut images = Vec::with_capacity(num_classes * n_per_class * ch * h * w);
    let mut canvas = vec![0.0f32; ch * h * w];
    for i in 0..num_classes * n_per_class {
        // Interleave classes so any prefix is near-balanced.
        let c = i % num_classes;
        let (anchor, color) = blob_pattern(c, colors.len());
        let (ay, ax) = ((anchor / 3) as f32, (anchor % 3) as f32);
        let cy = (ay + 0.5) * h as f32 / 3.0 + rng.random_range(-style.jitter..=style.jitter);
        let cx = (ax + 0.5) * w as f32 / 3.0 + rng.random_range(-style.jitter..=style.jitter);
        let radius = (h.min(w) as f32 / 8.0) * rng.random_range(0.8..1.25);
        let bright = rng.random_range(0.75..1.0);
        let bg = rng.random_range(0.0..0.25);
        canvas.iter_mut().for_each(|v| *v = bg);
        paint(&mut canvas, shape, (cy, cx), radius, colors[color], bright);
        if rng.random::<f32>() < style.distractor {
            let dy = rng.random_range(0.0..h as f32);
            let dx = rng.random_range(0.0..w as f32);
            let dc = rng.random_range(0..colors.len());
            paint(
                &mut canvas,
                shape,
                (dy, dx),
                radius * 0.8,
                colors[dc],
                0.6 * bright,
            );
        }
        for v in &canvas {
            let px = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            images.push((px * 255.0).round() as u8);
        }
        labels.push(c);
    }
    LongTailDataset::new(num_classes, shape, labels, images)
}

fn paint(
    canvas: &mut [f32],
    shape: [usize; 3],
    center: (f32, f32),
    radius: f32,
    rgb: [f32; 3],
    gain: f32,
) {
    let [ch, h, w] = shape;
    let inv = 1.0 / (2.0 * radius * radius);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f32 + 0.5 - center.0, x as f32 + 0.5 - center.1);
            let a = gain * (-(dy * dy + dx * dx) * inv).exp();
            for c in 0..ch {
                let p = &mut canvas[(c * h + y) * w + x];
                *p = *p * (1.0 - a) + a * rgb[c.min(2)];
            }
        }
    }
}
