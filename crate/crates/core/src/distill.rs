//! The distilled set: synthetic images with hard and teacher soft labels,
//! persisted as an artifact directory.

use std::path::Path;

use crate::codec::{self, Reader, Writer};
use crate::config::KeyValues;
use crate::error::{invalid, shape, Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const IMAGES_FILE: &str = "images.bin";
pub const HARD_LABELS_FILE: &str = "hard_labels.bin";
pub const SOFT_LABELS_FILE: &str = "soft_labels.bin";
pub const PROVENANCE_FILE: &str = "provenance.txt";
pub const LABELS_CSV: &str = "labels.csv";

const IMAGES_MAGIC: &[u8; 8] = b"LTDDIMG1";
const LABELED_MAGIC: &[u8; 8] = b"LTDDLIM1";
const HARD_MAGIC: &[u8; 8] = b"LTDDHRD1";
const SOFT_MAGIC: &[u8; 8] = b"LTDDSFT1";

/// Tolerance on soft-label row sums.
pub const SOFT_SUM_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct DistilledSet {
    /// `[C·ipc, c, h, w]`.
    pub images: Tensor,
    pub hard_labels: Vec<usize>,
    /// Row-major `n × C` probabilities.
    pub soft_labels: Vec<f32>,
    pub num_classes: usize,
    pub ipc: usize,
    /// Hashes of the inputs that produced the set.
    pub provenance: KeyValues,
}

impl DistilledSet {
    pub fn validate(&self) -> Result<()> {
        let n = self.hard_labels.len();
        if self.images.shape().len() != 4 || self.images.shape()[0] != n {
            return Err(shape(format!(
                "{n} labels for images {:?}",
                self.images.shape()
            )));
        }
        if self.soft_labels.len() != n * self.num_classes {
            return Err(shape(format!(
                "{} soft-label values for {n} images",
                self.soft_labels.len()
            )));
        }
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.hard_labels {
            *counts.get_mut(y).ok_or(Error::LabelOutOfRange {
                label: y,
                classes: self.num_classes,
            })? += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k != self.ipc) {
            return Err(invalid(format!(
                "class {c} has {} images, ipc is {}",
                counts[c], self.ipc
            )));
        }
        for (i, row) in self.soft_labels.chunks(self.num_classes.max(1)).enumerate() {
            let sum: f32 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p))
                || (sum - 1.0).abs() > SOFT_SUM_TOLERANCE
            {
                return Err(invalid(format!(
                    "soft label {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.hard_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_labels.is_empty()
    }

    /// Argmax of each soft label (lowest index on ties).
    pub fn soft_argmax(&self) -> Vec<usize> {
        self.soft_labels
            .chunks(self.num_classes)
            .map(argmax)
            .collect()
    }

    /// Fraction of images whose soft-label argmax equals the hard label.
    pub fn label_agreement(&self) -> f64 {
        let agree = self
            .soft_argmax()
            .iter()
            .zip(&self.hard_labels)
            .filter(|(a, b)| a == b)
            .count();
        agree as f64 / self.len().max(1) as f64
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let s = self.images.shape();
        let mut w = Writer::new();
        w.bytes(IMAGES_MAGIC);
        for &d in s {
            w.len_u32(d);
        }
        w.f32s(self.images.data());
        codec::write_file(&dir.join(IMAGES_FILE), &w.finish())?;

        let mut w = Writer::new();
        w.bytes(HARD_MAGIC)
            .len_u32(self.len())
            .len_u32(self.num_classes)
            .len_u32(self.ipc);
        for &y in &self.hard_labels {
            w.len_u32(y);
        }
        codec::write_file(&dir.join(HARD_LABELS_FILE), &w.finish())?;

        let mut w = Writer::new();
        w.bytes(SOFT_MAGIC)
            .len_u32(self.len())
            .len_u32(self.num_classes)
            .f32s(&self.soft_labels);
        codec::write_file(&dir.join(SOFT_LABELS_FILE), &w.finish())?;

        codec::write_file(
            &dir.join(PROVENANCE_FILE),
            self.provenance.to_text().as_bytes(),
        )?;

        let mut csv = String::from("index,hard_label,soft_argmax,soft_confidence\n");
        for (i, (row, &y)) in self
            .soft_labels
            .chunks(self.num_classes)
            .zip(&self.hard_labels)
            .enumerate()
        {
            let a = argmax(row);
            csv.push_str(&format!("{i},{y},{a},{}\n", row[a]));
        }
        codec::write_file(&dir.join(LABELS_CSV), csv.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bytes = codec::read_file(&dir.join(IMAGES_FILE))?;
        let mut r = Reader::new(&bytes, IMAGES_FILE);
        r.magic(IMAGES_MAGIC)?;
        let s = [r.usize()?, r.usize()?, r.usize()?, r.usize()?];
        let images = Tensor::new(s.to_vec(), r.f32s(s.iter().product())?)?;
        r.expect_end()?;

        let bytes = codec::read_file(&dir.join(HARD_LABELS_FILE))?;
        let mut r = Reader::new(&bytes, HARD_LABELS_FILE);
        r.magic(HARD_MAGIC)?;
        let (n, num_classes, ipc) = (r.usize()?, r.usize()?, r.usize()?);
        let hard_labels = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        r.expect_end()?;

        let bytes = codec::read_file(&dir.join(SOFT_LABELS_FILE))?;
        let mut r = Reader::new(&bytes, SOFT_LABELS_FILE);
        r.magic(SOFT_MAGIC)?;
        if r.usize()? != n || r.usize()? != num_classes {
            return Err(shape("soft labels disagree with hard labels in size"));
        }
        let soft_labels = r.f32s(n * num_classes)?;
        r.expect_end()?;

        let text = codec::read_file(&dir.join(PROVENANCE_FILE))?;
        let provenance = KeyValues::parse(&String::from_utf8_lossy(&text))?;
        let set = Self {
            images,
            hard_labels,
            soft_labels,
            num_classes,
            ipc,
            provenance,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Real-valued images with hard labels: the initialization and recovery
/// artifacts before relabeling.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(shape(format!(
                "{} labels for images {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(LABELED_MAGIC);
        for &d in self.images.shape() {
            w.len_u32(d);
        }
        for &y in &self.labels {
            w.len_u32(y);
        }
        w.f32s(self.images.data());
        let body = w.finish();
        let mut out = body.clone();
        out.extend_from_slice(&codec::sha256(&body));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let what = "labeled images";
        let split = bytes
            .len()
            .checked_sub(32)
            .ok_or_else(|| Error::Truncated(what.into()))?;
        let (body, digest) = bytes.split_at(split);
        let mut r = Reader::new(body, what);
        r.magic(LABELED_MAGIC)?;
        if codec::sha256(body) != digest {
            return Err(Error::Checksum(what.into()));
        }
        let s = [r.usize()?, r.usize()?, r.usize()?, r.usize()?];
        let labels = (0..s[0]).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let images = Tensor::new(s.to_vec(), r.f32s(s.iter().product())?)?;
        r.expect_end()?;
        Self::new(images, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher soft labels: softmax of the logits, in inference mode.
pub fn relabel(teacher: &Model, images: &Tensor, batch_size: usize) -> Result<Vec<f32>> {
    Ok(teacher.predict_proba(images, batch_size)?.into_data())
}
