//! Class-fair BN statistics.
//!
//! A frozen observer is run over the real data once; every BN input element
//! (one per sample and spatial position) updates a per-(layer, class, channel)
//! count/mean/M2 cell with the count-proportional momentum
//! `α = B / (N + B)`, so each element carries equal weight inside its class.
//! Global targets then average the class statistics uniformly, so they do not
//! depend on how many samples each class has.

use std::path::Path;

use crate::codec::{self, Reader, Writer};
use crate::data::LongTailDataset;
use crate::error::{invalid, shape, Error, Result};
use crate::expert::ExpertCheckpoint;
use crate::model::{Mode, Model};
use crate::tape::Tape;

const STATS_MAGIC: &[u8; 8] = b"LTDDSTAT";
const STATS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Cell {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Cell {
    /// Folds in a batch with `count` elements, mean `mean` and
    /// sum of squared deviations `m2`.
    fn absorb(&mut self, count: u64, mean: f64, m2: f64) {
        if count == 0 {
            return;
        }
        let total = self.count + count;
        let alpha = count as f64 / total as f64;
        let delta = mean - self.mean;
        self.mean = (1.0 - alpha) * self.mean + alpha * mean;
        self.m2 += m2 + delta * delta * self.count as f64 * count as f64 / total as f64;
        self.count = total;
    }

    fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }
}

/// Running count/mean/M2 per BN layer, class and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMomentsTable {
    channels: Vec<usize>,
    num_classes: usize,
    /// Per layer, indexed `class * channels + channel`.
    cells: Vec<Vec<Cell>>,
}

impl ClassMomentsTable {
    pub fn new(channels: &[usize], num_classes: usize) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) || num_classes == 0 {
            return Err(invalid("moments table geometry must be non-empty"));
        }
        let cells = channels
            .iter()
            .map(|&c| vec![Cell::default(); c * num_classes])
            .collect();
        Ok(Self {
            channels: channels.to_vec(),
            num_classes,
            cells,
        })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len()
    }

    fn cell(&self, layer: usize, class: usize, channel: usize) -> &Cell {
        &self.cells[layer][class * self.channels[layer] + channel]
    }

    pub fn count(&self, layer: usize, class: usize, channel: usize) -> u64 {
        self.cell(layer, class, channel).count
    }

    pub fn mean(&self, layer: usize, class: usize, channel: usize) -> f64 {
        self.cell(layer, class, channel).mean
    }

    pub fn m2(&self, layer: usize, class: usize, channel: usize) -> f64 {
        self.cell(layer, class, channel).m2
    }

    /// Population variance `M2 / count` (zero for an empty cell).
    pub fn variance(&self, layer: usize, class: usize, channel: usize) -> f64 {
        self.cell(layer, class, channel).variance()
    }

    /// Folds one NCHW activation batch of BN layer `layer` into the table.
    /// `labels[i]` is the class of row `i`.
    pub fn update(
        &mut self,
        layer: usize,
        activations: &[f32],
        dims: [usize; 4],
        labels: &[usize],
    ) -> Result<()> {
        let [n, c, h, w] = dims;
        if layer >= self.num_layers() {
            return Err(shape(format!("layer {layer} of {}", self.num_layers())));
        }
        if c != self.channels[layer] || activations.len() != n * c * h * w || labels.len() != n {
            return Err(shape(format!(
                "activations {dims:?} ({} values, {} labels) for layer {layer} with {} channels",
                activations.len(),
                labels.len(),
                self.channels[layer]
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: self.num_classes,
            });
        }
        let hw = h * w;
        for class in 0..self.num_classes {
            let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            if rows.is_empty() || hw == 0 {
                continue;
            }
            let count = (rows.len() * hw) as u64;
            for ch in 0..c {
                let elems = || {
                    rows.iter()
                        .flat_map(|&i| &activations[(i * c + ch) * hw..(i * c + ch + 1) * hw])
                };
                let mean = elems().map(|&v| v as f64).sum::<f64>() / count as f64;
                let m2 = elems().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
                self.cells[layer][class * c + ch].absorb(count, mean, m2);
            }
        }
        Ok(())
    }

    /// Count-weighted combination of two tables over the same geometry.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.channels != other.channels || self.num_classes != other.num_classes {
            return Err(shape("merging moments tables of different geometry"));
        }
        let mut out = self.clone();
        for (la, lb) in out.cells.iter_mut().zip(&other.cells) {
            for (a, b) in la.iter_mut().zip(lb) {
                if a.count == 0 {
                    *a = *b;
                } else {
                    a.absorb(b.count, b.mean, b.m2);
                }
            }
        }
        Ok(out)
    }

    /// Uniform class averages of the per-class means and variances. With
    /// `law_of_total_variance`, the spread of the class means around the
    /// global mean is added to the global variance.
    pub fn finalize_global(&self, law_of_total_variance: bool) -> Result<RealStatsBundle> {
        let k = self.num_classes as f64;
        let mut global_mean = Vec::new();
        let mut global_var = Vec::new();
        let mut class_mean = Vec::new();
        let mut class_var = Vec::new();
        for (l, &ch) in self.channels.iter().enumerate() {
            let (mut gm, mut gv) = (vec![0.0f64; ch], vec![0.0f64; ch]);
            let (mut cm, mut cv) = (
                Vec::with_capacity(ch * self.num_classes),
                Vec::with_capacity(ch * self.num_classes),
            );
            for class in 0..self.num_classes {
                for j in 0..ch {
                    let cell = self.cell(l, class, j);
                    if cell.count < 2 {
                        return Err(Error::InsufficientSamples(format!(
                            "layer {l} class {class} has {} BN elements, need at least 2",
                            cell.count
                        )));
                    }
                    gm[j] += cell.mean / k;
                    gv[j] += cell.variance() / k;
                    cm.push(cell.mean as f32);
                    cv.push(cell.variance() as f32);
                }
            }
            if law_of_total_variance {
                for class in 0..self.num_classes {
                    for j in 0..ch {
                        gv[j] += (self.cell(l, class, j).mean - gm[j]).powi(2) / k;
                    }
                }
            }
            global_mean.push(gm.iter().map(|&v| v as f32).collect());
            global_var.push(gv.iter().map(|&v| v as f32).collect());
            class_mean.push(cm);
            class_var.push(cv);
        }
        Ok(RealStatsBundle {
            kind: StatsKind::Fair,
            channels: self.channels.clone(),
            num_classes: self.num_classes,
            global_mean,
            global_var,
            class_mean,
            class_var,
            observer_hash: String::new(),
            dataset_hash: String::new(),
        })
    }
}

/// How a bundle was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsKind {
    /// Class-fair recalibration pass.
    Fair,
    /// The observer's stored BN running statistics, used for every class.
    Running,
}

/// Recovery targets: per-layer global and per-class BN means and variances.
#[derive(Debug, Clone, PartialEq)]
pub struct RealStatsBundle {
    pub kind: StatsKind,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub global_mean: Vec<Vec<f32>>,
    pub global_var: Vec<Vec<f32>>,
    /// Per layer, indexed `class * channels + channel`.
    pub class_mean: Vec<Vec<f32>>,
    pub class_var: Vec<Vec<f32>>,
    pub observer_hash: String,
    pub dataset_hash: String,
}

impl RealStatsBundle {
    pub fn num_layers(&self) -> usize {
        self.channels.len()
    }

    pub fn class_mean(&self, layer: usize, class: usize) -> &[f32] {
        let c = self.channels[layer];
        &self.class_mean[layer][class * c..(class + 1) * c]
    }

    pub fn class_var(&self, layer: usize, class: usize) -> &[f32] {
        let c = self.channels[layer];
        &self.class_var[layer][class * c..(class + 1) * c]
    }

    /// The observer's running statistics as targets; each class reuses the
    /// global values since no class information is available.
    pub fn from_running_stats(observer: &ExpertCheckpoint, dataset_hash: &str) -> Self {
        let model = &observer.model;
        let num_classes = model.spec().num_classes;
        let (mut gm, mut gv, mut cm, mut cv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for bn in model.bn_layers() {
            let (m, v) = (
                bn.running_mean.data().to_vec(),
                bn.running_var.data().to_vec(),
            );
            cm.push(m.repeat(num_classes));
            cv.push(v.repeat(num_classes));
            gm.push(m);
            gv.push(v);
        }
        Self {
            kind: StatsKind::Running,
            channels: model.bn_channels(),
            num_classes,
            global_mean: gm,
            global_var: gv,
            class_mean: cm,
            class_var: cv,
            observer_hash: observer.hash(),
            dataset_hash: dataset_hash.to_string(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(STATS_MAGIC).u32(STATS_VERSION);
        w.u32(match self.kind {
            StatsKind::Fair => 0,
            StatsKind::Running => 1,
        });
        w.len_u32(self.channels.len());
        for &c in &self.channels {
            w.len_u32(c);
        }
        w.len_u32(self.num_classes);
        for group in [
            &self.global_mean,
            &self.global_var,
            &self.class_mean,
            &self.class_var,
        ] {
            for layer in group {
                w.f32s(layer);
            }
        }
        for h in [&self.observer_hash, &self.dataset_hash] {
            w.len_u32(h.len()).bytes(h.as_bytes());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let what = "stats bundle";
        let mut r = Reader::new(bytes, what);
        r.magic(STATS_MAGIC)?;
        let version = r.u32()?;
        if version != STATS_VERSION {
            return Err(invalid(format!(
                "unsupported stats bundle version {version}"
            )));
        }
        let kind = match r.u32()? {
            0 => StatsKind::Fair,
            1 => StatsKind::Running,
            k => return Err(invalid(format!("unknown stats kind {k}"))),
        };
        let layers = r.usize()?;
        let channels = (0..layers).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let num_classes = r.usize()?;
        let mut read_group = |per_class: bool| -> Result<Vec<Vec<f32>>> {
            channels
                .iter()
                .map(|&c| r.f32s(if per_class { c * num_classes } else { c }))
                .collect()
        };
        let global_mean = read_group(false)?;
        let global_var = read_group(false)?;
        let class_mean = read_group(true)?;
        let class_var = read_group(true)?;
        let mut text = || -> Result<String> {
            let n = r.usize()?;
            String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| invalid(format!("{what}: hash is not UTF-8")))
        };
        let observer_hash = text()?;
        let dataset_hash = text()?;
        r.expect_end()?;
        Ok(Self {
            kind,
            channels,
            num_classes,
            global_mean,
            global_var,
            class_mean,
            class_var,
            observer_hash,
            dataset_hash,
        })
    }

    pub fn hash(&self) -> String {
        codec::sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecalibOptions {
    pub batch_size: usize,
    /// Contiguous batch groups accumulated into separate tables and merged
    /// in shard order; results agree with a single shard within 1e-5.
    pub shards: usize,
    pub law_of_total_variance: bool,
}

impl Default for RecalibOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            shards: 1,
            law_of_total_variance: false,
        }
    }
}

/// Frozen-capture pass over `indices` of `dataset` in batches, accumulating
/// BN input moments per class.
pub fn accumulate(
    model: &Model,
    dataset: &LongTailDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<ClassMomentsTable> {
    let mut table = ClassMomentsTable::new(&model.bn_channels(), model.spec().num_classes)?;
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&dataset.batch(chunk));
        let out = model.forward(&mut tape, x, Mode::FrozenCapture)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.label(i)).collect();
        for (l, &v) in out.bn_inputs.iter().enumerate() {
            let s = tape.shape(v);
            table.update(l, tape.value(v), [s[0], s[1], s[2], s[3]], &labels)?;
        }
    }
    Ok(table)
}

fn check_compatible(model: &Model, dataset: &LongTailDataset) -> Result<()> {
    let spec = model.spec();
    if dataset.image_shape() != spec.input_shape() || dataset.num_classes() != spec.num_classes {
        return Err(shape(format!(
            "dataset {:?} with {} classes vs observer {spec}",
            dataset.image_shape(),
            dataset.num_classes()
        )));
    }
    Ok(())
}

/// One frozen pass of the observer over every sample, then class-uniform
/// aggregation. The observer is only read.
pub fn recalibrate(
    observer: &ExpertCheckpoint,
    dataset: &LongTailDataset,
    opts: RecalibOptions,
) -> Result<RealStatsBundle> {
    if opts.batch_size == 0 || opts.shards == 0 {
        return Err(invalid("batch size and shard count must be at least 1"));
    }
    let model = &observer.model;
    check_compatible(model, dataset)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let batches: Vec<&[usize]> = all.chunks(opts.batch_size).collect();
    let per_shard = batches.len().div_ceil(opts.shards).max(1);
    let tables = std::thread::scope(|s| {
        let handles: Vec<_> = batches
            .chunks(per_shard)
            .map(|group| {
                let idx: Vec<usize> = group.concat();
                s.spawn(move || accumulate(model, dataset, &idx, opts.batch_size))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("recalibration worker panicked"))
            .collect::<Vec<_>>()
    });
    let mut table = ClassMomentsTable::new(&model.bn_channels(), model.spec().num_classes)?;
    for t in tables {
        table = table.merge(&t?)?;
    }
    let mut bundle = table.finalize_global(opts.law_of_total_variance)?;
    bundle.observer_hash = observer.hash();
    bundle.dataset_hash = dataset.hash();
    Ok(bundle)
}

/// Per-class fixed-momentum moving averages, initialized like BN running
/// statistics (mean 0, variance 1), over the data in `order`. Returns per
/// layer `(class means, class variances)`, indexed `class * channels + channel`.
/// This is the estimator the fair pass replaces; it weights late batches
/// more than early ones.
pub fn ema_reference(
    model: &Model,
    dataset: &LongTailDataset,
    order: &[usize],
    batch_size: usize,
    momentum: f64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    check_compatible(model, dataset)?;
    let k = model.spec().num_classes;
    let mut stats: Vec<(Vec<f64>, Vec<f64>)> = model
        .bn_channels()
        .iter()
        .map(|&c| (vec![0.0; c * k], vec![1.0; c * k]))
        .collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&dataset.batch(chunk));
        let out = model.forward(&mut tape, x, Mode::FrozenCapture)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.label(i)).collect();
        for (l, &v) in out.bn_inputs.iter().enumerate() {
            let s = tape.shape(v).to_vec();
            let mut batch = ClassMomentsTable::new(&[s[1]], k)?;
            batch.update(0, tape.value(v), [s[0], s[1], s[2], s[3]], &labels)?;
            for class in 0..k {
                for ch in 0..s[1] {
                    if batch.count(0, class, ch) == 0 {
                        continue;
                    }
                    let j = class * s[1] + ch;
                    stats[l].0[j] =
                        (1.0 - momentum) * stats[l].0[j] + momentum * batch.mean(0, class, ch);
                    stats[l].1[j] =
                        (1.0 - momentum) * stats[l].1[j] + momentum * batch.variance(0, class, ch);
                }
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_from(values: &[(usize, f32)]) -> ClassMomentsTable {
        // One channel, 1x1 spatial: each value is one element.
        let mut t = ClassMomentsTable::new(&[1], 2).unwrap();
        let acts: Vec<f32> = values.iter().map(|v| v.1).collect();
        let labels: Vec<usize> = values.iter().map(|v| v.0).collect();
        t.update(0, &acts, [values.len(), 1, 1, 1], &labels)
            .unwrap();
        t
    }

    #[test]
    fn first_batch_sets_mean_and_equal_batches_average() {
        let mut t = table_from(&[(0, 1.0), (0, 3.0)]);
        assert_eq!(t.mean(0, 0, 0), 2.0);
        assert_eq!(t.count(0, 0, 0), 2);
        assert_eq!(t.count(0, 1, 0), 0);
        t.update(0, &[10.0, 20.0], [2, 1, 1, 1], &[0, 0]).unwrap();
        assert_eq!(t.mean(0, 0, 0), (2.0 + 15.0) / 2.0);
        // Population variance of {1, 3, 10, 20}.
        let m = 8.5;
        let v = [1.0f64, 3.0, 10.0, 20.0]
            .iter()
            .map(|x| (x - m) * (x - m))
            .sum::<f64>()
            / 4.0;
        assert!((t.variance(0, 0, 0) - v).abs() < 1e-12);
    }

    #[test]
    fn empty_cells_and_label_errors() {
        let t = ClassMomentsTable::new(&[2], 3).unwrap();
        assert_eq!((t.mean(0, 2, 1), t.m2(0, 2, 1)), (0.0, 0.0));
        let mut t = t;
        assert!(matches!(
            t.update(0, &[0.0; 2], [1, 2, 1, 1], &[3]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
        assert!(t.update(0, &[0.0; 3], [1, 3, 1, 1], &[0]).is_err());
    }

    #[test]
    fn merge_identity_commutativity_geometry() {
        let a = table_from(&[(0, 1.0), (1, 5.0), (0, 2.0)]);
        let b = table_from(&[(1, -1.0), (1, 2.5)]);
        let empty = ClassMomentsTable::new(&[1], 2).unwrap();
        assert_eq!(a.merge(&empty).unwrap(), a);
        assert_eq!(empty.merge(&a).unwrap(), a);
        let (ab, ba) = (a.merge(&b).unwrap(), b.merge(&a).unwrap());
        for c in 0..2 {
            assert!((ab.mean(0, c, 0) - ba.mean(0, c, 0)).abs() < 1e-12);
            assert!((ab.m2(0, c, 0) - ba.m2(0, c, 0)).abs() < 1e-12);
        }
        assert!(a.merge(&ClassMomentsTable::new(&[2], 2).unwrap()).is_err());
    }

    #[test]
    fn global_is_uniform_class_average() {
        let t = table_from(&[
            (0, -1.0),
            (0, 1.0),
            (1, 1.0),
            (1, 3.0),
            (1, 1.0),
            (1, 3.0),
            (1, 2.0),
        ]);
        let b = t.finalize_global(false).unwrap();
        assert!(
            (b.global_mean[0][0] - 1.0).abs() < 1e-6,
            "class sizes do not matter"
        );
        let b2 = t.finalize_global(true).unwrap();
        assert!(b2.global_var[0][0] > b.global_var[0][0]);
        assert!(matches!(
            table_from(&[(0, 1.0), (0, 2.0), (1, 3.0)]).finalize_global(false),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn bundle_round_trip() {
        let t = table_from(&[(0, -1.0), (0, 1.0), (1, 1.0), (1, 3.0)]);
        let mut b = t.finalize_global(false).unwrap();
        b.observer_hash = "ab".into();
        b.dataset_hash = "cd".into();
        assert_eq!(RealStatsBundle::from_bytes(&b.to_bytes()).unwrap(), b);
        let bytes = b.to_bytes();
        assert!(matches!(
            RealStatsBundle::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated(_))
        ));
    }
}
