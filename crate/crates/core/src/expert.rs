//! Debiased expert training: a symmetric mixture-consistency term on a
//! projection/prediction head pair plus a frequency-reweighted cross-entropy
//! whose reweighted share grows as `(t/T)²`.

use std::io::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::augment::flip_crop_batch;
use crate::codec::{self, Reader, Writer};
use crate::config::KeyValues;
use crate::data::LongTailDataset;
use crate::error::{invalid, shape, Error, Result};
use crate::model::{ConvNetSpec, Forward, Model};
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig};
use crate::tape::{Real, Tape, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped here before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

const EXPERT_MAGIC: &[u8; 8] = b"LTDDEXPT";
const EXPERT_VERSION: u32 = 1;

// ---- mixing ----

/// One mixed sample: `λ·x_a + (1−λ)·x_b` with target
/// `λ·onehot(y_a) + (1−λ)·onehot(y_b)`.
pub fn mix_views(
    x_a: &[f32],
    x_b: &[f32],
    y_a: usize,
    y_b: usize,
    num_classes: usize,
    lambda: f32,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if x_a.len() != x_b.len() {
        return Err(shape(format!(
            "mixing images of {} and {} pixels",
            x_a.len(),
            x_b.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("mix coefficient {lambda} outside [0, 1]")));
    }
    for y in [y_a, y_b] {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: num_classes,
            });
        }
    }
    let image = x_a
        .iter()
        .zip(x_b)
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    let mut target = vec![0.0; num_classes];
    target[y_a] += lambda;
    target[y_b] += 1.0 - lambda;
    Ok((image, target))
}

/// A batch of mixed samples with per-row targets (`n × C`) and coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub images: Tensor,
    pub targets: Vec<f32>,
    pub lambdas: Vec<f32>,
}

impl MixedBatch {
    /// Mixes each row of `images` with the row `partner[i]`.
    pub fn mix(
        images: &Tensor,
        labels: &[usize],
        partner: &[usize],
        lambdas: &[f32],
        num_classes: usize,
    ) -> Result<Self> {
        let n = images.shape()[0];
        if labels.len() != n || partner.len() != n || lambdas.len() != n {
            return Err(shape("mixup batch components disagree in length"));
        }
        let d = images.row_len();
        let mut data = Vec::with_capacity(images.numel());
        let mut targets = Vec::with_capacity(n * num_classes);
        for i in 0..n {
            let j = partner[i];
            let xi = &images.data()[i * d..(i + 1) * d];
            let xj = images
                .data()
                .get(j * d..(j + 1) * d)
                .ok_or_else(|| shape(format!("partner {j} of {n}")))?;
            let (img, t) = mix_views(xi, xj, labels[i], labels[j], num_classes, lambdas[i])?;
            data.extend(img);
            targets.extend(t);
        }
        Ok(Self {
            images: Tensor::new(images.shape().to_vec(), data)?,
            targets,
            lambdas: lambdas.to_vec(),
        })
    }

    /// Unmixed batch: `λ = 1`, one-hot targets.
    pub fn plain(images: &Tensor, labels: &[usize], num_classes: usize) -> Result<Self> {
        let identity: Vec<usize> = (0..labels.len()).collect();
        Self::mix(
            images,
            labels,
            &identity,
            &vec![1.0; labels.len()],
            num_classes,
        )
    }
}

// ---- losses ----

/// Class sample frequencies `r` with sharpness `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFrequency {
    r: Vec<f64>,
    q: f64,
}

impl ClassFrequency {
    pub fn new(r: Vec<f64>, q: f64) -> Result<Self> {
        if r.is_empty() || r.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(invalid("class frequencies must be positive and finite"));
        }
        if !(q >= 0.0 && q.is_finite()) {
            return Err(invalid(format!("sharpness q = {q}")));
        }
        Ok(Self { r, q })
    }

    /// `r_k = count_k / N`.
    pub fn from_counts(counts: &[usize], q: f64) -> Result<Self> {
        let n: usize = counts.iter().sum();
        Self::new(
            counts.iter().map(|&c| c as f64 / n.max(1) as f64).collect(),
            q,
        )
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn num_classes(&self) -> usize {
        self.r.len()
    }

    /// `r_k^{−q} / Σ_j r_j^{−q}`.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let w: Vec<f64> = self.r.iter().map(|&r| r.powf(-self.q)).collect();
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }
}

/// `α(t) = (t/T)²`.
pub fn alpha(t: usize, total: usize) -> Result<f64> {
    if total == 0 || t > total {
        return Err(invalid(format!("schedule step {t} of {total}")));
    }
    Ok((t as f64 / total as f64).powi(2))
}

/// Per-class multiplier of `−y_k log p_k`: `α·w̄_k + (1−α)`.
fn debias_coefficients(freq: &ClassFrequency, t: usize, total: usize) -> Result<Vec<f64>> {
    let a = alpha(t, total)?;
    Ok(freq
        .normalized_weights()
        .into_iter()
        .map(|w| a * w + (1.0 - a))
        .collect())
}

fn check_rows(len: usize, targets: usize, classes: usize) -> Result<usize> {
    if classes == 0 || len % classes != 0 || targets != len {
        return Err(shape(format!(
            "{len} probabilities, {targets} targets for {classes} classes"
        )));
    }
    Ok(len / classes)
}

/// Batch-averaged rebalanced cross-entropy on row-major `n × C` probabilities
/// and mixed targets.
pub fn debias_loss(
    probs: &[f64],
    targets: &[f64],
    freq: &ClassFrequency,
    t: usize,
    total: usize,
) -> Result<f64> {
    let c = freq.num_classes();
    let n = check_rows(probs.len(), targets.len(), c)?;
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    let coef = debias_coefficients(freq, t, total)?;
    let mut sum = 0.0;
    for (k, (&p, &y)) in probs.iter().zip(targets).enumerate() {
        sum += coef[k % c] * -y * p.max(LOG_FLOOR).ln();
    }
    Ok(sum / n as f64)
}

/// Tape form of [`debias_loss`], taking logits.
pub fn debias_loss_tape<R: Real>(
    tape: &mut Tape<R>,
    logits: Var,
    targets: &[f64],
    freq: &ClassFrequency,
    t: usize,
    total: usize,
) -> Result<Var> {
    let c = freq.num_classes();
    let n = check_rows(tape.value(logits).len(), targets.len(), c)?;
    if tape.shape(logits) != [n, c] {
        return Err(shape(format!(
            "logits {:?} for {c} classes",
            tape.shape(logits)
        )));
    }
    let coef = debias_coefficients(freq, t, total)?;
    let logp = tape.log_softmax(logits)?;
    let logp = tape.clamp_min(logp, LOG_FLOOR.ln());
    let weights = targets
        .iter()
        .enumerate()
        .map(|(k, &y)| R::of(-coef[k % c] * y / n as f64))
        .collect();
    let weighted = tape.mul_const(logp, weights)?;
    Ok(tape.sum(weighted))
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("cosine of a zero-norm vector"));
    }
    Ok(dot / (na * nb))
}

/// `−Σ_i cos(z_i, p_ī)`, each cosine averaged over the rows of `n × dim`
/// inputs.
pub fn robust_loss(z1: &[f64], z2: &[f64], p1: &[f64], p2: &[f64], dim: usize) -> Result<f64> {
    let len = z1.len();
    if dim == 0
        || len == 0
        || len % dim != 0
        || [z2.len(), p1.len(), p2.len()].iter().any(|&l| l != len)
    {
        return Err(shape("robust loss inputs must share an n × dim shape"));
    }
    let n = len / dim;
    let mut total = 0.0;
    for (z, p) in [(z1, p2), (z2, p1)] {
        let mut s = 0.0;
        for i in 0..n {
            s += cosine(&z[i * dim..(i + 1) * dim], &p[i * dim..(i + 1) * dim])?;
        }
        total -= s / n as f64;
    }
    Ok(total)
}

/// Tape form of [`robust_loss`]; `p1`, `p2` enter through a stop-gradient.
pub fn robust_loss_tape<R: Real>(
    tape: &mut Tape<R>,
    z1: Var,
    z2: Var,
    p1: Var,
    p2: Var,
) -> Result<Var> {
    let (sp1, sp2) = (tape.detach(p1), tape.detach(p2));
    let c1 = tape.row_cosine(z1, sp2)?;
    let c2 = tape.row_cosine(z2, sp1)?;
    let (m1, m2) = (tape.mean(c1), tape.mean(c2));
    let s = tape.add(m1, m2)?;
    Ok(tape.scale(s, -1.0))
}

// ---- heads ----

/// Projection (one linear map) and prediction (linear, ReLU, linear) heads
/// on the flattened encoder output; both emit `dim` values.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStack {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub pred_w1: Tensor,
    pub pred_b1: Tensor,
    pub pred_w2: Tensor,
    pub pred_b2: Tensor,
}

/// Leaves of one head evaluation.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub z: Var,
    pub p: Var,
    pub params: Vec<Var>,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
    .expect("shape")
}

impl HeadStack {
    pub fn build(in_dim: usize, dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || dim == 0 {
            return Err(invalid("head dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            proj_w: uniform(&[dim, in_dim], in_dim, &mut rng),
            proj_b: Tensor::zeros(&[dim]),
            pred_w1: uniform(&[dim, dim], dim, &mut rng),
            pred_b1: Tensor::zeros(&[dim]),
            pred_w2: uniform(&[dim, dim], dim, &mut rng),
            pred_b2: Tensor::zeros(&[dim]),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.proj_w.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.proj_w.shape()[0]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.proj_w,
            &self.proj_b,
            &self.pred_w1,
            &self.pred_b1,
            &self.pred_w2,
            &self.pred_b2,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.pred_w1,
            &mut self.pred_b1,
            &mut self.pred_w2,
            &mut self.pred_b2,
        ]
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, features: Var) -> Result<HeadOutput> {
        let params: Vec<Var> = self.params().into_iter().map(|t| tape.param(t)).collect();
        let z = tape.linear(features, params[0], params[1])?;
        let h = tape.linear(z, params[2], params[3])?;
        let h = tape.relu(h);
        let p = tape.linear(h, params[4], params[5])?;
        Ok(HeadOutput { z, p, params })
    }
}

// ---- configuration ----

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub cosine_schedule: bool,
    pub gamma1: f64,
    pub gamma2: f64,
    pub q: f64,
    /// Beta(a, a) mixup parameter; `None` disables mixing (`λ = 1`).
    pub mixup_alpha: Option<f64>,
    pub crop_pad: usize,
    pub seed: u64,
}

impl Default for ExpertTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 32,
            optimizer: OptimizerConfig::Sgd {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            cosine_schedule: true,
            gamma1: 0.5,
            gamma2: 1.0,
            q: 0.5,
            mixup_alpha: Some(1.0),
            crop_pad: 2,
            seed: 0,
        }
    }
}

impl ExpertTrainConfig {
    /// Same recipe reduced to plain cross-entropy: no consistency term,
    /// uniform class weights, no mixing.
    pub fn plain_cross_entropy(mut self) -> Self {
        self.gamma1 = 0.0;
        self.q = 0.0;
        self.mixup_alpha = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "expert iterations and batch size must be at least 1".into(),
            ));
        }
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0) || !(self.q >= 0.0) {
            return Err(Error::Config(
                "expert loss weights and q must be non-negative".into(),
            ));
        }
        if let Some(a) = self.mixup_alpha {
            if !(a > 0.0) {
                return Err(Error::Config(format!("mixup alpha {a}")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("iterations", self.iterations)
            .set("batch_size", self.batch_size)
            .set("cosine_schedule", self.cosine_schedule)
            .set("gamma1", self.gamma1)
            .set("gamma2", self.gamma2)
            .set("q", self.q)
            .set(
                "mixup_alpha",
                self.mixup_alpha
                    .map_or("none".to_string(), |a| a.to_string()),
            )
            .set("crop_pad", self.crop_pad)
            .set("seed", self.seed);
        kv.insert_section("optimizer", &self.optimizer.to_kv());
        kv
    }

    /// Reads the keys of [`ExpertTrainConfig::to_kv`]; absent keys keep defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        kv.reject_unknown(&[
            "iterations",
            "batch_size",
            "optimizer.",
            "cosine_schedule",
            "gamma1",
            "gamma2",
            "q",
            "mixup_alpha",
            "crop_pad",
            "seed",
        ])?;
        let mixup_alpha = match kv.raw("mixup_alpha") {
            None => d.mixup_alpha,
            Some("none") => None,
            Some(_) => Some(kv.require("mixup_alpha")?),
        };
        let optimizer = match kv.section("optimizer") {
            s if s.keys().next().is_none() => d.optimizer,
            s => OptimizerConfig::from_kv(&s)?,
        };
        let cfg = Self {
            iterations: kv.get_or("iterations", d.iterations)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            optimizer,
            cosine_schedule: kv.get_or("cosine_schedule", d.cosine_schedule)?,
            gamma1: kv.get_or("gamma1", d.gamma1)?,
            gamma2: kv.get_or("gamma2", d.gamma2)?,
            q: kv.get_or("q", d.q)?,
            mixup_alpha,
            crop_pad: kv.get_or("crop_pad", d.crop_pad)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---- checkpoint ----

/// Trained expert: network, heads, and the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertCheckpoint {
    pub model: Model,
    pub heads: HeadStack,
    pub config: ExpertTrainConfig,
}

impl ExpertCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let model = self.model.to_bytes();
        let config = self.config.to_kv().to_text();
        let mut w = Writer::new();
        w.bytes(EXPERT_MAGIC)
            .u32(EXPERT_VERSION)
            .len_u32(model.len())
            .bytes(&model);
        w.len_u32(self.heads.in_dim()).len_u32(self.heads.dim());
        for p in self.heads.params() {
            w.f32s(p.data());
        }
        w.len_u32(config.len()).bytes(config.as_bytes());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let what = "expert checkpoint";
        let mut r = Reader::new(bytes, what);
        r.magic(EXPERT_MAGIC)?;
        let version = r.u32()?;
        if version != EXPERT_VERSION {
            return Err(invalid(format!(
                "unsupported expert checkpoint version {version}"
            )));
        }
        let len = r.usize()?;
        let model = Model::from_bytes(r.take(len)?)?;
        let (in_dim, dim) = (r.usize()?, r.usize()?);
        let mut heads = HeadStack::build(in_dim, dim, 0)?;
        for p in heads.params_mut() {
            let v = r.f32s(p.numel())?;
            p.data_mut().copy_from_slice(&v);
        }
        let len = r.usize()?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Config(format!("{what}: config is not UTF-8")))?;
        let config = ExpertTrainConfig::from_kv(&KeyValues::parse(text)?)?;
        r.expect_end()?;
        Ok(Self {
            model,
            heads,
            config,
        })
    }

    /// SHA-256 of the full checkpoint bytes.
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

// ---- training ----

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub robust: f64,
    pub debias: f64,
    pub total: f64,
    pub alpha: f64,
}

pub fn write_train_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut out = String::from("iteration,L_robust,L_debias,total,alpha\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iteration, r.robust, r.debias, r.total, r.alpha
        ));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Path {
            path: dir.into(),
            source,
        })?;
    }
    let mut f = std::fs::File::create(path).map_err(|source| Error::Path {
        path: path.into(),
        source,
    })?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Loss terms of one expert step.
#[derive(Debug, Clone)]
pub struct ExpertLoss {
    pub total: Var,
    pub robust: Option<Var>,
    pub debias: Var,
    pub heads: Option<HeadOutput>,
}

/// Combined objective `γ1·L_robust + γ2·L_debias` for a train-mode forward
/// whose batch stacks view 1 over view 2 (equal halves). The heads are
/// evaluated only when `γ1 > 0`; `robust` is `None` when no row pair has a
/// defined cosine.
#[allow(clippy::too_many_arguments)]
pub fn expert_loss<R: Real>(
    tape: &mut Tape<R>,
    out: &Forward,
    heads: &HeadStack,
    targets: &[f64],
    freq: &ClassFrequency,
    t: usize,
    total: usize,
    gamma1: f64,
    gamma2: f64,
) -> Result<ExpertLoss> {
    let debias = debias_loss_tape(tape, out.logits, targets, freq, t, total)?;
    let weighted_debias = tape.scale(debias, gamma2);
    if gamma1 == 0.0 {
        return Ok(ExpertLoss {
            total: weighted_debias,
            robust: None,
            debias,
            heads: None,
        });
    }
    let rows = tape.shape(out.features)[0];
    if rows % 2 != 0 {
        return Err(shape(format!("{rows} rows cannot split into two views")));
    }
    let n = rows / 2;
    let h = heads.forward(tape, out.features)?;
    // Rows where any of the four vectors is zero have no defined cosine and
    // are left out of the consistency term.
    let d = heads.dim();
    let nonzero = |v: &[R], i: usize| v[i * d..(i + 1) * d].iter().any(|&x| x != R::zero());
    let keep: Vec<usize> = (0..n)
        .filter(|&i| {
            let (z, p) = (tape.value(h.z), tape.value(h.p));
            nonzero(z, i) && nonzero(z, n + i) && nonzero(p, i) && nonzero(p, n + i)
        })
        .collect();
    if keep.is_empty() {
        return Ok(ExpertLoss {
            total: weighted_debias,
            robust: None,
            debias,
            heads: Some(h),
        });
    }
    let second: Vec<usize> = keep.iter().map(|&i| n + i).collect();
    let (z1, z2) = (
        tape.select_rows(h.z, &keep)?,
        tape.select_rows(h.z, &second)?,
    );
    let (p1, p2) = (
        tape.select_rows(h.p, &keep)?,
        tape.select_rows(h.p, &second)?,
    );
    let robust = robust_loss_tape(tape, z1, z2, p1, p2)?;
    let weighted_robust = tape.scale(robust, gamma1);
    let sum = tape.add(weighted_robust, weighted_debias)?;
    Ok(ExpertLoss {
        total: sum,
        robust: Some(robust),
        debias,
        heads: Some(h),
    })
}

/// Two independently augmented and mixed views of the anchor batch, stacked.
fn two_views(
    dataset: &LongTailDataset,
    idx: &[usize],
    cfg: &ExpertTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<f64>)> {
    let anchor = dataset.batch(idx);
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.label(i)).collect();
    let c = dataset.num_classes();
    let n = idx.len();
    let mut data = Vec::with_capacity(2 * anchor.numel());
    let mut targets = Vec::with_capacity(2 * n * c);
    for _ in 0..2 {
        let view = flip_crop_batch(&anchor, cfg.crop_pad, rng)?;
        let mixed = match cfg.mixup_alpha {
            Some(a) => {
                let beta = Beta::new(a, a).map_err(|e| invalid(e.to_string()))?;
                let mut partner: Vec<usize> = (0..n).collect();
                partner.shuffle(rng);
                let lambdas: Vec<f32> = (0..n).map(|_| beta.sample(rng) as f32).collect();
                MixedBatch::mix(&view, &labels, &partner, &lambdas, c)?
            }
            None => MixedBatch::plain(&view, &labels, c)?,
        };
        data.extend_from_slice(mixed.images.data());
        targets.extend(mixed.targets.iter().map(|&v| v as f64));
    }
    let mut s = anchor.shape().to_vec();
    s[0] = 2 * n;
    Ok((Tensor::new(s, data)?, targets))
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::Diverged { .. } => e,
        other => Error::Diverged {
            iteration,
            detail: other.to_string(),
        },
    }
}

/// Trains an expert with the combined objective. Returns the checkpoint and
/// one log row per iteration (`t` runs `1..=T`, so `α` reaches 1).
pub fn train_expert(
    dataset: &LongTailDataset,
    spec: ConvNetSpec,
    cfg: &ExpertTrainConfig,
) -> Result<(ExpertCheckpoint, Vec<TrainLogRow>)> {
    cfg.validate()?;
    spec.validate()?;
    if dataset.is_empty() {
        return Err(invalid("expert training on an empty dataset"));
    }
    if dataset.image_shape() != spec.input_shape() || dataset.num_classes() != spec.num_classes {
        return Err(shape(format!(
            "dataset {:?} with {} classes vs architecture {spec}",
            dataset.image_shape(),
            dataset.num_classes()
        )));
    }
    let freq = ClassFrequency::from_counts(&dataset.class_counts(), cfg.q)?;
    let mut model = Model::build(spec, cfg.seed)?;
    let mut heads = HeadStack::build(
        spec.feature_len(),
        spec.base_width,
        cfg.seed.wrapping_add(0x9e37_79b9),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e4e7);
    let mut model_opt = Optimizer::new(cfg.optimizer);
    let mut head_opt = Optimizer::new(cfg.optimizer);
    let total = cfg.iterations;
    let bs = cfg.batch_size.min(dataset.len());
    let mut log = Vec::with_capacity(total);
    for t in 1..=total {
        let idx: Vec<usize> = index::sample(&mut rng, dataset.len(), bs).into_vec();
        let (x, targets) = two_views(dataset, &idx, cfg, &mut rng)?;
        let mut tape: Tape = Tape::new();
        let xv = tape.constant(&x);
        let out = model.forward_train(&mut tape, xv)?;
        let loss = expert_loss(
            &mut tape, &out, &heads, &targets, &freq, t, total, cfg.gamma1, cfg.gamma2,
        )
        .map_err(|e| diverged(t, e))?;
        let value = tape.scalar(loss.total) as f64;
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                detail: format!("loss {value}"),
            });
        }
        tape.backward(loss.total)?;
        if cfg.cosine_schedule {
            let lr = cosine_lr(cfg.optimizer.lr(), t - 1, total);
            model_opt.set_lr(lr);
            head_opt.set_lr(lr);
        }
        let grads = model.collect_grads(&tape, &out);
        model_opt
            .step(&mut model.params_mut(), &grads)
            .map_err(|e| diverged(t, e))?;
        if let Some(h) = &loss.heads {
            let hg: Vec<Vec<f32>> = h.params.iter().map(|&p| tape.grad_f32(p)).collect();
            head_opt
                .step(&mut heads.params_mut(), &hg)
                .map_err(|e| diverged(t, e))?;
        }
        log.push(TrainLogRow {
            iteration: t,
            robust: loss.robust.map_or(0.0, |r| tape.scalar(r) as f64),
            debias: tape.scalar(loss.debias) as f64,
            total: value,
            alpha: alpha(t, total)?,
        });
    }
    Ok((
        ExpertCheckpoint {
            model,
            heads,
            config: cfg.clone(),
        },
        log,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
        logits
            .chunks(c)
            .flat_map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(move |v| v / s)
            })
            .collect()
    }

    fn ce(p: &[f64], y: &[f64], c: usize) -> f64 {
        let n = p.len() / c;
        p.iter()
            .zip(y)
            .map(|(p, y)| -y * p.max(LOG_FLOOR).ln())
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn mix_endpoints_and_linearity() {
        let (a, b) = (vec![0.2, 0.4, 1.0], vec![0.0, 1.0, 0.5]);
        let (img, t) = mix_views(&a, &b, 0, 1, 2, 1.0).unwrap();
        assert_eq!((img, t), (a.clone(), vec![1.0, 0.0]));
        let (img, t) = mix_views(&a, &b, 0, 1, 2, 0.5).unwrap();
        assert_eq!(t, vec![0.5, 0.5]);
        let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
        assert!((mean(&img) - (0.5 * mean(&a) + 0.5 * mean(&b))).abs() < 1e-6);
        assert!(mix_views(&a, &b[..2], 0, 1, 2, 0.5).is_err());
        assert!(mix_views(&a, &b, 0, 1, 2, 1.5).is_err());
    }

    #[test]
    fn mixed_targets_sum_to_one() {
        let imgs = Tensor::new(vec![3, 1, 1, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let m = MixedBatch::mix(&imgs, &[0, 1, 2], &[2, 0, 1], &[0.3, 0.9, 0.0], 3).unwrap();
        for row in m.targets.chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        assert!(m.lambdas.iter().all(|l| (0.0..=1.0).contains(l)));
    }

    #[test]
    fn robust_loss_values() {
        let z1 = vec![1.0, 2.0, 0.5];
        let z2 = vec![-1.0, 0.3, 4.0];
        assert!((robust_loss(&z1, &z2, &z2, &z1, 3).unwrap() + 2.0).abs() < 1e-12);
        let o1 = vec![0.0, 0.0, 1.0];
        let o2 = vec![1.0, 0.0, 0.0];
        assert_eq!(robust_loss(&o2, &o2, &o1, &o1, 3).unwrap(), 0.0);
        assert!(robust_loss(&z1, &[0.0; 3], &z1, &z1, 3).is_err());
    }

    #[test]
    fn alpha_schedule() {
        assert_eq!(alpha(0, 10).unwrap(), 0.0);
        assert_eq!(alpha(10, 10).unwrap(), 1.0);
        assert!(alpha(11, 10).is_err());
        let vals: Vec<f64> = (0..=10).map(|t| alpha(t, 10).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn tail_classes_get_larger_weights() {
        let f = ClassFrequency::from_counts(&[100, 30, 5], 0.5).unwrap();
        let w = f.normalized_weights();
        assert!(w[2] > w[0]);
        assert!(ClassFrequency::new(vec![0.5, 0.0], 1.0).is_err());
    }

    #[test]
    fn debias_tape_matches_numeric() {
        let logits = vec![0.3, -1.2, 2.0, 0.0, 0.5, 0.1];
        let targets = vec![0.7, 0.3, 0.0, 0.0, 0.0, 1.0];
        let freq = ClassFrequency::from_counts(&[50, 10, 2], 0.7).unwrap();
        let numeric = debias_loss(&softmax_rows(&logits, 3), &targets, &freq, 3, 5).unwrap();
        let mut tape = Tape::<f64>::new();
        let l = tape.constant_vec(&[2, 3], logits).unwrap();
        let v = debias_loss_tape(&mut tape, l, &targets, &freq, 3, 5).unwrap();
        assert!((tape.scalar(v) - numeric).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn debias_rescale_invariant_and_reduces_to_ce(
            logits in prop::collection::vec(-3.0f64..3.0, 12),
            r in prop::collection::vec(0.01f64..1.0, 4),
            s in 0.01f64..100.0,
            q in 0.0f64..2.0,
            t in 0usize..=7,
        ) {
            let p = softmax_rows(&logits, 4);
            let y: Vec<f64> = (0..12).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
            let y: Vec<f64> = y.chunks(4).flat_map(|row| {
                let s: f64 = row.iter().sum();
                if s == 0.0 { vec![0.25; 4] } else { row.iter().map(|v| v / s).collect() }
            }).collect();
            let f = ClassFrequency::new(r.clone(), q).unwrap();
            let g = ClassFrequency::new(r.iter().map(|v| v * s).collect(), q).unwrap();
            let a = debias_loss(&p, &y, &f, t, 7).unwrap();
            let b = debias_loss(&p, &y, &g, t, 7).unwrap();
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            let plain = ce(&p, &y, 4);
            prop_assert!((debias_loss(&p, &y, &f, 0, 7).unwrap() - plain).abs() <= 1e-6);
            let uniform = ClassFrequency::new(vec![0.25; 4], q).unwrap();
            let al = alpha(t, 7).unwrap();
            let closed = al * plain / 4.0 + (1.0 - al) * plain;
            prop_assert!((debias_loss(&p, &y, &uniform, t, 7).unwrap() - closed).abs() <= 1e-5);
        }

        #[test]
        fn robust_loss_scale_invariant(
            v in prop::collection::vec(0.1f64..2.0, 16),
            k in 0.01f64..50.0,
        ) {
            let (z1, z2, p1, p2) = (&v[0..4], &v[4..8], &v[8..12], &v[12..16]);
            let base = robust_loss(z1, z2, p1, p2, 2).unwrap();
            let scaled: Vec<f64> = z1.iter().map(|x| x * k).collect();
            prop_assert!((robust_loss(&scaled, z2, p1, p2, 2).unwrap() - base).abs() < 1e-12);
            let scaled: Vec<f64> = p2.iter().map(|x| x * k).collect();
            prop_assert!((robust_loss(z1, z2, p1, &scaled, 2).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn robust_loss_blocks_prediction_head_gradient() {
        let heads = HeadStack::build(6, 4, 1).unwrap();
        let mut tape = Tape::<f64>::new();
        let f = tape
            .constant_vec(
                &[4, 6],
                (0..24)
                    .map(|i| ((i * 7 % 11) as f64) / 11.0 + 0.1)
                    .collect(),
            )
            .unwrap();
        let h = heads.forward(&mut tape, f).unwrap();
        let (z1, z2) = (
            tape.slice_rows(h.z, 0, 2).unwrap(),
            tape.slice_rows(h.z, 2, 2).unwrap(),
        );
        let (p1, p2) = (
            tape.slice_rows(h.p, 0, 2).unwrap(),
            tape.slice_rows(h.p, 2, 2).unwrap(),
        );
        let loss = robust_loss_tape(&mut tape, z1, z2, p1, p2).unwrap();
        tape.backward(loss).unwrap();
        for &p in &h.params[2..] {
            assert!(tape.grad(p).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        }
        assert!(tape.grad(h.params[0]).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn config_round_trips() {
        let cfg = ExpertTrainConfig {
            seed: 9,
            mixup_alpha: None,
            ..Default::default()
        };
        assert_eq!(ExpertTrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let adam = ExpertTrainConfig {
            optimizer: OptimizerConfig::adam(0.01),
            ..Default::default()
        };
        assert_eq!(ExpertTrainConfig::from_kv(&adam.to_kv()).unwrap(), adam);
    }
}
