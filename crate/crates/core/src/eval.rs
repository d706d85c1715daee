//! Student training on a distilled set and balanced evaluation.
//!
//! The student objective is `κ1·CE(softmax(s(x)), y) + κ2·‖ỹ − s(x)‖²`,
//! batch-averaged, where `s(x)` is the student's softmax output (or its raw
//! logits under [`MatchSpace::Logit`]).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::flip_crop_batch;
use crate::config::KeyValues;
use crate::data::LongTailDataset;
use crate::distill::DistilledSet;
use crate::error::{invalid, shape, Error, Result};
use crate::expert::LOG_FLOOR;
use crate::model::{ConvNetSpec, Model};
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig};
use crate::tape::{softmax_in_place, Real, Tape, Var};
use crate::tensor::Tensor;

/// Space in which the soft-label term compares student output and `ỹ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchSpace {
    Probability,
    Logit,
}

fn check_kappas(k1: f64, k2: f64) -> Result<()> {
    if !(k1 >= 0.0 && k2 >= 0.0) {
        return Err(invalid(format!(
            "loss weights κ1 = {k1}, κ2 = {k2} must be non-negative"
        )));
    }
    if k1 == 0.0 && k2 == 0.0 {
        return Err(invalid("κ1 = κ2 = 0 leaves no objective"));
    }
    Ok(())
}

fn check_sizes(logits: usize, hard: usize, soft: usize, classes: usize) -> Result<usize> {
    if classes == 0 || logits != hard * classes || soft != logits {
        return Err(shape(format!(
            "{logits} logits, {hard} labels, {soft} soft values for {classes} classes"
        )));
    }
    if hard == 0 {
        return Err(invalid("empty batch"));
    }
    Ok(hard)
}

/// Reference evaluation of the student objective on row-major logits.
pub fn match_loss(
    logits: &[f64],
    hard: &[usize],
    soft: &[f64],
    num_classes: usize,
    k1: f64,
    k2: f64,
    space: MatchSpace,
) -> Result<f64> {
    check_kappas(k1, k2)?;
    let n = check_sizes(logits.len(), hard.len(), soft.len(), num_classes)?;
    let mut total = 0.0;
    for i in 0..n {
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let probs: Vec<f64> = row.iter().map(|v| (v - m).exp() / z).collect();
        let y = *hard
            .get(i)
            .filter(|&&y| y < num_classes)
            .ok_or(Error::LabelOutOfRange {
                label: hard[i],
                classes: num_classes,
            })?;
        let out = match space {
            MatchSpace::Probability => &probs,
            MatchSpace::Logit => &row.to_vec(),
        };
        let l2: f64 = out
            .iter()
            .zip(&soft[i * num_classes..])
            .map(|(s, t)| (t - s).powi(2))
            .sum();
        total += k1 * -probs[y].max(LOG_FLOOR).ln() + k2 * l2;
    }
    Ok(total / n as f64)
}

/// Tape form of [`match_loss`].
pub fn match_loss_tape<R: Real>(
    tape: &mut Tape<R>,
    logits: Var,
    hard: &[usize],
    soft: &[f32],
    k1: f64,
    k2: f64,
    space: MatchSpace,
) -> Result<Var> {
    check_kappas(k1, k2)?;
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 {
        return Err(shape(format!("logits {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    check_sizes(n * c, hard.len(), soft.len(), c)?;
    let logp = tape.log_softmax(logits)?;
    let logp = tape.clamp_min(logp, LOG_FLOOR.ln());
    let mut pick = vec![R::zero(); n * c];
    for (i, &y) in hard.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: c,
            });
        }
        pick[i * c + y] = R::of(-k1 / n as f64);
    }
    let ce = tape.mul_const(logp, pick)?;
    let ce = tape.sum(ce);
    if k2 == 0.0 {
        return Ok(ce);
    }
    let out = match space {
        MatchSpace::Probability => tape.softmax(logits)?,
        MatchSpace::Logit => logits,
    };
    let target = tape.constant_vec(&[n, c], soft.iter().map(|&v| R::of(v as f64)).collect())?;
    let diff = tape.sub(out, target)?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.sum(sq);
    let l2 = tape.scale(sq, k2 / n as f64);
    tape.add(ce, l2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub cosine_schedule: bool,
    pub kappa1: f64,
    pub kappa2: f64,
    pub space: MatchSpace,
    pub crop_pad: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 50,
            optimizer: OptimizerConfig::Adam {
                lr: 0.003,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 5e-4,
            },
            cosine_schedule: true,
            kappa1: 0.1,
            kappa2: 1.0,
            space: MatchSpace::Probability,
            crop_pad: 2,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "student epochs and batch size must be at least 1".into(),
            ));
        }
        check_kappas(self.kappa1, self.kappa2).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("epochs", self.epochs)
            .set("batch_size", self.batch_size)
            .set("cosine_schedule", self.cosine_schedule)
            .set("kappa1", self.kappa1)
            .set("kappa2", self.kappa2)
            .set(
                "space",
                match self.space {
                    MatchSpace::Probability => "probability",
                    MatchSpace::Logit => "logit",
                },
            )
            .set("crop_pad", self.crop_pad);
        kv.insert_section("optimizer", &self.optimizer.to_kv());
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        kv.reject_unknown(&[
            "epochs",
            "batch_size",
            "optimizer.",
            "cosine_schedule",
            "kappa1",
            "kappa2",
            "space",
            "crop_pad",
        ])?;
        let optimizer = match kv.section("optimizer") {
            s if s.keys().next().is_none() => d.optimizer,
            s => OptimizerConfig::from_kv(&s)?,
        };
        let space = match kv.raw("space").unwrap_or("probability") {
            "probability" => MatchSpace::Probability,
            "logit" => MatchSpace::Logit,
            other => return Err(Error::Config(format!("unknown match space `{other}`"))),
        };
        let cfg = Self {
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            optimizer,
            cosine_schedule: kv.get_or("cosine_schedule", d.cosine_schedule)?,
            kappa1: kv.get_or("kappa1", d.kappa1)?,
            kappa2: kv.get_or("kappa2", d.kappa2)?,
            space,
            crop_pad: kv.get_or("crop_pad", d.crop_pad)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trains a freshly initialized student on the distilled set with
/// flip/crop augmentation. Returns the model and the mean loss per epoch.
pub fn train_student(
    distilled: &DistilledSet,
    spec: ConvNetSpec,
    cfg: &StudentConfig,
    seed: u64,
) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    distilled.validate()?;
    if distilled.images.shape()[1..] != spec.input_shape()
        || distilled.num_classes != spec.num_classes
    {
        return Err(shape(format!(
            "distilled images {:?} vs student {spec}",
            distilled.images.shape()
        )));
    }
    let mut model = Model::build(spec, seed)?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57d3_e417);
    let n = distilled.len();
    let c = distilled.num_classes;
    let bs = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(bs) {
            let x = flip_crop_batch(
                &distilled.images.select_rows(chunk)?,
                cfg.crop_pad,
                &mut rng,
            )?;
            let hard: Vec<usize> = chunk.iter().map(|&i| distilled.hard_labels[i]).collect();
            let soft: Vec<f32> = chunk
                .iter()
                .flat_map(|&i| distilled.soft_labels[i * c..(i + 1) * c].iter().copied())
                .collect();
            let mut tape: Tape = Tape::new();
            let xv = tape.constant(&x);
            let out = model.forward_train(&mut tape, xv)?;
            let loss = match_loss_tape(
                &mut tape, out.logits, &hard, &soft, cfg.kappa1, cfg.kappa2, cfg.space,
            )?;
            let value = tape.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    iteration: epoch + 1,
                    detail: format!("student loss {value}"),
                });
            }
            sum += value;
            tape.backward(loss)?;
            if cfg.cosine_schedule {
                opt.set_lr(cosine_lr(cfg.optimizer.lr(), step, total_steps));
            }
            let grads = model.collect_grads(&tape, &out);
            opt.step(&mut model.params_mut(), &grads)
                .map_err(|e| Error::Diverged {
                    iteration: epoch + 1,
                    detail: e.to_string(),
                })?;
            step += 1;
        }
        losses.push(sum / steps_per_epoch as f64);
    }
    Ok((model, losses))
}

/// Balanced evaluation summary of one or more students.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: f64,
    pub balanced: f64,
    pub per_class: Vec<f64>,
    pub seeds: Vec<u64>,
    pub architecture: String,
}

impl EvalReport {
    /// Scores predicted classes against labels.
    pub fn from_predictions(
        pred: &[usize],
        labels: &[usize],
        num_classes: usize,
        architecture: &str,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(invalid("evaluation on an empty test set"));
        }
        if pred.len() != labels.len() {
            return Err(shape(format!(
                "{} predictions for {} labels",
                pred.len(),
                labels.len()
            )));
        }
        let mut hits = vec![0usize; num_classes];
        let mut totals = vec![0usize; num_classes];
        for (&p, &y) in pred.iter().zip(labels) {
            *totals.get_mut(y).ok_or(Error::LabelOutOfRange {
                label: y,
                classes: num_classes,
            })? += 1;
            hits[y] += usize::from(p == y);
        }
        if let Some(c) = totals.iter().position(|&t| t == 0) {
            return Err(Error::InsufficientSamples(format!(
                "test set has no samples of class {c}"
            )));
        }
        let per_class: Vec<f64> = hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| h as f64 / t as f64)
            .collect();
        Ok(Self {
            overall: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
            balanced: per_class.iter().sum::<f64>() / num_classes as f64,
            per_class,
            seeds,
            architecture: architecture.to_string(),
        })
    }

    /// Seed-wise average of reports over the same classes.
    pub fn average(reports: &[EvalReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| invalid("no reports to average"))?;
        let k = reports.len() as f64;
        let mut per_class = vec![0.0; first.per_class.len()];
        for r in reports {
            if r.per_class.len() != per_class.len() {
                return Err(shape("reports cover different class counts"));
            }
            per_class
                .iter_mut()
                .zip(&r.per_class)
                .for_each(|(a, b)| *a += b / k);
        }
        Ok(Self {
            overall: reports.iter().map(|r| r.overall).sum::<f64>() / k,
            balanced: reports.iter().map(|r| r.balanced).sum::<f64>() / k,
            per_class,
            seeds: reports
                .iter()
                .flat_map(|r| r.seeds.iter().copied())
                .collect(),
            architecture: first.architecture.clone(),
        })
    }
}

/// Inference-mode evaluation of `student` on a labeled test set.
pub fn evaluate(student: &Model, test: &LongTailDataset, seed: u64) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(invalid("evaluation on an empty test set"));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let logits = student.predict(&test.batch(&idx), 256)?;
    let k = student.spec().num_classes;
    let pred: Vec<usize> = logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b })
        })
        .collect();
    EvalReport::from_predictions(
        &pred,
        test.labels(),
        test.num_classes(),
        &student.spec().name(),
        vec![seed],
    )
}

/// Softmax of row-major logits, for callers outside the tape.
pub fn softmax_rows(logits: &Tensor) -> Result<Vec<f32>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(shape(format!("logits {s:?}")));
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(s[1].max(1)) {
        softmax_in_place(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logit_of(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    #[test]
    fn hand_computed_value() {
        let l = logit_of(&[0.6, 0.4]);
        let v = match_loss(&l, &[0], &[1.0, 0.0], 2, 1.0, 1.0, MatchSpace::Probability).unwrap();
        assert!((v - (-(0.6f64).ln() + 0.32)).abs() < 1e-12);
        assert!((v - 0.8308).abs() < 1e-4);
    }

    #[test]
    fn reductions_and_errors() {
        let l = vec![0.2, -0.4, 1.0, 0.3, 0.3, -2.0];
        let soft = vec![0.2, 0.5, 0.3, 0.1, 0.1, 0.8];
        let hard = [2, 0];
        let ce = match_loss(&l, &hard, &soft, 3, 1.0, 0.0, MatchSpace::Probability).unwrap();
        let mut manual = 0.0;
        for (i, &y) in hard.iter().enumerate() {
            let row = &l[i * 3..i * 3 + 3];
            let lse = row.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
            manual += lse - row[y];
        }
        assert!((ce - manual / 2.0).abs() < 1e-12);
        assert!(match_loss(&l, &hard, &soft, 3, 0.0, 0.0, MatchSpace::Probability).is_err());
        assert!(match_loss(&l, &hard, &soft, 3, -1.0, 1.0, MatchSpace::Probability).is_err());
        let p = [0.2, 0.5, 0.3];
        assert!(
            match_loss(
                &logit_of(&p),
                &[1],
                &p,
                3,
                0.0,
                1.0,
                MatchSpace::Probability
            )
            .unwrap()
            .abs()
                < 1e-12
        );
    }

    #[test]
    fn tape_matches_reference() {
        let l = vec![0.2, -0.4, 1.0, 0.3, 0.3, -2.0];
        let soft32 = vec![0.2f32, 0.5, 0.3, 0.1, 0.1, 0.8];
        let soft: Vec<f64> = soft32.iter().map(|&v| v as f64).collect();
        for space in [MatchSpace::Probability, MatchSpace::Logit] {
            let reference = match_loss(&l, &[2, 0], &soft, 3, 0.1, 1.0, space).unwrap();
            let mut tape = Tape::<f64>::new();
            let x = tape.constant_vec(&[2, 3], l.clone()).unwrap();
            let v = match_loss_tape(&mut tape, x, &[2, 0], &soft32, 0.1, 1.0, space).unwrap();
            assert!((tape.scalar(v) - reference).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_predictor_report() {
        let labels: Vec<usize> = (0..10).flat_map(|c| [c; 3]).collect();
        let r = EvalReport::from_predictions(&[0; 30], &labels, 10, "x", vec![1]).unwrap();
        assert!((r.overall - 0.1).abs() < 1e-12 && (r.balanced - 0.1).abs() < 1e-12);
        assert_eq!(r.per_class[0], 1.0);
        assert!(r.per_class[1..].iter().all(|&v| v == 0.0));
        let mean = r.per_class.iter().sum::<f64>() / 10.0;
        assert!((r.balanced - mean).abs() < 1e-9);
        assert!(EvalReport::from_predictions(&[], &[], 10, "x", vec![]).is_err());
    }

    #[test]
    fn config_round_trips() {
        let cfg = StudentConfig {
            space: MatchSpace::Logit,
            epochs: 7,
            ..Default::default()
        };
        assert_eq!(StudentConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }
}
