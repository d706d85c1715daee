//! Pixel-space recovery: synthetic images are optimized so that the BN input
//! statistics they induce in the frozen observer match the real targets.
//!
//! Per BN layer the loss adds `‖μ(S) − μ(D)‖₂ + ‖σ²(S) − σ²(D)‖₂`; the
//! class-wise term repeats this per class present (against the class
//! targets), averages over those classes, and enters with weight `λ_cw`.

use std::path::Path;

use crate::config::KeyValues;
use crate::error::{invalid, shape, Error, Result};
use crate::expert::ExpertCheckpoint;
use crate::model::{Mode, Model};
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig};
use crate::recalib::RealStatsBundle;
use crate::tape::{Real, Tape, Var};
use crate::tensor::Tensor;

/// `(mean, variance)` per BN layer, both `[channels]`.
pub type LayerStats = Vec<(Var, Var)>;

/// Batch statistics of synthetic activations: over the whole batch, and
/// over each class present.
#[derive(Debug, Clone)]
pub struct SynthStats {
    pub global: LayerStats,
    pub classes: Vec<(usize, LayerStats)>,
}

/// Computes [`SynthStats`] from BN inputs (NCHW) and the row labels.
pub fn synth_stats<R: Real>(
    tape: &mut Tape<R>,
    bn_inputs: &[Var],
    labels: &[usize],
    with_classes: bool,
) -> Result<SynthStats> {
    let mut global = Vec::with_capacity(bn_inputs.len());
    for &x in bn_inputs {
        if tape.shape(x).first() != Some(&labels.len()) {
            return Err(shape(format!(
                "{} labels for activations {:?}",
                labels.len(),
                tape.shape(x)
            )));
        }
        let m = tape.channel_mean(x)?;
        let v = tape.channel_var(x, m)?;
        global.push((m, v));
    }
    let mut classes = Vec::new();
    if with_classes {
        let mut present: Vec<usize> = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        for c in present {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let mut per_layer = Vec::with_capacity(bn_inputs.len());
            for &x in bn_inputs {
                let xs = tape.select_rows(x, &rows)?;
                let m = tape.channel_mean(xs)?;
                let v = tape.channel_var(xs, m)?;
                per_layer.push((m, v));
            }
            classes.push((c, per_layer));
        }
    }
    Ok(SynthStats { global, classes })
}

/// Loss terms on the tape.
#[derive(Debug, Clone)]
pub struct AlignmentTerms {
    pub total: Var,
    pub global: Var,
    /// `λ_cw`-weighted class-wise term; `None` when `λ_cw = 0`.
    pub class_wise: Option<Var>,
    pub layer_mean: Vec<Var>,
    pub layer_var: Vec<Var>,
}

fn distance<R: Real>(tape: &mut Tape<R>, stat: Var, target: &[f32]) -> Result<Var> {
    if tape.shape(stat) != [target.len()] {
        return Err(shape(format!(
            "statistic {:?} vs target of {}",
            tape.shape(stat),
            target.len()
        )));
    }
    let t = tape.constant_vec(
        &[target.len()],
        target.iter().map(|&v| R::of(v as f64)).collect(),
    )?;
    let d = tape.sub(stat, t)?;
    Ok(tape.l2_norm(d))
}

fn check_geometry(n_layers: usize, bundle: &RealStatsBundle) -> Result<()> {
    if n_layers != bundle.num_layers() {
        return Err(shape(format!(
            "{n_layers} BN layers vs {} in the stats bundle",
            bundle.num_layers()
        )));
    }
    Ok(())
}

pub fn alignment_loss<R: Real>(
    tape: &mut Tape<R>,
    stats: &SynthStats,
    bundle: &RealStatsBundle,
    lambda_cw: f64,
) -> Result<AlignmentTerms> {
    if !(lambda_cw >= 0.0) {
        return Err(invalid(format!("class-wise weight {lambda_cw}")));
    }
    check_geometry(stats.global.len(), bundle)?;
    let zero = tape.constant_vec(&[], vec![R::zero()])?;
    let mut global = zero;
    let (mut layer_mean, mut layer_var) = (Vec::new(), Vec::new());
    for (l, &(m, v)) in stats.global.iter().enumerate() {
        let dm = distance(tape, m, &bundle.global_mean[l])?;
        let dv = distance(tape, v, &bundle.global_var[l])?;
        layer_mean.push(dm);
        layer_var.push(dv);
        let s = tape.add(dm, dv)?;
        global = tape.add(global, s)?;
    }
    if lambda_cw == 0.0 || stats.classes.is_empty() {
        return Ok(AlignmentTerms {
            total: global,
            global,
            class_wise: None,
            layer_mean,
            layer_var,
        });
    }
    let mut cw = zero;
    for (c, per_layer) in &stats.classes {
        if *c >= bundle.num_classes {
            return Err(invalid(format!(
                "class {c} has no statistics in the bundle ({} classes)",
                bundle.num_classes
            )));
        }
        check_geometry(per_layer.len(), bundle)?;
        for (l, &(m, v)) in per_layer.iter().enumerate() {
            let dm = distance(tape, m, bundle.class_mean(l, *c))?;
            let dv = distance(tape, v, bundle.class_var(l, *c))?;
            let s = tape.add(dm, dv)?;
            cw = tape.add(cw, s)?;
        }
    }
    let cw = tape.scale(cw, lambda_cw / stats.classes.len() as f64);
    let total = tape.add(global, cw)?;
    Ok(AlignmentTerms {
        total,
        global,
        class_wise: Some(cw),
        layer_mean,
        layer_var,
    })
}

/// Alignment loss of `images` under the observer, built on `tape` with the
/// images as a differentiable leaf.
pub fn image_alignment<R: Real>(
    tape: &mut Tape<R>,
    observer: &Model,
    x: Var,
    labels: &[usize],
    bundle: &RealStatsBundle,
    lambda_cw: f64,
) -> Result<AlignmentTerms> {
    let out = observer.forward(tape, x, Mode::FrozenCapture)?;
    let stats = synth_stats(tape, &out.bn_inputs, labels, lambda_cw > 0.0)?;
    alignment_loss(tape, &stats, bundle, lambda_cw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Batching {
    /// All synthetic images in one batch.
    Joint,
    /// One batch per class; gradients are summed before the step.
    PerClass,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryConfig {
    pub iterations: usize,
    pub optimizer: OptimizerConfig,
    pub cosine_schedule: bool,
    pub lambda_cw: f64,
    pub batching: Batching,
    pub clamp: (f32, f32),
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            optimizer: OptimizerConfig::adam(0.05),
            cosine_schedule: true,
            lambda_cw: 1.0,
            batching: Batching::Joint,
            clamp: (0.0, 1.0),
            seed: 0,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config(
                "recovery needs at least one iteration".into(),
            ));
        }
        if !(self.lambda_cw >= 0.0) {
            return Err(Error::Config(format!("lambda_cw {}", self.lambda_cw)));
        }
        if !(self.clamp.0 < self.clamp.1) {
            return Err(Error::Config(format!("pixel clamp range {:?}", self.clamp)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("iterations", self.iterations)
            .set("cosine_schedule", self.cosine_schedule)
            .set("lambda_cw", self.lambda_cw)
            .set(
                "batching",
                match self.batching {
                    Batching::Joint => "joint",
                    Batching::PerClass => "per_class",
                },
            )
            .set("clamp_min", self.clamp.0)
            .set("clamp_max", self.clamp.1)
            .set("seed", self.seed);
        kv.insert_section("optimizer", &self.optimizer.to_kv());
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        kv.reject_unknown(&[
            "iterations",
            "optimizer.",
            "cosine_schedule",
            "lambda_cw",
            "batching",
            "clamp_min",
            "clamp_max",
            "seed",
        ])?;
        let optimizer = match kv.section("optimizer") {
            s if s.keys().next().is_none() => d.optimizer,
            s => OptimizerConfig::from_kv(&s)?,
        };
        let batching = match kv.raw("batching").unwrap_or("joint") {
            "joint" => Batching::Joint,
            "per_class" => Batching::PerClass,
            other => return Err(Error::Config(format!("unknown batching `{other}`"))),
        };
        let cfg = Self {
            iterations: kv.get_or("iterations", d.iterations)?,
            optimizer,
            cosine_schedule: kv.get_or("cosine_schedule", d.cosine_schedule)?,
            lambda_cw: kv.get_or("lambda_cw", d.lambda_cw)?,
            batching,
            clamp: (
                kv.get_or("clamp_min", d.clamp.0)?,
                kv.get_or("clamp_max", d.clamp.1)?,
            ),
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss trace of a recovery run. Entry `t` of each vector is measured
/// before step `t + 1`; `final_loss` after the last step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignmentReport {
    pub total: Vec<f64>,
    pub global: Vec<f64>,
    pub class_wise: Vec<f64>,
    /// Per iteration, `‖Δμ_l‖` for every layer.
    pub layer_mean: Vec<Vec<f64>>,
    pub layer_var: Vec<Vec<f64>>,
    pub initial: f64,
    pub final_loss: f64,
}

impl AlignmentReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let layers = self.layer_mean.first().map_or(0, Vec::len);
        crate::codec::create_parent(path)?;
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![
            "iteration".to_string(),
            "total".into(),
            "global".into(),
            "class_wise".into(),
        ];
        header.extend((1..=layers).map(|l| format!("mean_l{l}")));
        header.extend((1..=layers).map(|l| format!("var_l{l}")));
        w.write_record(&header)?;
        for t in 0..self.total.len() {
            let mut row = vec![
                t.to_string(),
                self.total[t].to_string(),
                self.global[t].to_string(),
                self.class_wise[t].to_string(),
            ];
            row.extend(self.layer_mean[t].iter().map(f64::to_string));
            row.extend(self.layer_var[t].iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct StepValues {
    total: f64,
    global: f64,
    class_wise: f64,
    layer_mean: Vec<f64>,
    layer_var: Vec<f64>,
}

/// Loss and pixel gradient of the current images, over the configured sub-batches.
fn evaluate(
    observer: &Model,
    images: &Tensor,
    labels: &[usize],
    bundle: &RealStatsBundle,
    cfg: &RecoveryConfig,
    grad: Option<&mut Vec<f32>>,
) -> Result<StepValues> {
    let groups: Vec<Vec<usize>> = match cfg.batching {
        Batching::Joint => vec![(0..labels.len()).collect()],
        Batching::PerClass => {
            let mut classes: Vec<usize> = labels.to_vec();
            classes.sort_unstable();
            classes.dedup();
            classes
                .iter()
                .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
                .collect()
        }
    };
    let k = groups.len() as f64;
    let layers = bundle.num_layers();
    let mut v = StepValues {
        total: 0.0,
        global: 0.0,
        class_wise: 0.0,
        layer_mean: vec![0.0; layers],
        layer_var: vec![0.0; layers],
    };
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.clear();
        g.resize(images.numel(), 0.0);
    }
    let row = images.row_len();
    for rows in groups {
        let sub = if rows.len() == labels.len() {
            images.clone()
        } else {
            images.select_rows(&rows)?
        };
        let sub_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
        let mut tape: Tape = Tape::new();
        let x = tape.param(&sub);
        let terms = image_alignment(&mut tape, observer, x, &sub_labels, bundle, cfg.lambda_cw)?;
        v.total += tape.scalar(terms.total) as f64 / k;
        v.global += tape.scalar(terms.global) as f64 / k;
        v.class_wise += terms.class_wise.map_or(0.0, |c| tape.scalar(c) as f64) / k;
        for l in 0..layers {
            v.layer_mean[l] += tape.scalar(terms.layer_mean[l]) as f64 / k;
            v.layer_var[l] += tape.scalar(terms.layer_var[l]) as f64 / k;
        }
        if let Some(g) = grad.as_deref_mut() {
            tape.backward(terms.total)?;
            let gx = tape.grad_f32(x);
            for (j, &i) in rows.iter().enumerate() {
                for (dst, &src) in g[i * row..(i + 1) * row]
                    .iter_mut()
                    .zip(&gx[j * row..(j + 1) * row])
                {
                    *dst += src / k as f32;
                }
            }
        }
    }
    Ok(v)
}

/// Optimizes `init` (`[n, c, h, w]`, labels per row) against `bundle` under
/// the frozen observer. Only the pixels change; they are clamped after every
/// step.
pub fn recover(
    init: &Tensor,
    labels: &[usize],
    observer: &ExpertCheckpoint,
    bundle: &RealStatsBundle,
    cfg: &RecoveryConfig,
) -> Result<(Tensor, AlignmentReport)> {
    cfg.validate()?;
    let hash = observer.hash();
    if bundle.observer_hash != hash {
        return Err(Error::Provenance {
            stage: "recover".into(),
            detail: format!(
                "bundle was computed from observer {} but {} was given",
                bundle.observer_hash, hash
            ),
        });
    }
    let model = &observer.model;
    if init.shape().first() != Some(&labels.len()) {
        return Err(shape(format!(
            "{} labels for images {:?}",
            labels.len(),
            init.shape()
        )));
    }
    let (lo, hi) = cfg.clamp;
    let mut images = init.clone();
    images
        .data_mut()
        .iter_mut()
        .for_each(|p| *p = p.clamp(lo, hi));
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut report = AlignmentReport::default();
    let mut grad = Vec::new();
    for t in 0..cfg.iterations {
        let v = evaluate(model, &images, labels, bundle, cfg, Some(&mut grad))?;
        if !v.total.is_finite() {
            return Err(Error::Diverged {
                iteration: t + 1,
                detail: format!("alignment loss {}", v.total),
            });
        }
        if t == 0 {
            report.initial = v.total;
        }
        report.total.push(v.total);
        report.global.push(v.global);
        report.class_wise.push(v.class_wise);
        report.layer_mean.push(v.layer_mean);
        report.layer_var.push(v.layer_var);
        if cfg.cosine_schedule {
            opt.set_lr(cosine_lr(cfg.optimizer.lr(), t, cfg.iterations));
        }
        opt.step(&mut [&mut images], std::slice::from_ref(&grad))
            .map_err(|e| Error::Diverged {
                iteration: t + 1,
                detail: e.to_string(),
            })?;
        images
            .data_mut()
            .iter_mut()
            .for_each(|p| *p = p.clamp(lo, hi));
    }
    let last = evaluate(model, &images, labels, bundle, cfg, None)?;
    report.final_loss = last.total;
    Ok((images, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recalib::StatsKind;

    fn bundle(mean: f32, var: f32) -> RealStatsBundle {
        RealStatsBundle {
            kind: StatsKind::Fair,
            channels: vec![1],
            num_classes: 2,
            global_mean: vec![vec![mean]],
            global_var: vec![vec![var]],
            class_mean: vec![vec![mean, mean]],
            class_var: vec![vec![var, var]],
            observer_hash: String::new(),
            dataset_hash: String::new(),
        }
    }

    fn stats(tape: &mut Tape<f64>, m: f64, v: f64) -> SynthStats {
        let mv = tape.constant_vec(&[1], vec![m]).unwrap();
        let vv = tape.constant_vec(&[1], vec![v]).unwrap();
        SynthStats {
            global: vec![(mv, vv)],
            classes: vec![(1, vec![(mv, vv)])],
        }
    }

    #[test]
    fn exact_match_is_zero_and_single_mean_gap_is_one() {
        let mut tape = Tape::<f64>::new();
        let s = stats(&mut tape, 0.0, 2.0);
        let terms = alignment_loss(&mut tape, &s, &bundle(0.0, 2.0), 1.0).unwrap();
        assert_eq!(tape.scalar(terms.total), 0.0);
        let s = stats(&mut tape, 1.0, 2.0);
        let terms = alignment_loss(&mut tape, &s, &bundle(0.0, 2.0), 0.0).unwrap();
        assert_eq!(tape.scalar(terms.total), 1.0);
        assert!(terms.class_wise.is_none());
    }

    #[test]
    fn class_without_bundle_stats_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let mut s = stats(&mut tape, 0.0, 1.0);
        s.classes[0].0 = 5;
        assert!(alignment_loss(&mut tape, &s, &bundle(0.0, 1.0), 1.0).is_err());
        assert!(alignment_loss(&mut tape, &s, &bundle(0.0, 1.0), -1.0).is_err());
    }

    #[test]
    fn doubling_lambda_scales_class_term() {
        let mut tape = Tape::<f64>::new();
        let s = stats(&mut tape, 0.5, 1.5);
        let b = bundle(0.0, 1.0);
        let one = alignment_loss(&mut tape, &s, &b, 1.0).unwrap();
        let two = alignment_loss(&mut tape, &s, &b, 2.0).unwrap();
        let (c1, c2) = (
            tape.scalar(one.class_wise.unwrap()),
            tape.scalar(two.class_wise.unwrap()),
        );
        assert!(c2 >= c1 && (c2 - 2.0 * c1).abs() < 1e-12);
    }

    #[test]
    fn config_round_trips() {
        let cfg = RecoveryConfig {
            batching: Batching::PerClass,
            lambda_cw: 0.25,
            ..Default::default()
        };
        assert_eq!(RecoveryConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let bad = KeyValues::parse("iterations=0").unwrap();
        assert!(RecoveryConfig::from_kv(&bad).is_err());
    }
}
