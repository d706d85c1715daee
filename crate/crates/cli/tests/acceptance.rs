//! Acceptance suite: one pass/fail line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,3` restricts the run to the listed criteria.
//! Criterion 7 trains dozens of networks and dominates the runtime.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ltdd::config::KeyValues;
use ltdd::data::{gen_blobs, make_long_tail, BlobStyle};
use ltdd::eval::{match_loss, MatchSpace};
use ltdd::expert::{
    debias_loss, expert_loss, robust_loss, ClassFrequency, ExpertCheckpoint, ExpertTrainConfig,
    HeadStack, MixedBatch,
};
use ltdd::gradcheck::{finite_diff_check, tape_gradient_error};
use ltdd::init::{
    confidence_init, multi_round_select, Candidate, CandidatePool, InitConfig, Selection,
};
use ltdd::pipeline::{run_pipeline, PipelineConfig};
use ltdd::recalib::{accumulate, ema_reference, recalibrate, RecalibOptions};
use ltdd::recovery::{image_alignment, recover, RecoveryConfig};
use ltdd::{ConvNetSpec, LongTailDataset, LongTailSpec, Mode, Model, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "recalibration oracle", recalibration_oracle),
        (2, "fixed-momentum contrast", momentum_contrast),
        (3, "loss algebra", loss_algebra),
        (4, "gradient checks", gradient_checks),
        (5, "selection oracle", selection_oracle),
        (6, "recovery descent", recovery_descent),
        (7, "end-to-end directional gain", end_to_end_gain),
        (8, "determinism", determinism),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} PASS  {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} FAIL  {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---- shared toys ----

fn skewed_toy() -> LongTailDataset {
    let src = gen_blobs(5, 64, [3, 8, 8], 11, BlobStyle::default()).unwrap();
    let spec = LongTailSpec {
        num_classes: 5,
        largest_class_count: 64,
        imbalance_factor: 16.0,
        seed: 12,
    };
    let ds = make_long_tail(&src, &spec).unwrap();
    assert_eq!(ds.class_counts(), vec![64, 32, 16, 8, 4]);
    ds
}

fn checkpoint(model: Model) -> ExpertCheckpoint {
    let heads = HeadStack::build(model.spec().feature_len(), model.spec().base_width, 1).unwrap();
    ExpertCheckpoint {
        model,
        heads,
        config: ExpertTrainConfig::default(),
    }
}

/// Observer with non-trivial running statistics: a few train-mode passes
/// move them away from the (0, 1) initialization.
fn toy_observer(ds: &LongTailDataset, depth: usize, width: usize, seed: u64) -> Model {
    let mut model = Model::build(
        ConvNetSpec::new(depth, width, ds.image_shape(), ds.num_classes()),
        seed,
    )
    .unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(32).take(8) {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&ds.batch(chunk));
        model.forward_train(&mut tape, x).unwrap();
    }
    model
}

/// Whole-class BN-input moments computed in one pass per class, in f64.
fn brute_force_moments(model: &Model, ds: &LongTailDataset) -> Vec<Vec<(Vec<f64>, Vec<f64>)>> {
    (0..ds.num_classes())
        .map(|c| {
            let mut tape: Tape = Tape::new();
            let x = tape.constant(&ds.batch(ds.class_indices(c)));
            let out = model.forward(&mut tape, x, Mode::FrozenCapture).unwrap();
            out.bn_inputs
                .iter()
                .map(|&v| {
                    let s = tape.shape(v).to_vec();
                    let vals = tape.value(v);
                    let (n, ch, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut mean = vec![0.0; ch];
                    let mut var = vec![0.0; ch];
                    for k in 0..ch {
                        let xs: Vec<f64> = (0..n)
                            .flat_map(|i| {
                                vals[(i * ch + k) * hw..(i * ch + k + 1) * hw]
                                    .iter()
                                    .map(|&v| v as f64)
                            })
                            .collect();
                        let m = xs.iter().sum::<f64>() / xs.len() as f64;
                        mean[k] = m;
                        var[k] = xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / xs.len() as f64;
                    }
                    (mean, var)
                })
                .collect()
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-3)
}

// ---- 1 ----

fn recalibration_oracle() -> Outcome {
    let t0 = Instant::now();
    let ds = skewed_toy();
    let model = toy_observer(&ds, 2, 8, 3);
    let truth = brute_force_moments(&model, &ds);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut worst_global) = (0.0f64, 0.0f64);
    let trials = 6;
    for trial in 0..trials {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let bs = [1, 3, 7, 16, 50, 124][trial];
        // Random contiguous shards, accumulated separately and merged.
        let cut = rng.random_range(1..order.len());
        let a = accumulate(&model, &ds, &order[..cut], bs).unwrap();
        let b = accumulate(&model, &ds, &order[cut..], bs).unwrap();
        let bundle = a.merge(&b).unwrap().finalize_global(false).unwrap();
        for l in 0..bundle.num_layers() {
            let ch = bundle.channels[l];
            for (c, class_truth) in truth.iter().enumerate() {
                let (m, v) = &class_truth[l];
                for k in 0..ch {
                    worst = worst.max(rel(bundle.class_mean(l, c)[k] as f64, m[k]));
                    worst = worst.max(rel(bundle.class_var(l, c)[k] as f64, v[k]));
                }
            }
            for k in 0..ch {
                let avg_m = (0..5)
                    .map(|c| bundle.class_mean(l, c)[k] as f64)
                    .sum::<f64>()
                    / 5.0;
                let avg_v = (0..5)
                    .map(|c| bundle.class_var(l, c)[k] as f64)
                    .sum::<f64>()
                    / 5.0;
                worst_global = worst_global.max((bundle.global_mean[l][k] as f64 - avg_m).abs());
                worst_global = worst_global.max((bundle.global_var[l][k] as f64 - avg_v).abs());
            }
        }
    }
    // The library entry point with several shards agrees as well.
    let full = recalibrate(
        &checkpoint(model),
        &ds,
        RecalibOptions {
            batch_size: 9,
            shards: 4,
            law_of_total_variance: false,
        },
    )
    .unwrap();
    for (c, class_truth) in truth.iter().enumerate() {
        for (l, (m, v)) in class_truth.iter().enumerate() {
            for k in 0..m.len() {
                worst = worst.max(rel(full.class_mean(l, c)[k] as f64, m[k]));
                worst = worst.max(rel(full.class_var(l, c)[k] as f64, v[k]));
            }
        }
    }
    let elapsed = t0.elapsed();
    check(
        worst <= 1e-4 && worst_global <= 1e-6 && elapsed < Duration::from_secs(60),
        format!("{trials} partitions, max class rel err {worst:.2e}, max global dev {worst_global:.2e}, {elapsed:.1?}"),
    )
}

// ---- 2 ----

fn momentum_contrast() -> Outcome {
    let ds = skewed_toy();
    let model = toy_observer(&ds, 2, 8, 3);
    let truth = brute_force_moments(&model, &ds);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| ds.label(i));
    let ema = ema_reference(&model, &ds, &order, 8, 0.1).unwrap();
    // Relative deviation per class: norm of the difference over norm of the
    // fair estimate, means and variances of every layer stacked.
    let mut per_class = vec![0.0f64; 5];
    for (c, class_truth) in truth.iter().enumerate() {
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (l, (m, v)) in class_truth.iter().enumerate() {
            let ch = m.len();
            let (em, ev) = &ema[l];
            for k in 0..ch {
                diff += (em[c * ch + k] - m[k]).powi(2) + (ev[c * ch + k] - v[k]).powi(2);
                norm += m[k].powi(2) + v[k].powi(2);
            }
        }
        per_class[c] = (diff / norm).sqrt();
    }
    let max = per_class.iter().cloned().fold(0.0, f64::max);
    check(
        per_class.iter().any(|&d| d > 1e-2),
        format!(
            "max relative deviation per class {:?} (max {max:.3})",
            per_class
                .iter()
                .map(|d| format!("{d:.3}"))
                .collect::<Vec<_>>()
        ),
    )
}

// ---- 3 ----

fn softmax(logits: &[f64], c: usize) -> Vec<f64> {
    logits
        .chunks(c)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter()
                .map(move |v| (v - m).exp() / z)
                .collect::<Vec<_>>()
        })
        .collect()
}

fn cross_entropy(probs: &[f64], targets: &[f64], c: usize) -> f64 {
    let n = probs.len() / c;
    -probs
        .iter()
        .zip(targets)
        .map(|(p, t)| t * p.ln())
        .sum::<f64>()
        / n as f64
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<f64> {
    (0..n)
        .flat_map(|_| {
            let (a, b) = (rng.random_range(0..c), rng.random_range(0..c));
            let lam: f64 = rng.random();
            (0..c).map(move |k| lam * f64::from(k == a) + (1.0 - lam) * f64::from(k == b))
        })
        .collect()
}

fn loss_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut rescale, mut t0, mut uniform, mut robust_perfect, mut robust_scale, mut linear) =
        (0f64, 0f64, 0f64, 0f64, 0f64, 0f64);
    for _ in 0..50 {
        let c = rng.random_range(2..8);
        let n = rng.random_range(1..6);
        let logits: Vec<f64> = (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let probs = softmax(&logits, c);
        let targets = random_targets(&mut rng, n, c);
        let r: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
        let q = rng.random_range(0.0..2.0);
        let total = rng.random_range(1..50);
        let t = rng.random_range(0..=total);
        let f = ClassFrequency::new(r.clone(), q).unwrap();
        let scaled = ClassFrequency::new(r.iter().map(|v| v * 37.5).collect(), q).unwrap();
        let l = debias_loss(&probs, &targets, &f, t, total).unwrap();
        rescale =
            rescale.max((l - debias_loss(&probs, &targets, &scaled, t, total).unwrap()).abs());
        let ce = cross_entropy(&probs, &targets, c);
        t0 = t0.max((debias_loss(&probs, &targets, &f, 0, total).unwrap() - ce).abs());
        let flat = ClassFrequency::new(vec![0.3; c], q).unwrap();
        let alpha = (t as f64 / total as f64).powi(2);
        let closed = alpha * ce / c as f64 + (1.0 - alpha) * ce;
        uniform =
            uniform.max((debias_loss(&probs, &targets, &flat, t, total).unwrap() - closed).abs());

        let dim = rng.random_range(2..6);
        let z1: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z2: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k1 = rng.random_range(0.1..5.0);
        let k2 = rng.random_range(0.1..5.0);
        // p1 aligned with z2 and p2 with z1: perfect alignment.
        let p1: Vec<f64> = z2.iter().map(|v| v * k1).collect();
        let p2: Vec<f64> = z1.iter().map(|v| v * k2).collect();
        robust_perfect =
            robust_perfect.max((robust_loss(&z1, &z2, &p1, &p2, dim).unwrap() + 2.0).abs());
        let p1r: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p2r: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = robust_loss(&z1, &z2, &p1r, &p2r, dim).unwrap();
        let s = |v: &[f64], k: f64| v.iter().map(|x| x * k).collect::<Vec<_>>();
        let moved = robust_loss(&s(&z1, k1), &s(&z2, k2), &s(&p1r, k2), &s(&p2r, k1), dim).unwrap();
        robust_scale = robust_scale.max((base - moved).abs());

        let hard: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let soft = softmax(
            &(0..n * c)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect::<Vec<_>>(),
            c,
        );
        let (a, b) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        for space in [MatchSpace::Probability, MatchSpace::Logit] {
            let both = match_loss(&logits, &hard, &soft, c, a + 1e-3, b + 1e-3, space).unwrap();
            let first = match_loss(&logits, &hard, &soft, c, a + 1e-3, 0.0, space).unwrap();
            let second = match_loss(&logits, &hard, &soft, c, 0.0, b + 1e-3, space).unwrap();
            linear = linear.max((first + second - both).abs());
        }
    }
    let ok = rescale <= 1e-6
        && t0 <= 1e-6
        && uniform <= 1e-5
        && robust_perfect <= 1e-9
        && robust_scale <= 1e-9
        && linear <= 1e-6;
    check(
        ok,
        format!(
            "rescale {rescale:.1e}, t=0 {t0:.1e}, uniform-r {uniform:.1e}, perfect -2 {robust_perfect:.1e}, scale {robust_scale:.1e}, linearity {linear:.1e}"
        ),
    )
}

// ---- 4 ----

fn gradient_errors(step: f32) -> Result<(f64, f64, usize), String> {
    let src = gen_blobs(2, 12, [3, 8, 8], 21, BlobStyle::default()).unwrap();
    let model = toy_observer(&src, 2, 4, 22);
    let bundle = recalibrate(&checkpoint(model.clone()), &src, RecalibOptions::default()).unwrap();

    // Alignment loss with respect to pixels.
    let labels = vec![0, 0, 1, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let pixels = Tensor::new(
        vec![4, 3, 8, 8],
        (0..4 * 192).map(|_| rng.random_range(0.05..0.95)).collect(),
    )
    .unwrap();
    let align_err = tape_gradient_error(
        |tape, x| Ok(image_alignment(tape, &model, x, &labels, &bundle, 1.0)?.total),
        &pixels,
        step,
    )
    .map_err(|e| e.to_string())?;

    // Combined expert loss with respect to every network and head parameter.
    let heads = HeadStack::build(model.spec().feature_len(), 4, 24).unwrap();
    let idx = [0, 1, 12, 13];
    let anchor = src.batch(&idx);
    let anchor_labels: Vec<usize> = idx.iter().map(|&i| src.label(i)).collect();
    let view1 = MixedBatch::mix(
        &anchor,
        &anchor_labels,
        &[2, 3, 0, 1],
        &[0.7, 0.4, 1.0, 0.55],
        2,
    )
    .unwrap();
    let view2 = MixedBatch::mix(
        &anchor,
        &anchor_labels,
        &[1, 0, 3, 2],
        &[0.9, 0.35, 0.6, 1.0],
        2,
    )
    .unwrap();
    let images = Tensor::new(
        vec![8, 3, 8, 8],
        view1
            .images
            .data()
            .iter()
            .chain(view2.images.data())
            .copied()
            .collect(),
    )
    .unwrap();
    let targets: Vec<f64> = view1
        .targets
        .iter()
        .chain(&view2.targets)
        .map(|&v| v as f64)
        .collect();
    let freq = ClassFrequency::from_counts(&[40, 7], 0.5).unwrap();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&images);
    let out = model
        .forward(&mut tape, x, Mode::Train)
        .map_err(|e| e.to_string())?;
    let l = expert_loss(&mut tape, &out, &heads, &targets, &freq, 3, 10, 0.5, 1.0)
        .map_err(|e| e.to_string())?;
    let h = l.heads.clone().ok_or("heads not evaluated")?;
    if l.robust.is_none() {
        return Err("consistency term undefined on the toy batch".into());
    }
    let total_value = tape.scalar(l.total);
    // The prediction outputs enter through a stop-gradient, so the analytic
    // gradient is the derivative with the predictions held at their current
    // value. The numeric oracle freezes them the same way.
    let frozen_p = tape.value(h.p).to_vec();
    let mut vars = out.params.clone();
    vars.extend(h.params.iter().copied());
    tape.backward(l.total).map_err(|e| e.to_string())?;
    let surrogate = |m: &Model, hs: &HeadStack| -> ltdd::Result<f64> {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&images);
        let out = m.forward(&mut tape, x, Mode::Train)?;
        let debias = ltdd::expert::debias_loss_tape(&mut tape, out.logits, &targets, &freq, 3, 10)?;
        let ho = hs.forward(&mut tape, out.features)?;
        let z1 = tape.select_rows(ho.z, &[0, 1, 2, 3])?;
        let z2 = tape.select_rows(ho.z, &[4, 5, 6, 7])?;
        let d = hs.dim();
        let p1 = tape.constant_vec(&[4, d], frozen_p[..4 * d].to_vec())?;
        let p2 = tape.constant_vec(&[4, d], frozen_p[4 * d..].to_vec())?;
        let robust = ltdd::expert::robust_loss_tape(&mut tape, z1, z2, p1, p2)?;
        let r = tape.scale(robust, 0.5);
        let total = tape.add(r, debias)?;
        Ok(tape.scalar(total))
    };
    let base = surrogate(&model, &heads).map_err(|e| e.to_string())?;
    if (base - total_value).abs() > 1e-9 * total_value.abs().max(1.0) {
        return Err(format!(
            "frozen-prediction objective {base} differs from the loss {total_value}"
        ));
    }
    let n_model = model.params().len();
    let mut expert_err = 0.0f64;
    let mut count = 0;
    for (k, &v) in vars.iter().enumerate() {
        let current = if k < n_model {
            model.params()[k].clone()
        } else {
            heads.params()[k - n_model].clone()
        };
        let analytic: Vec<f64> = match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; current.numel()],
        };
        count += current.numel();
        let err = finite_diff_check(
            |t| {
                let (mut m, mut hs) = (model.clone(), heads.clone());
                if k < n_model {
                    *m.params_mut()[k] = t.clone();
                } else {
                    *hs.params_mut()[k - n_model] = t.clone();
                }
                surrogate(&m, &hs)
            },
            &current,
            &analytic,
            step,
        )
        .map_err(|e| e.to_string())?;
        expert_err = expert_err.max(err);
    }
    Ok((align_err, expert_err, count))
}

/// Checks run on a 64-bit tape, so the step is 1e-4 rather than the 1e-3
/// suited to 32-bit evaluation. At 1e-3 the quotient on this ReLU network is
/// dominated by activation-pattern changes and O(h²) cosine curvature; both
/// figures are reported.
fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let (align_err, expert_err, count) = gradient_errors(1e-4)?;
    let (coarse_align, coarse_expert, _) = gradient_errors(1e-3)?;
    let elapsed = t0.elapsed();
    check(
        align_err < 1e-3 && expert_err < 1e-3 && elapsed < Duration::from_secs(120),
        format!(
            "step 1e-4: alignment/pixels max rel err {align_err:.2e}, expert loss/{count} params max rel err {expert_err:.2e} \
             (step 1e-3: {coarse_align:.2e}, {coarse_expert:.2e}); {elapsed:.1?}"
        ),
    )
}

// ---- 5 ----

/// Reference round procedure: every round, each source offers its best
/// unused candidate (higher score, then lower augmentation id); when the
/// offers exceed the open slots, the subset chosen is found by enumerating
/// all subsets of the right size and keeping the best under the documented
/// order (score descending, then source id, then augmentation id).
fn brute_force_class(class: usize, cands: &[(usize, usize, f64)], ipc: usize) -> Vec<Selection> {
    let key = |c: &(usize, usize, f64)| (std::cmp::Reverse(OrdF(c.2)), c.0, c.1);
    let mut used = vec![false; cands.len()];
    let mut out = Vec::new();
    let mut round = 1;
    while out.len() < ipc {
        let mut sources: Vec<usize> = cands.iter().map(|c| c.0).collect();
        sources.sort_unstable();
        sources.dedup();
        let mut offers: Vec<usize> = Vec::new();
        for s in sources {
            let best = (0..cands.len())
                .filter(|&j| !used[j] && cands[j].0 == s)
                .min_by_key(|&j| (std::cmp::Reverse(OrdF(cands[j].2)), cands[j].1));
            offers.extend(best);
        }
        if offers.is_empty() {
            break;
        }
        let open = ipc - out.len();
        let chosen: Vec<usize> = if offers.len() <= open {
            offers.clone()
        } else {
            let mut best: Option<Vec<usize>> = None;
            for mask in 0u32..(1 << offers.len()) {
                if mask.count_ones() as usize != open {
                    continue;
                }
                let mut subset: Vec<usize> = (0..offers.len())
                    .filter(|b| mask >> b & 1 == 1)
                    .map(|b| offers[b])
                    .collect();
                subset.sort_by_key(|&j| key(&cands[j]));
                let better = match &best {
                    None => true,
                    Some(b) => {
                        subset.iter().map(|&j| key(&cands[j])).collect::<Vec<_>>()
                            < b.iter().map(|&j| key(&cands[j])).collect::<Vec<_>>()
                    }
                };
                if better {
                    best = Some(subset);
                }
            }
            best.unwrap()
        };
        let mut chosen = chosen;
        chosen.sort_by_key(|&j| key(&cands[j]));
        for j in chosen {
            used[j] = true;
            out.push(Selection {
                class,
                source_id: cands[j].0,
                aug_id: cands[j].1,
                score: cands[j].2,
                round,
            });
        }
        round += 1;
    }
    out
}

#[derive(PartialEq, PartialOrd, Clone, Copy)]
struct OrdF(f64);
impl Eq for OrdF {}
impl Ord for OrdF {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&o.0)
    }
}

fn pool_of(classes: &[Vec<(usize, usize, f64)>], rng: &mut ChaCha8Rng) -> CandidatePool {
    CandidatePool {
        shape: [1, 1, 1],
        classes: classes
            .iter()
            .map(|cs| {
                let mut v: Vec<Candidate> = cs
                    .iter()
                    .map(|&(s, a, score)| Candidate {
                        source_id: s,
                        aug_id: a,
                        image: vec![0.5],
                        score,
                        used: false,
                        placeholder: false,
                    })
                    .collect();
                v.shuffle(rng);
                v
            })
            .collect(),
    }
}

fn class_cands(sources: usize, augs: usize, scores: &[f64]) -> Vec<(usize, usize, f64)> {
    (0..sources)
        .flat_map(|s| (0..augs).map(move |a| (100 + 7 * s, a, 0.0)))
        .zip(scores)
        .map(|((s, a, _), &v)| (s, a, v))
        .collect()
}

fn selection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cases = 0usize;
    let mut compare = |classes: Vec<Vec<(usize, usize, f64)>>,
                       ipc: usize,
                       rng: &mut ChaCha8Rng|
     -> Result<(), String> {
        let mut pool = pool_of(&classes, rng);
        let got = multi_round_select(&mut pool, ipc).map_err(|e| e.to_string())?;
        for (c, cs) in classes.iter().enumerate() {
            let want = brute_force_class(c, cs, ipc);
            if got[c] != want {
                return Err(format!(
                    "class {c}, ipc {ipc}, pool {cs:?}: got {:?}, want {want:?}",
                    got[c]
                ));
            }
        }
        cases += 1;
        Ok(())
    };
    // Every score pattern over {0, 1, 2} for single-class pools of at most
    // six candidates: dense ties.
    for sources in 1..=6 {
        for augs in 1..=3 {
            let n = sources * augs;
            if n > 6 {
                continue;
            }
            for code in 0..3usize.pow(n as u32) {
                let scores: Vec<f64> = (0..n)
                    .map(|i| -(((code / 3usize.pow(i as u32)) % 3) as f64))
                    .collect();
                for ipc in 1..=5 {
                    compare(vec![class_cands(sources, augs, &scores)], ipc, &mut rng)?;
                }
            }
        }
    }
    // Random multi-class pools over every shape, with tie-heavy scores.
    for _ in 0..3000 {
        let k = rng.random_range(1..=4);
        let classes: Vec<_> = (0..k)
            .map(|_| {
                let (s, a) = (rng.random_range(1..=6), rng.random_range(1..=3));
                let scores: Vec<f64> = (0..s * a)
                    .map(|_| {
                        if rng.random_bool(0.5) {
                            -(rng.random_range(0..3) as f64)
                        } else {
                            -rng.random_range(0.0..3.0)
                        }
                    })
                    .collect();
                class_cands(s, a, &scores)
            })
            .collect();
        let ipc = rng.random_range(1..=5);
        compare(classes, ipc, &mut rng)?;
    }
    check(
        true,
        format!("{cases} pools matched the exhaustive reference"),
    )
}

// ---- 6 ----

fn recovery_descent() -> Outcome {
    let src = gen_blobs(5, 100, [3, 16, 16], 1, BlobStyle::default()).unwrap();
    let lt = make_long_tail(
        &src,
        &LongTailSpec {
            num_classes: 5,
            largest_class_count: 100,
            imbalance_factor: 10.0,
            seed: 2,
        },
    )
    .unwrap();
    let spec = ConvNetSpec::new(3, 16, [3, 16, 16], 5);
    let (observer, _) = ltdd::expert::train_expert(
        &lt,
        spec,
        &ExpertTrainConfig {
            iterations: 200,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let bundle =
        recalibrate(&observer, &lt, RecalibOptions::default()).map_err(|e| e.to_string())?;
    let init = confidence_init(
        &observer.model,
        &lt,
        &InitConfig {
            ipc: 4,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let before = observer.to_bytes();
    let cfg = RecoveryConfig {
        iterations: 1000,
        ..Default::default()
    };
    let (_, report) =
        recover(&init.images, &init.labels, &observer, &bundle, &cfg).map_err(|e| e.to_string())?;
    let unchanged = observer.to_bytes() == before;
    check(
        report.final_loss <= 0.1 * report.initial && unchanged,
        format!(
            "alignment loss {:.3} -> {:.3} (ratio {:.3}) in {} iterations; observer bytes unchanged: {unchanged}",
            report.initial,
            report.final_loss,
            report.final_loss / report.initial,
            cfg.iterations
        ),
    )
}

// ---- 7 ----

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

fn end_to_end_gain() -> Outcome {
    let t0 = Instant::now();
    let base_kv = KeyValues::parse(
        &std::fs::read_to_string(workspace_root().join("configs/desk.txt"))
            .map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let variants: [(&str, Option<&str>); 5] = [
        ("full", None),
        ("no_debias", Some("ablation.no_debias")),
        ("no_recalib", Some("ablation.no_recalib")),
        ("naive_init", Some("ablation.naive_init")),
        ("random_real", Some("baseline.random_real")),
    ];
    let mut scores: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..3u64 {
        let full_dir = tmp.path().join(format!("s{seed}/full"));
        for (name, toggle) in variants {
            let dir = tmp.path().join(format!("s{seed}/{name}"));
            if toggle.is_some() {
                // Start from the full run's artifacts: shared stages are
                // skipped by their provenance records.
                copy_dir(&full_dir, &dir).map_err(|e| e.to_string())?;
            }
            let mut kv = base_kv.clone();
            kv.set("seed", seed);
            if let Some(t) = toggle {
                kv.set(t, true);
            }
            let cfg = PipelineConfig::from_kv(&kv, Some(dir)).map_err(|e| e.to_string())?;
            let summary = run_pipeline(&cfg).map_err(|e| format!("{name}, seed {seed}: {e}"))?;
            scores
                .entry(name)
                .or_default()
                .push(summary.report.balanced);
        }
    }
    let mean = |k: &str| scores[k].iter().sum::<f64>() / scores[k].len() as f64 * 100.0;
    let full = mean("full");
    let elapsed = t0.elapsed();
    let mut ok = full - mean("random_real") >= 5.0 && elapsed < Duration::from_secs(30 * 60);
    let mut detail = format!("balanced accuracy over 3 seeds: full {full:.1}");
    for (name, _) in &variants[1..] {
        let m = mean(name);
        detail.push_str(&format!(", {name} {m:.1} ({:+.1})", full - m));
        if *name != "random_real" {
            ok &= full - m >= 1.0;
        }
    }
    detail.push_str(&format!(
        "; per seed {scores:?}; {:.1} min",
        elapsed.as_secs_f64() / 60.0
    ));
    check(ok, detail)
}

// ---- 8 ----

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            collect_files(root, &p, out);
        } else {
            out.insert(
                p.strip_prefix(root).unwrap().display().to_string(),
                std::fs::read(&p).unwrap(),
            );
        }
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("config.txt");
    std::fs::write(
        &config,
        "data.classes=4\ndata.height=8\ndata.width=8\ndata.test_per_class=10\nlongtail.largest_class_count=40\n\
         model.depth=2\nmodel.width=8\nobserver.iterations=60\nteacher.iterations=60\nrecalib.shards=3\n\
         init.ipc=3\nrecovery.iterations=60\nstudent.epochs=20\neval.students=2\nseed=5\n",
    )
    .map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_ltdd");
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        for args in [
            vec![
                "run",
                "--deterministic",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
            vec!["report", out.to_str().unwrap()],
        ] {
            let status = Command::new(bin)
                .args(&args)
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(format!(
                    "`ltdd {}` failed: {}",
                    args.join(" "),
                    String::from_utf8_lossy(&status.stderr)
                ));
            }
        }
        let mut files = BTreeMap::new();
        collect_files(&out, &out, &mut files);
        trees.push(files);
    }
    let differing: Vec<&String> = trees[0]
        .iter()
        .filter(|(k, v)| trees[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let same_names = trees[0].keys().eq(trees[1].keys());
    let required = [
        "distilled/images.bin",
        "distilled/soft_labels.bin",
        "distilled/report.csv",
        "summary.csv",
        "per_class.csv",
        "manifest.txt",
    ];
    let present = required.iter().all(|r| trees[0].contains_key(*r));
    check(
        differing.is_empty() && same_names && present,
        format!(
            "{} files compared, differing: {differing:?}",
            trees[0].len()
        ),
    )
}
