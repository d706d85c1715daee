//! Confidence-guided multi-round initialization of the synthetic set.
//!
//! Every real image of a class yields several random resized crops. The
//! teacher scores each crop by its negative cross-entropy against the class.
//! Selection then proceeds in rounds: each source image offers its best
//! unused crop, and if the offers exceed the remaining slots the best offers
//! win. Rounds repeat until the class has `ipc` images.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{random_resized_crop, ResizedCropConfig};
use crate::codec::derive_seed;
use crate::data::LongTailDataset;
use crate::error::{invalid, shape, Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Extra augmentation batches generated for a class whose pool runs dry.
pub const REGENERATION_BUDGET: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Dataset index of the source image.
    pub source_id: usize,
    pub aug_id: usize,
    pub image: Vec<f32>,
    /// Negative cross-entropy under the teacher; `-inf` until scored.
    pub score: f64,
    pub used: bool,
    /// Zero-filled padding entry; never scored or selected.
    pub placeholder: bool,
}

impl Candidate {
    fn placeholder(aug_id: usize, len: usize) -> Self {
        Self {
            source_id: usize::MAX,
            aug_id,
            image: vec![0.0; len],
            score: f64::NEG_INFINITY,
            used: true,
            placeholder: true,
        }
    }
}

/// Candidates of every class, grouped by source image.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub shape: [usize; 3],
    pub classes: Vec<Vec<Candidate>>,
}

impl CandidatePool {
    pub fn placeholder_count(&self) -> usize {
        self.classes
            .iter()
            .flatten()
            .filter(|c| c.placeholder)
            .count()
    }

    /// Number of distinct real source images of `class`.
    pub fn sources(&self, class: usize) -> usize {
        let mut ids: Vec<usize> = self.classes[class]
            .iter()
            .filter(|c| !c.placeholder)
            .map(|c| c.source_id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// One chosen candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub class: usize,
    pub source_id: usize,
    pub aug_id: usize,
    pub score: f64,
    /// 1-based selection round.
    pub round: usize,
}

/// `n_aug` seeded random resized crops of one CHW image.
pub fn gen_candidates(
    image: &[f32],
    shape: [usize; 3],
    n_aug: usize,
    cfg: &ResizedCropConfig,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    if n_aug == 0 {
        return Err(invalid("n_aug must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_aug)
        .map(|_| random_resized_crop(image, shape, cfg, &mut rng))
        .collect()
}

fn crops_for(
    dataset: &LongTailDataset,
    source: usize,
    first_aug: usize,
    n_aug: usize,
    cfg: &ResizedCropConfig,
    seed: u64,
) -> Result<Vec<Candidate>> {
    let s = derive_seed(seed, &[source as u64, first_aug as u64]);
    let crops = gen_candidates(
        &dataset.image_f32(source),
        dataset.image_shape(),
        n_aug,
        cfg,
        s,
    )?;
    Ok(crops
        .into_iter()
        .enumerate()
        .map(|(k, image)| Candidate {
            source_id: source,
            aug_id: first_aug + k,
            image,
            score: f64::NEG_INFINITY,
            used: false,
            placeholder: false,
        })
        .collect())
}

/// Candidate pool over the whole dataset. When `pad_placeholders` is set,
/// each class is padded with zero placeholders up to the largest class's
/// candidate count.
pub fn build_pool(
    dataset: &LongTailDataset,
    n_aug: usize,
    cfg: &ResizedCropConfig,
    seed: u64,
    pad_placeholders: bool,
) -> Result<CandidatePool> {
    let mut classes = Vec::with_capacity(dataset.num_classes());
    for c in 0..dataset.num_classes() {
        let mut cands = Vec::new();
        for &i in dataset.class_indices(c) {
            cands.extend(crops_for(dataset, i, 0, n_aug, cfg, seed)?);
        }
        classes.push(cands);
    }
    if pad_placeholders {
        let widest = classes.iter().map(Vec::len).max().unwrap_or(0);
        let len = dataset.pixels_per_image();
        for cands in &mut classes {
            let missing = widest - cands.len();
            cands.extend((0..missing).map(|k| Candidate::placeholder(k, len)));
        }
    }
    Ok(CandidatePool {
        shape: dataset.image_shape(),
        classes,
    })
}

/// Teacher scores `log softmax(teacher(x))[class]` for every unscored real
/// candidate, in inference mode and batches of `batch_size`.
pub fn score_pool(teacher: &Model, pool: &mut CandidatePool, batch_size: usize) -> Result<()> {
    if pool.shape != teacher.spec().input_shape() {
        return Err(shape(format!(
            "pool images {:?} vs teacher {}",
            pool.shape,
            teacher.spec()
        )));
    }
    if pool.classes.len() != teacher.spec().num_classes {
        return Err(shape(format!(
            "{} pool classes vs {} teacher classes",
            pool.classes.len(),
            teacher.spec().num_classes
        )));
    }
    let k = teacher.spec().num_classes;
    let [c, h, w] = pool.shape;
    let todo: Vec<(usize, usize)> = pool
        .classes
        .iter()
        .enumerate()
        .flat_map(|(cl, cands)| {
            cands
                .iter()
                .enumerate()
                .filter(|(_, x)| !x.placeholder && x.score == f64::NEG_INFINITY)
                .map(move |(j, _)| (cl, j))
        })
        .collect();
    for chunk in todo.chunks(batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * c * h * w);
        for &(cl, j) in chunk {
            data.extend_from_slice(&pool.classes[cl][j].image);
        }
        let logits =
            teacher.predict(&Tensor::new(vec![chunk.len(), c, h, w], data)?, chunk.len())?;
        for (row, &(cl, j)) in logits.data().chunks(k).zip(chunk) {
            let score = log_prob(row, cl);
            if !score.is_finite() {
                return Err(Error::NonFinite(format!(
                    "teacher score of class {cl} candidate {j}"
                )));
            }
            pool.classes[cl][j].score = score;
        }
    }
    Ok(())
}

fn log_prob(logits: &[f32], class: usize) -> f64 {
    let m = logits
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let lse = m + logits
        .iter()
        .map(|&v| (v as f64 - m).exp())
        .sum::<f64>()
        .ln();
    logits[class] as f64 - lse
}

/// Ordering of offers: higher score first, then lower source id, then lower
/// augmentation id.
fn better(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.source_id.cmp(&b.source_id))
        .then(a.aug_id.cmp(&b.aug_id))
}

/// Runs selection rounds on one class until `need` more candidates are
/// chosen or no source has an unused candidate left. Rounds are numbered
/// from `first_round`. Chosen candidates are marked used.
pub fn select_rounds(
    class: usize,
    cands: &mut [Candidate],
    need: usize,
    first_round: usize,
) -> Vec<Selection> {
    let mut out = Vec::with_capacity(need);
    let mut round = first_round;
    while out.len() < need {
        // Best unused candidate of each source image.
        let mut offers: Vec<usize> = Vec::new();
        for j in 0..cands.len() {
            let cand = &cands[j];
            if cand.used || cand.placeholder {
                continue;
            }
            match offers
                .iter_mut()
                .find(|o| cands[**o].source_id == cand.source_id)
            {
                Some(o) if better(cand, &cands[*o]).is_lt() => *o = j,
                Some(_) => {}
                None => offers.push(j),
            }
        }
        if offers.is_empty() {
            break;
        }
        offers.sort_by(|&a, &b| better(&cands[a], &cands[b]));
        offers.truncate(need - out.len());
        for j in offers {
            cands[j].used = true;
            let c = &cands[j];
            out.push(Selection {
                class,
                source_id: c.source_id,
                aug_id: c.aug_id,
                score: c.score,
                round,
            });
        }
        round += 1;
    }
    out
}

/// Multi-round selection of `ipc` candidates per class from a scored pool.
/// Classes whose pool runs dry return fewer than `ipc` selections.
pub fn multi_round_select(pool: &mut CandidatePool, ipc: usize) -> Result<Vec<Vec<Selection>>> {
    if ipc == 0 {
        return Err(invalid("ipc must be at least 1"));
    }
    let mut all = Vec::with_capacity(pool.classes.len());
    for (class, cands) in pool.classes.iter_mut().enumerate() {
        if cands.iter().all(|c| c.placeholder) {
            return Err(Error::InsufficientSamples(format!(
                "class {class} has no real images"
            )));
        }
        all.push(select_rounds(class, cands, ipc, 1));
    }
    Ok(all)
}

/// Stacks the selected candidates class by class into an `[C·ipc, c, h, w]`
/// tensor with matching hard labels.
pub fn assemble_init(
    pool: &CandidatePool,
    selections: &[Vec<Selection>],
    ipc: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let [c, h, w] = pool.shape;
    let mut data = Vec::with_capacity(selections.len() * ipc * c * h * w);
    let mut labels = Vec::with_capacity(selections.len() * ipc);
    for (class, sel) in selections.iter().enumerate() {
        if sel.len() != ipc {
            return Err(Error::InsufficientSamples(format!(
                "class {class}: {} of {ipc} images after regeneration",
                sel.len()
            )));
        }
        for s in sel {
            let cand = pool.classes[class]
                .iter()
                .find(|x| !x.placeholder && x.source_id == s.source_id && x.aug_id == s.aug_id)
                .ok_or_else(|| invalid(format!("selection {s:?} not in pool")))?;
            data.extend_from_slice(&cand.image);
            labels.push(class);
        }
    }
    Ok((Tensor::new(vec![labels.len(), c, h, w], data)?, labels))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub ipc: usize,
    pub n_aug: usize,
    pub crop: ResizedCropConfig,
    pub score_batch: usize,
    pub pad_placeholders: bool,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            ipc: 10,
            n_aug: 8,
            crop: ResizedCropConfig::default(),
            score_batch: 256,
            pad_placeholders: true,
            seed: 0,
        }
    }
}

/// Initial synthetic images with labels and the selection record.
#[derive(Debug, Clone, PartialEq)]
pub struct InitResult {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub selections: Vec<Vec<Selection>>,
}

/// Full initialization: build and score the pool, select, and regenerate
/// fresh augmentations (up to [`REGENERATION_BUDGET`] times) for classes
/// that run short.
pub fn confidence_init(
    teacher: &Model,
    dataset: &LongTailDataset,
    cfg: &InitConfig,
) -> Result<InitResult> {
    let mut pool = build_pool(
        dataset,
        cfg.n_aug,
        &cfg.crop,
        cfg.seed,
        cfg.pad_placeholders,
    )?;
    score_pool(teacher, &mut pool, cfg.score_batch)?;
    let mut selections = multi_round_select(&mut pool, cfg.ipc)?;
    for attempt in 1..=REGENERATION_BUDGET {
        let short: Vec<usize> = (0..selections.len())
            .filter(|&c| selections[c].len() < cfg.ipc)
            .collect();
        if short.is_empty() {
            break;
        }
        for &class in &short {
            let first_aug = cfg.n_aug * (attempt + 1);
            let fresh = derive_seed(cfg.seed, &[0x7e6e, attempt as u64]);
            for &i in dataset.class_indices(class) {
                let extra = crops_for(dataset, i, first_aug, cfg.n_aug, &cfg.crop, fresh)?;
                pool.classes[class].extend(extra);
            }
        }
        score_pool(teacher, &mut pool, cfg.score_batch)?;
        for &class in &short {
            let next_round = selections[class].last().map_or(1, |s| s.round + 1);
            let need = cfg.ipc - selections[class].len();
            let more = select_rounds(class, &mut pool.classes[class], need, next_round);
            selections[class].extend(more);
        }
    }
    let (images, labels) = assemble_init(&pool, &selections, cfg.ipc)?;
    Ok(InitResult {
        images,
        labels,
        selections,
    })
}

/// One random resized crop of `ipc` distinct random real images per class,
/// without scoring. Errors when a class has fewer than `ipc` images.
pub fn naive_init(
    dataset: &LongTailDataset,
    ipc: usize,
    crop: &ResizedCropConfig,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let picks = pick_per_class(dataset, ipc, seed)?;
    let [c, h, w] = dataset.image_shape();
    let mut data = Vec::with_capacity(picks.len() * c * h * w);
    let mut labels = Vec::with_capacity(picks.len());
    for &i in &picks {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        data.extend(random_resized_crop(
            &dataset.image_f32(i),
            dataset.image_shape(),
            crop,
            &mut rng,
        )?);
        labels.push(dataset.label(i));
    }
    Ok((Tensor::new(vec![picks.len(), c, h, w], data)?, labels))
}

/// `ipc` distinct random real images per class, uncropped.
pub fn random_real_subset(
    dataset: &LongTailDataset,
    ipc: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let picks = pick_per_class(dataset, ipc, seed)?;
    let labels = picks.iter().map(|&i| dataset.label(i)).collect();
    Ok((dataset.batch(&picks), labels))
}

fn pick_per_class(dataset: &LongTailDataset, ipc: usize, seed: u64) -> Result<Vec<usize>> {
    if ipc == 0 {
        return Err(invalid("ipc must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::with_capacity(dataset.num_classes() * ipc);
    for c in 0..dataset.num_classes() {
        let pool = dataset.class_indices(c);
        if pool.len() < ipc {
            return Err(Error::InsufficientSamples(format!(
                "class {c} has {} images, ipc is {ipc}",
                pool.len()
            )));
        }
        picks.extend(
            index::sample(&mut rng, pool.len(), ipc)
                .into_iter()
                .map(|k| pool[k]),
        );
    }
    Ok(picks)
}

pub fn write_selection_csv(path: &Path, selections: &[Vec<Selection>]) -> Result<()> {
    crate::codec::create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "class",
        "source_image_id",
        "augmentation_id",
        "score",
        "round",
    ])?;
    for s in selections.iter().flatten() {
        w.write_record([
            s.class.to_string(),
            s.source_id.to_string(),
            s.aug_id.to_string(),
            s.score.to_string(),
            s.round.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(source_id: usize, aug_id: usize, score: f64) -> Candidate {
        Candidate {
            source_id,
            aug_id,
            image: vec![1.0],
            score,
            used: false,
            placeholder: false,
        }
    }

    fn picked(sel: &[Selection]) -> Vec<(usize, usize, usize)> {
        sel.iter()
            .map(|s| (s.source_id, s.aug_id, s.round))
            .collect()
    }

    #[test]
    fn one_source_takes_best_augs_in_order() {
        let mut c = vec![
            cand(0, 0, -0.5),
            cand(0, 1, -0.1),
            cand(0, 2, -0.9),
            cand(0, 3, -0.3),
            cand(0, 4, -2.0),
        ];
        let sel = select_rounds(0, &mut c, 3, 1);
        assert_eq!(picked(&sel), vec![(0, 1, 1), (0, 3, 2), (0, 0, 3)]);
    }

    #[test]
    fn three_sources_two_augs_ipc_four() {
        let mut c = vec![
            cand(0, 0, -0.2),
            cand(0, 1, -0.4),
            cand(1, 0, -0.6),
            cand(1, 1, -0.3),
            cand(2, 0, -0.1),
            cand(2, 1, -0.9),
        ];
        let sel = select_rounds(0, &mut c, 4, 1);
        // Round 1: per-image maxima; round 2: best of the second-best offers.
        assert_eq!(
            picked(&sel),
            vec![(2, 0, 1), (0, 0, 1), (1, 1, 1), (0, 1, 2)]
        );
    }

    #[test]
    fn ties_prefer_lower_ids_and_placeholders_are_skipped() {
        let mut c = vec![
            cand(3, 1, -0.5),
            cand(3, 0, -0.5),
            cand(1, 0, -0.5),
            Candidate::placeholder(0, 1),
        ];
        let sel = select_rounds(0, &mut c, 1, 1);
        assert_eq!(picked(&sel), vec![(1, 0, 1)]);
        let sel = select_rounds(0, &mut c, 5, 2);
        assert_eq!(picked(&sel), vec![(3, 0, 2), (3, 1, 3)]);
    }

    #[test]
    fn empty_class_is_an_error() {
        let mut pool = CandidatePool {
            shape: [1, 1, 1],
            classes: vec![vec![cand(0, 0, -1.0)], vec![Candidate::placeholder(0, 1)]],
        };
        assert!(matches!(
            multi_round_select(&mut pool, 1),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn log_prob_of_uniform_and_certain() {
        assert!((log_prob(&[0.0; 4], 2) + 4f64.ln()).abs() < 1e-12);
        assert!(log_prob(&[0.0, 200.0], 1).abs() < 1e-12);
    }
}
