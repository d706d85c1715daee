//! End-to-end orchestration with per-stage provenance caching.
//!
//! Every stage writes its artifacts under the output directory and a record
//! `stages/<name>.txt` holding its configuration, the hashes of its input
//! files, a stage key over both, and the hashes of its outputs. A stage whose
//! record key matches and whose outputs still hash as recorded is skipped; an
//! output that exists but hashes differently aborts the run with a
//! provenance error naming the stage. `manifest.txt` lists every artifact of
//! the current configuration with its hash.

use std::path::{Path, PathBuf};

use crate::augment::ResizedCropConfig;
use crate::codec::{self, derive_seed, sha256_hex};
use crate::config::KeyValues;
use crate::data::{
    balanced_split, gen_blobs, load_dataset, load_manifest, make_long_tail, save_dataset,
    BlobStyle, LongTailDataset, LongTailSpec,
};
use crate::distill::{relabel, DistilledSet, LabeledImages};
use crate::error::{Error, Result};
use crate::eval::{evaluate, train_student, EvalReport, StudentConfig};
use crate::expert::{train_expert, write_train_log, ExpertCheckpoint, ExpertTrainConfig};
use crate::init::{
    confidence_init, naive_init, random_real_subset, write_selection_csv, InitConfig,
};
use crate::model::ConvNetSpec;
use crate::recalib::{recalibrate, RealStatsBundle, RecalibOptions};
use crate::recovery::{recover, RecoveryConfig};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "distilled/report.csv";

const TRAIN: &str = "data/train.ltdd";
const TEST: &str = "data/test.ltdd";
const OBSERVER: &str = "experts/observer.ckpt";
const OBSERVER_LOG: &str = "experts/observer_log.csv";
const TEACHER: &str = "experts/teacher.ckpt";
const TEACHER_LOG: &str = "experts/teacher_log.csv";
const BUNDLE: &str = "stats/bundle.bin";
const INIT: &str = "init/init.bin";
const SELECTION: &str = "init/selection.csv";
const RECOVERED: &str = "recover/recovered.bin";
const ALIGNMENT: &str = "recover/alignment.csv";
const DISTILLED: &str = "distilled";
const DISTILLED_FILES: [&str; 5] = [
    "distilled/images.bin",
    "distilled/hard_labels.bin",
    "distilled/soft_labels.bin",
    "distilled/provenance.txt",
    "distilled/labels.csv",
];

// Seed stream tags under the global seed.
const SEED_BLOBS: u64 = 0;
const SEED_LONG_TAIL: u64 = 1;
const SEED_TEST_SPLIT: u64 = 2;
const SEED_OBSERVER: u64 = 3;
const SEED_TEACHER: u64 = 4;
const SEED_INIT: u64 = 5;
const SEED_RECOVERY: u64 = 6;
const SEED_STUDENT: u64 = 7;
const SEED_RANDOM_REAL: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Procedural blobs, `per_class` images of every class before the split.
    Blobs { per_class: usize, style: BlobStyle },
    /// A dataset file in the binary format.
    File(PathBuf),
    /// A CSV manifest of raw per-sample files.
    Manifest(PathBuf),
}

/// Single-ablation switches; each replaces one component by its plain
/// counterpart and leaves the other stages' configurations untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablations {
    /// Experts trained with plain cross-entropy.
    pub no_debias: bool,
    /// Observer running statistics used as the target bundle.
    pub no_recalib: bool,
    /// Random real crops without scoring or rounds.
    pub naive_init: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub source: DataSource,
    pub num_classes: usize,
    pub image_shape: [usize; 3],
    /// Balanced test images per class, split off before the long tail.
    pub test_per_class: usize,
    /// Separate balanced test set; when present nothing is split off.
    pub test_path: Option<PathBuf>,
    pub long_tail: LongTailSpec,
    pub depth: usize,
    pub width: usize,
    pub observer: ExpertTrainConfig,
    pub teacher: ExpertTrainConfig,
    pub recalib: RecalibOptions,
    pub init: InitConfig,
    pub recovery: RecoveryConfig,
    pub student: StudentConfig,
    pub students: usize,
    pub relabel_batch: usize,
    pub ablations: Ablations,
    /// Replace distillation by `ipc` random real images with one-hot labels
    /// trained with plain cross-entropy.
    pub random_real_baseline: bool,
    /// Single-threaded, bit-exact execution.
    pub deterministic: bool,
}

/// Keys accepted at the top level or as section prefixes.
const TOP_KEYS: &[&str] = &[
    "output_dir",
    "seed",
    "deterministic",
    "data.source",
    "data.path",
    "data.test_path",
    "data.classes",
    "data.channels",
    "data.height",
    "data.width",
    "data.test_per_class",
    "data.blobs.per_class",
    "data.blobs.jitter",
    "data.blobs.noise",
    "data.blobs.distractor",
    "longtail.largest_class_count",
    "longtail.imbalance_factor",
    "model.depth",
    "model.width",
    "recalib.batch_size",
    "recalib.shards",
    "recalib.law_of_total_variance",
    "init.ipc",
    "init.n_aug",
    "init.score_batch",
    "init.pad_placeholders",
    "init.seed",
    "init.crop.area_min",
    "init.crop.area_max",
    "init.crop.ratio_min",
    "init.crop.ratio_max",
    "init.crop.flip_prob",
    "relabel.batch_size",
    "eval.students",
    "ablation.no_debias",
    "ablation.no_recalib",
    "ablation.naive_init",
    "baseline.random_real",
];
const SECTIONS: &[&str] = &["observer.", "teacher.", "recovery.", "student."];

/// Parses one `<name>.` section, naming the section in configuration errors.
fn parse_section<T>(
    kv: &KeyValues,
    name: &str,
    parse: impl FnOnce(&KeyValues) -> Result<T>,
) -> Result<T> {
    parse(&kv.section(name)).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("section `{name}`: {msg}")),
        other => other,
    })
}

fn section_seed(kv: &KeyValues, section: &str, derived: u64) -> Result<u64> {
    Ok(kv.get(&format!("{section}.seed"))?.unwrap_or(derived))
}

impl PipelineConfig {
    /// Defaults for every optional key, writing to `output_dir`.
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        Self::from_kv(&KeyValues::new(), Some(output_dir.into())).expect("defaults validate")
    }

    pub fn parse(text: &str, output_dir: Option<PathBuf>) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?, output_dir)
    }

    pub fn load(path: &Path, output_dir: Option<PathBuf>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Path {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, output_dir)
    }

    /// Builds a configuration from dotted keys. `output_dir` overrides the
    /// `output_dir` key. Sub-configuration seeds derive from the global seed
    /// unless given explicitly.
    pub fn from_kv(kv: &KeyValues, output_dir: Option<PathBuf>) -> Result<Self> {
        if let Some(k) = kv
            .keys()
            .find(|k| !TOP_KEYS.contains(k) && !SECTIONS.iter().any(|s| k.starts_with(s)))
        {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let output_dir = match output_dir {
            Some(d) => d,
            None => kv.require::<PathBuf>("output_dir")?,
        };
        let seed: u64 = kv.get_or("seed", 0)?;
        let test_per_class = kv.get_or("data.test_per_class", 50)?;
        let largest: usize = kv.get_or("longtail.largest_class_count", 200)?;
        let source = match kv.raw("data.source").unwrap_or("blobs") {
            "blobs" => {
                let d = BlobStyle::default();
                DataSource::Blobs {
                    per_class: kv.get_or("data.blobs.per_class", largest + test_per_class)?,
                    style: BlobStyle {
                        jitter: kv.get_or("data.blobs.jitter", d.jitter)?,
                        noise: kv.get_or("data.blobs.noise", d.noise)?,
                        distractor: kv.get_or("data.blobs.distractor", d.distractor)?,
                    },
                }
            }
            "file" => DataSource::File(kv.require("data.path")?),
            "manifest" => DataSource::Manifest(kv.require("data.path")?),
            other => return Err(Error::Config(format!("unknown data source `{other}`"))),
        };
        let num_classes = kv.get_or("data.classes", 10)?;
        let mut observer = parse_section(kv, "observer", ExpertTrainConfig::from_kv)?;
        observer.seed = section_seed(kv, "observer", derive_seed(seed, &[SEED_OBSERVER]))?;
        let mut teacher = parse_section(kv, "teacher", ExpertTrainConfig::from_kv)?;
        teacher.seed = section_seed(kv, "teacher", derive_seed(seed, &[SEED_TEACHER]))?;
        let mut recovery = parse_section(kv, "recovery", RecoveryConfig::from_kv)?;
        recovery.seed = section_seed(kv, "recovery", derive_seed(seed, &[SEED_RECOVERY]))?;
        let dc = ResizedCropConfig::default();
        let crop = ResizedCropConfig {
            area: (
                kv.get_or("init.crop.area_min", dc.area.0)?,
                kv.get_or("init.crop.area_max", dc.area.1)?,
            ),
            ratio: (
                kv.get_or("init.crop.ratio_min", dc.ratio.0)?,
                kv.get_or("init.crop.ratio_max", dc.ratio.1)?,
            ),
            flip_prob: kv.get_or("init.crop.flip_prob", dc.flip_prob)?,
        };
        crop.validate().map_err(|e| Error::Config(e.to_string()))?;
        let di = InitConfig::default();
        let init = InitConfig {
            ipc: kv.get_or("init.ipc", di.ipc)?,
            n_aug: kv.get_or("init.n_aug", di.n_aug)?,
            crop,
            score_batch: kv.get_or("init.score_batch", di.score_batch)?,
            pad_placeholders: kv.get_or("init.pad_placeholders", di.pad_placeholders)?,
            seed: section_seed(kv, "init", derive_seed(seed, &[SEED_INIT]))?,
        };
        let dr = RecalibOptions::default();
        let deterministic = kv.get_or("deterministic", false)?;
        let cfg = Self {
            output_dir,
            seed,
            source,
            num_classes,
            image_shape: [
                kv.get_or("data.channels", 3)?,
                kv.get_or("data.height", 16)?,
                kv.get_or("data.width", 16)?,
            ],
            test_per_class,
            test_path: kv.get("data.test_path")?,
            long_tail: LongTailSpec {
                num_classes,
                largest_class_count: largest,
                imbalance_factor: kv.get_or("longtail.imbalance_factor", 10.0)?,
                seed: derive_seed(seed, &[SEED_LONG_TAIL]),
            },
            depth: kv.get_or("model.depth", 3)?,
            width: kv.get_or("model.width", 16)?,
            observer,
            teacher,
            recalib: RecalibOptions {
                batch_size: kv.get_or("recalib.batch_size", dr.batch_size)?,
                shards: kv.get_or("recalib.shards", dr.shards)?,
                law_of_total_variance: kv
                    .get_or("recalib.law_of_total_variance", dr.law_of_total_variance)?,
            },
            init,
            recovery,
            student: parse_section(kv, "student", StudentConfig::from_kv)?,
            students: kv.get_or("eval.students", 1)?,
            relabel_batch: kv.get_or("relabel.batch_size", 256)?,
            ablations: Ablations {
                no_debias: kv.get_or("ablation.no_debias", false)?,
                no_recalib: kv.get_or("ablation.no_recalib", false)?,
                naive_init: kv.get_or("ablation.naive_init", false)?,
            },
            random_real_baseline: kv.get_or("baseline.random_real", false)?,
            deterministic,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks ranges and that every referenced path exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.long_tail
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.spec()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.init.ipc == 0 || self.init.n_aug == 0 || self.init.score_batch == 0 {
            return bad("init.ipc, init.n_aug and init.score_batch must be at least 1".into());
        }
        if self.recalib.batch_size == 0 || self.recalib.shards == 0 {
            return bad("recalib.batch_size and recalib.shards must be at least 1".into());
        }
        if self.students == 0 || self.relabel_batch == 0 {
            return bad("eval.students and relabel.batch_size must be at least 1".into());
        }
        if self.random_real_baseline && self.ablations != Ablations::default() {
            return bad("the random-real baseline takes no ablation toggles".into());
        }
        if self.test_path.is_none() && self.test_per_class == 0 {
            return bad("data.test_per_class must be at least 1 without data.test_path".into());
        }
        if let DataSource::Blobs { per_class, .. } = self.source {
            if self.test_path.is_none()
                && per_class < self.long_tail.largest_class_count + self.test_per_class
            {
                return bad(format!(
                    "data.blobs.per_class = {per_class} cannot supply {} training and {} test images per class",
                    self.long_tail.largest_class_count, self.test_per_class
                ));
            }
        }
        let paths = match &self.source {
            DataSource::File(p) | DataSource::Manifest(p) => vec![p],
            DataSource::Blobs { .. } => vec![],
        };
        for p in paths.into_iter().chain(&self.test_path) {
            if !p.is_file() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        self.observer.validate()?;
        self.teacher.validate()?;
        self.recovery.validate()?;
        self.student.validate()
    }

    pub fn spec(&self) -> ConvNetSpec {
        ConvNetSpec::new(self.depth, self.width, self.image_shape, self.num_classes)
    }

    fn expert_config(&self, base: &ExpertTrainConfig) -> ExpertTrainConfig {
        if self.ablations.no_debias {
            base.clone().plain_cross_entropy()
        } else {
            base.clone()
        }
    }

    fn student_seeds(&self) -> Vec<u64> {
        (0..self.students as u64)
            .map(|k| derive_seed(self.seed, &[SEED_STUDENT, k]))
            .collect()
    }

    /// Canonical text of the resolved configuration.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed)
            .set("deterministic", self.deterministic)
            .set("data.classes", self.num_classes)
            .set("data.channels", self.image_shape[0])
            .set("data.height", self.image_shape[1])
            .set("data.width", self.image_shape[2])
            .set("data.test_per_class", self.test_per_class)
            .set(
                "longtail.largest_class_count",
                self.long_tail.largest_class_count,
            )
            .set("longtail.imbalance_factor", self.long_tail.imbalance_factor)
            .set("model.depth", self.depth)
            .set("model.width", self.width)
            .set("recalib.batch_size", self.recalib.batch_size)
            .set("recalib.shards", self.recalib.shards)
            .set(
                "recalib.law_of_total_variance",
                self.recalib.law_of_total_variance,
            )
            .set("eval.students", self.students)
            .set("relabel.batch_size", self.relabel_batch)
            .set("ablation.no_debias", self.ablations.no_debias)
            .set("ablation.no_recalib", self.ablations.no_recalib)
            .set("ablation.naive_init", self.ablations.naive_init)
            .set("baseline.random_real", self.random_real_baseline);
        if let Some(p) = &self.test_path {
            kv.set("data.test_path", p.display());
        }
        match &self.source {
            DataSource::Blobs { per_class, style } => {
                kv.set("data.source", "blobs")
                    .set("data.blobs.per_class", per_class)
                    .set("data.blobs.jitter", style.jitter)
                    .set("data.blobs.noise", style.noise)
                    .set("data.blobs.distractor", style.distractor);
            }
            DataSource::File(p) => {
                kv.set("data.source", "file").set("data.path", p.display());
            }
            DataSource::Manifest(p) => {
                kv.set("data.source", "manifest")
                    .set("data.path", p.display());
            }
        }
        kv.insert_section("init", &init_kv(&self.init));
        kv.insert_section("observer", &self.observer.to_kv());
        kv.insert_section("teacher", &self.teacher.to_kv());
        kv.insert_section("recovery", &self.recovery.to_kv());
        kv.insert_section("student", &self.student.to_kv());
        kv
    }
}

fn init_kv(c: &InitConfig) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("ipc", c.ipc)
        .set("n_aug", c.n_aug)
        .set("score_batch", c.score_batch)
        .set("pad_placeholders", c.pad_placeholders)
        .set("crop.area_min", c.crop.area.0)
        .set("crop.area_max", c.crop.area.1)
        .set("crop.ratio_min", c.crop.ratio.0)
        .set("crop.ratio_max", c.crop.ratio.1)
        .set("crop.flip_prob", c.crop.flip_prob)
        .set("seed", c.seed);
    kv
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub stages: Vec<(String, StageOutcome)>,
    pub report: EvalReport,
}

impl RunSummary {
    pub fn all_skipped(&self) -> bool {
        self.stages.iter().all(|(_, o)| *o == StageOutcome::Skipped)
    }
}

/// Hash of a file's bytes, as listed in the manifest.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&codec::read_file(path)?))
}

struct Runner<'a> {
    dir: &'a Path,
    stages: Vec<(String, StageOutcome)>,
    outputs: Vec<String>,
}

impl<'a> Runner<'a> {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Runs `body` unless the stage's record matches `config` and `inputs`
    /// and every output still hashes as recorded.
    fn stage(
        &mut self,
        name: &str,
        config: &KeyValues,
        inputs: &[&str],
        outputs: &[&str],
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<()> {
        let mut record = KeyValues::new();
        record.insert_section("config", config);
        for rel in inputs {
            record.set(format!("input.{rel}"), file_hash(&self.path(rel))?);
        }
        let key = sha256_hex(format!("{name}\n{}", record.to_text()).as_bytes());
        record.set("key", &key);
        let record_path = self.path(&format!("stages/{name}.txt"));
        let mut outcome = StageOutcome::Ran;
        if record_path.is_file() {
            let old = KeyValues::parse(&String::from_utf8_lossy(&codec::read_file(&record_path)?))?;
            if old.raw("key") == Some(key.as_str()) {
                let mut complete = true;
                for rel in outputs {
                    let p = self.path(rel);
                    if !p.is_file() {
                        complete = false;
                        continue;
                    }
                    let expected = old.raw(&format!("output.{rel}")).unwrap_or_default();
                    if file_hash(&p)? != expected {
                        return Err(Error::Provenance {
                            stage: name.to_string(),
                            detail: format!("{rel} does not match its recorded hash"),
                        });
                    }
                }
                if complete {
                    outcome = StageOutcome::Skipped;
                }
            }
        }
        if outcome == StageOutcome::Ran {
            body(self.dir).map_err(|e| match e {
                e @ (Error::Provenance { .. } | Error::Config(_)) => e,
                e => Error::Stage {
                    stage: name.to_string(),
                    source: Box::new(e),
                },
            })?;
            for rel in outputs {
                record.set(format!("output.{rel}"), file_hash(&self.path(rel))?);
            }
            codec::write_file(&record_path, record.to_text().as_bytes())?;
        }
        self.stages.push((name.to_string(), outcome));
        self.outputs.extend(outputs.iter().map(|s| s.to_string()));
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<()> {
        let mut kv = KeyValues::new();
        for rel in &self.outputs {
            kv.set(rel.clone(), file_hash(&self.path(rel))?);
        }
        codec::write_file(&self.path(MANIFEST_FILE), kv.to_text().as_bytes())
    }
}

fn load_source(cfg: &PipelineConfig) -> Result<LongTailDataset> {
    let ds = match &cfg.source {
        DataSource::Blobs { per_class, style } => gen_blobs(
            cfg.num_classes,
            *per_class,
            cfg.image_shape,
            derive_seed(cfg.seed, &[SEED_BLOBS]),
            *style,
        )?,
        DataSource::File(p) => load_dataset(p)?,
        DataSource::Manifest(p) => load_manifest(p, cfg.num_classes, cfg.image_shape)?,
    };
    if ds.num_classes() != cfg.num_classes || ds.image_shape() != cfg.image_shape {
        return Err(Error::Config(format!(
            "source has {} classes of shape {:?}, config says {} of {:?}",
            ds.num_classes(),
            ds.image_shape(),
            cfg.num_classes,
            cfg.image_shape
        )));
    }
    Ok(ds)
}

fn make_lt_stage(r: &mut Runner, cfg: &PipelineConfig) -> Result<()> {
    let mut c = KeyValues::new();
    c.set("seed", cfg.seed)
        .set("largest_class_count", cfg.long_tail.largest_class_count)
        .set("imbalance_factor", cfg.long_tail.imbalance_factor)
        .set("long_tail_seed", cfg.long_tail.seed)
        .set("test_per_class", cfg.test_per_class);
    let full = cfg.to_kv();
    for k in full.keys().filter(|k| k.starts_with("data.")) {
        c.set(k, full.raw(k).unwrap_or_default());
    }
    // External files are inputs in their own right.
    let mut external = Vec::new();
    if let DataSource::File(p) | DataSource::Manifest(p) = &cfg.source {
        external.push(p.clone());
    }
    external.extend(cfg.test_path.clone());
    for (i, p) in external.iter().enumerate() {
        c.set(format!("external.{i}"), file_hash(p)?);
    }
    r.stage("make-lt", &c, &[], &[TRAIN, TEST], |dir| {
        let source = load_source(cfg)?;
        let (test, rest) = match &cfg.test_path {
            Some(p) => (load_dataset(p)?, source),
            None => balanced_split(
                &source,
                cfg.test_per_class,
                derive_seed(cfg.seed, &[SEED_TEST_SPLIT]),
            )?,
        };
        let train = make_long_tail(&rest, &cfg.long_tail)?;
        save_dataset(&dir.join(TRAIN), &train)?;
        save_dataset(&dir.join(TEST), &test)
    })
}

fn expert_stage(
    r: &mut Runner,
    cfg: &PipelineConfig,
    name: &str,
    base: &ExpertTrainConfig,
    out: &str,
    log: &str,
) -> Result<()> {
    let ecfg = cfg.expert_config(base);
    let spec = cfg.spec();
    let mut c = ecfg.to_kv();
    c.set("model", spec.name());
    r.stage(name, &c, &[TRAIN], &[out, log], |dir| {
        let train = load_dataset(&dir.join(TRAIN))?;
        let (ckpt, rows) = train_expert(&train, spec, &ecfg)?;
        ckpt.save(&dir.join(out))?;
        write_train_log(&dir.join(log), &rows)
    })
}

fn eval_stage(r: &mut Runner, cfg: &PipelineConfig, student: &StudentConfig) -> Result<()> {
    let spec = cfg.spec();
    let seeds = cfg.student_seeds();
    let mut c = student.to_kv();
    c.set("model", spec.name()).set(
        "seeds",
        seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    let inputs: Vec<&str> = DISTILLED_FILES.iter().copied().chain([TEST]).collect();
    r.stage("eval", &c, &inputs, &[REPORT_FILE], |dir| {
        let distilled = DistilledSet::load(&dir.join(DISTILLED))?;
        let test = load_dataset(&dir.join(TEST))?;
        let mut reports = Vec::with_capacity(seeds.len());
        for &s in &seeds {
            let (model, _) = train_student(&distilled, spec, student, s)?;
            reports.push(evaluate(&model, &test, s)?);
        }
        write_eval_csv(&dir.join(REPORT_FILE), &reports)
    })
}

/// Runs every stage in order, skipping those whose artifacts are current.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|source| Error::Path {
        path: dir.to_path_buf(),
        source,
    })?;
    codec::write_file(&dir.join(CONFIG_FILE), cfg.to_kv().to_text().as_bytes())?;
    let mut r = Runner {
        dir,
        stages: Vec::new(),
        outputs: vec![CONFIG_FILE.to_string()],
    };
    make_lt_stage(&mut r, cfg)?;
    if cfg.random_real_baseline {
        run_random_real(&mut r, cfg)?;
    } else {
        run_distillation(&mut r, cfg)?;
    }
    let reports = read_eval_csv(&dir.join(REPORT_FILE))?;
    Ok(RunSummary {
        stages: r.stages,
        report: EvalReport::average(&reports)?,
    })
}

fn run_distillation(r: &mut Runner, cfg: &PipelineConfig) -> Result<()> {
    expert_stage(r, cfg, "observer", &cfg.observer, OBSERVER, OBSERVER_LOG)?;
    expert_stage(r, cfg, "teacher", &cfg.teacher, TEACHER, TEACHER_LOG)?;

    let mut c = KeyValues::new();
    let recalib = RecalibOptions {
        shards: if cfg.deterministic {
            1
        } else {
            cfg.recalib.shards
        },
        ..cfg.recalib
    };
    if cfg.ablations.no_recalib {
        c.set("source", "running_stats");
    } else {
        c.set("source", "recalibrated")
            .set("batch_size", recalib.batch_size)
            .set("shards", recalib.shards)
            .set("law_of_total_variance", recalib.law_of_total_variance);
    }
    r.stage("recalibrate", &c, &[TRAIN, OBSERVER], &[BUNDLE], |dir| {
        let train = load_dataset(&dir.join(TRAIN))?;
        let observer = ExpertCheckpoint::load(&dir.join(OBSERVER))?;
        let bundle = if cfg.ablations.no_recalib {
            RealStatsBundle::from_running_stats(&observer, &train.hash())
        } else {
            recalibrate(&observer, &train, recalib)?
        };
        bundle.save(&dir.join(BUNDLE))
    })?;

    let mut c = init_kv(&cfg.init);
    c.set(
        "method",
        if cfg.ablations.naive_init {
            "naive"
        } else {
            "confidence"
        },
    );
    let (inputs, outputs): (Vec<&str>, Vec<&str>) = if cfg.ablations.naive_init {
        (vec![TRAIN], vec![INIT])
    } else {
        (vec![TRAIN, TEACHER], vec![INIT, SELECTION])
    };
    r.stage("init", &c, &inputs, &outputs, |dir| {
        let train = load_dataset(&dir.join(TRAIN))?;
        let init = if cfg.ablations.naive_init {
            let (images, labels) = naive_init(&train, cfg.init.ipc, &cfg.init.crop, cfg.init.seed)?;
            LabeledImages::new(images, labels)?
        } else {
            let teacher = ExpertCheckpoint::load(&dir.join(TEACHER))?;
            let res = confidence_init(&teacher.model, &train, &cfg.init)?;
            write_selection_csv(&dir.join(SELECTION), &res.selections)?;
            LabeledImages::new(res.images, res.labels)?
        };
        init.save(&dir.join(INIT))
    })?;

    r.stage(
        "recover",
        &cfg.recovery.to_kv(),
        &[INIT, OBSERVER, BUNDLE],
        &[RECOVERED, ALIGNMENT],
        |dir| {
            let init = LabeledImages::load(&dir.join(INIT))?;
            let observer = ExpertCheckpoint::load(&dir.join(OBSERVER))?;
            let bundle = RealStatsBundle::load(&dir.join(BUNDLE))?;
            let (images, report) = recover(
                &init.images,
                &init.labels,
                &observer,
                &bundle,
                &cfg.recovery,
            )?;
            report.write_csv(&dir.join(ALIGNMENT))?;
            LabeledImages::new(images, init.labels)?.save(&dir.join(RECOVERED))
        },
    )?;

    let mut c = KeyValues::new();
    c.set("batch_size", cfg.relabel_batch)
        .set("ipc", cfg.init.ipc);
    r.stage(
        "relabel",
        &c,
        &[RECOVERED, TEACHER, OBSERVER, BUNDLE],
        &DISTILLED_FILES,
        |dir| {
            let rec = LabeledImages::load(&dir.join(RECOVERED))?;
            let teacher = ExpertCheckpoint::load(&dir.join(TEACHER))?;
            let soft_labels = relabel(&teacher.model, &rec.images, cfg.relabel_batch)?;
            let mut provenance = KeyValues::new();
            provenance
                .set("observer", file_hash(&dir.join(OBSERVER))?)
                .set("teacher", file_hash(&dir.join(TEACHER))?)
                .set("bundle", file_hash(&dir.join(BUNDLE))?)
                .set("images", file_hash(&dir.join(RECOVERED))?);
            let set = DistilledSet {
                images: rec.images,
                hard_labels: rec.labels,
                soft_labels,
                num_classes: cfg.num_classes,
                ipc: cfg.init.ipc,
                provenance,
            };
            set.save(&dir.join(DISTILLED))
        },
    )?;

    eval_stage(r, cfg, &cfg.student)
}

/// Student recipe for the random-real baseline: hard labels only.
pub fn baseline_student(student: &StudentConfig) -> StudentConfig {
    StudentConfig {
        kappa1: 1.0,
        kappa2: 0.0,
        ..*student
    }
}

fn run_random_real(r: &mut Runner, cfg: &PipelineConfig) -> Result<()> {
    let mut c = KeyValues::new();
    let seed = derive_seed(cfg.seed, &[SEED_RANDOM_REAL]);
    c.set("ipc", cfg.init.ipc).set("seed", seed);
    r.stage("random-real", &c, &[TRAIN], &DISTILLED_FILES, |dir| {
        let train = load_dataset(&dir.join(TRAIN))?;
        let (images, hard_labels) = random_real_subset(&train, cfg.init.ipc, seed)?;
        let k = cfg.num_classes;
        let soft_labels = hard_labels
            .iter()
            .flat_map(|&y| (0..k).map(move |j| if j == y { 1.0 } else { 0.0 }))
            .collect();
        let mut provenance = KeyValues::new();
        provenance.set("train", file_hash(&dir.join(TRAIN))?);
        let set = DistilledSet {
            images,
            hard_labels,
            soft_labels,
            num_classes: k,
            ipc: cfg.init.ipc,
            provenance,
        };
        set.save(&dir.join(DISTILLED))
    })?;
    eval_stage(r, cfg, &baseline_student(&cfg.student))
}

// ---- reports ----

pub fn write_eval_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no reports".into()))?;
    let mut text = String::from("seed,architecture,overall,balanced");
    for c in 0..first.per_class.len() {
        text.push_str(&format!(",class_{c}"));
    }
    text.push('\n');
    for r in reports {
        let seed = r
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(" ");
        text.push_str(&format!(
            "{seed},{},{},{}",
            r.architecture, r.overall, r.balanced
        ));
        for a in &r.per_class {
            text.push_str(&format!(",{a}"));
        }
        text.push('\n');
    }
    codec::write_file(path, text.as_bytes())
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalReport>> {
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "missing evaluation artifact {}",
            path.display()
        )));
    }
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("bad number {s:?} in {}", path.display())))
    };
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() < 5 {
            return Err(Error::InvalidArgument(format!(
                "short row in {}",
                path.display()
            )));
        }
        let seeds = rec[0]
            .split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad seed {s:?}")))
            })
            .collect::<Result<Vec<u64>>>()?;
        out.push(EvalReport {
            overall: num(&rec[2])?,
            balanced: num(&rec[3])?,
            per_class: rec.iter().skip(4).map(num).collect::<Result<_>>()?,
            seeds,
            architecture: rec[1].to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no evaluation rows in {}",
            path.display()
        )));
    }
    Ok(out)
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const PER_CLASS_FILE: &str = "per_class.csv";
pub const CHART_FILE: &str = "per_class.svg";

/// Writes `summary.csv`, `per_class.csv` and `per_class.svg` into `dir`
/// from its evaluation artifact.
pub fn report(dir: &Path) -> Result<EvalReport> {
    let reports = read_eval_csv(&dir.join(REPORT_FILE))?;
    let mean = EvalReport::average(&reports)?;
    let mut summary = String::from("seed,overall,balanced\n");
    for r in &reports {
        let seed = r
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(" ");
        summary.push_str(&format!("{seed},{},{}\n", r.overall, r.balanced));
    }
    summary.push_str(&format!("mean,{},{}\n", mean.overall, mean.balanced));
    codec::write_file(&dir.join(SUMMARY_FILE), summary.as_bytes())?;

    let mut per_class = String::from("class,accuracy");
    for r in &reports {
        per_class.push_str(&format!(
            ",seed_{}",
            r.seeds.first().copied().unwrap_or_default()
        ));
    }
    per_class.push('\n');
    for (c, a) in mean.per_class.iter().enumerate() {
        per_class.push_str(&format!("{c},{a}"));
        for r in &reports {
            per_class.push_str(&format!(",{}", r.per_class[c]));
        }
        per_class.push('\n');
    }
    codec::write_file(&dir.join(PER_CLASS_FILE), per_class.as_bytes())?;
    codec::write_file(
        &dir.join(CHART_FILE),
        bar_chart(&mean.per_class, &mean.architecture).as_bytes(),
    )?;
    Ok(mean)
}

/// Standalone SVG bar chart of per-class accuracy.
pub fn bar_chart(per_class: &[f64], title: &str) -> String {
    let (bar, gap, height, margin) = (24.0, 8.0, 200.0, 40.0);
    let width = margin * 2.0 + per_class.len() as f64 * (bar + gap);
    let total_h = height + margin * 2.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{total_h}\" viewBox=\"0 0 {width} {total_h}\">\n"
    );
    s.push_str(&format!(
        "<text x=\"{margin}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">per-class accuracy, {}</text>\n",
        margin / 2.0,
        escape(title)
    ));
    s.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = margin + height,
        x2 = width - margin
    ));
    for (c, &a) in per_class.iter().enumerate() {
        let h = a.clamp(0.0, 1.0) * height;
        let x = margin + c as f64 * (bar + gap);
        s.push_str(&format!(
            "<rect x=\"{x}\" y=\"{}\" width=\"{bar}\" height=\"{h}\" fill=\"steelblue\"><title>class {c}: {a:.3}</title></rect>\n",
            margin + height - h
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{c}</text>\n",
            x + bar / 2.0,
            margin + height + 14.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
