use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ltdd::config::KeyValues;
use ltdd::data::{
    balanced_split, gen_blobs, load_dataset, make_long_tail, save_dataset, BlobStyle,
};
use ltdd::distill::{relabel, DistilledSet, LabeledImages};
use ltdd::eval::{evaluate, train_student, EvalReport, StudentConfig};
use ltdd::expert::{train_expert, write_train_log, ExpertCheckpoint, ExpertTrainConfig};
use ltdd::init::{confidence_init, naive_init, write_selection_csv, InitConfig};
use ltdd::pipeline::{self, file_hash, PipelineConfig, StageOutcome};
use ltdd::recalib::{recalibrate, RealStatsBundle, RecalibOptions};
use ltdd::recovery::{recover, RecoveryConfig};
use ltdd::{ConvNetSpec, Error, LongTailSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "ltdd", version, about = "Long-tailed dataset distillation")]
struct Cli {
    /// Single-threaded, bit-exact execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a balanced procedural blob dataset.
    GenBlobs(GenBlobsArgs),
    /// Subsample a dataset into an exponential long tail.
    MakeLt(MakeLtArgs),
    /// Train an observer or teacher expert.
    TrainExpert(TrainExpertArgs),
    /// Rebuild class-balanced BN statistics under a frozen observer.
    Recalibrate(RecalibrateArgs),
    /// Select initial synthetic images from teacher-scored crops.
    Init(InitArgs),
    /// Optimize synthetic pixels to match the target statistics.
    Recover(RecoverArgs),
    /// Attach teacher soft labels and write the distilled set.
    Relabel(RelabelArgs),
    /// Train students on a distilled set and evaluate them.
    Eval(EvalArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
    /// Write summary tables and a chart for an artifact directory.
    Report(ReportArgs),
}

/// Repeated `key=value` overrides.
#[derive(Args, Default)]
struct Overrides {
    /// Override a config key, e.g. `--set recovery.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn apply(&self, kv: &mut KeyValues) -> Result<()> {
        for s in &self.set {
            let Some((k, v)) = s.split_once('=') else {
                return Err(Error::Config(format!("--set expects KEY=VALUE, got {s:?}")).into());
            };
            kv.set(k.trim(), v.trim());
        }
        Ok(())
    }
}

fn read_kv(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        None => Ok(KeyValues::new()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(KeyValues::parse(&text)?)
        }
    }
}

fn kv_from(file: Option<&Path>, overrides: &Overrides) -> Result<KeyValues> {
    let mut kv = read_kv(file)?;
    overrides.apply(&mut kv)?;
    Ok(kv)
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
}

impl ModelArgs {
    fn spec(&self, data: &ltdd::LongTailDataset) -> ConvNetSpec {
        ConvNetSpec::new(
            self.depth,
            self.width,
            data.image_shape(),
            data.num_classes(),
        )
    }
}

#[derive(Args)]
struct GenBlobsArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 250)]
    per_class: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 1.5)]
    jitter: f32,
    #[arg(long, default_value_t = 0.08)]
    noise: f32,
    #[arg(long, default_value_t = 0.0)]
    distractor: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeLtArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long, default_value_t = 200)]
    largest: usize,
    #[arg(long, default_value_t = 10.0)]
    imbalance_factor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split this many images per class off as a balanced test set first.
    #[arg(long, requires = "test_out")]
    test_per_class: Option<usize>,
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainExpertArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Expert config file (keys `iterations`, `gamma1`, `optimizer.lr`, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Plain cross-entropy training (no debiasing).
    #[arg(long)]
    plain: bool,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration loss log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct RecalibrateArgs {
    #[arg(long)]
    observer: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    shards: usize,
    #[arg(long)]
    law_of_total_variance: bool,
    /// Emit the observer's running statistics instead of recalibrating.
    #[arg(long)]
    running_stats: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Teacher checkpoint; required unless `--naive`.
    #[arg(long, required_unless_present = "naive")]
    teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    ipc: usize,
    #[arg(long, default_value_t = 8)]
    n_aug: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random real crops without scoring.
    #[arg(long)]
    naive: bool,
    #[arg(long)]
    selection_csv: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    observer: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Recovery config file (keys `iterations`, `lambda_cw`, `optimizer.lr`, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Alignment loss trace (CSV).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RelabelArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Output distilled-set directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    distilled: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Student config file (keys `epochs`, `kappa1`, `kappa2`, `space`, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Student seeds; one student per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Evaluation CSV; defaults to `report.csv` in the distilled directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
    if config {
        EXIT_CONFIG
    } else {
        EXIT_STAGE
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let det = cli.deterministic;
    match cli.command {
        Command::GenBlobs(a) => gen_blobs_cmd(a),
        Command::MakeLt(a) => make_lt_cmd(a),
        Command::TrainExpert(a) => train_expert_cmd(a),
        Command::Recalibrate(a) => recalibrate_cmd(a, det),
        Command::Init(a) => init_cmd(a),
        Command::Recover(a) => recover_cmd(a),
        Command::Relabel(a) => relabel_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Run(a) => run_cmd(a, det),
        Command::Report(a) => report_cmd(a),
    }
}

fn gen_blobs_cmd(a: GenBlobsArgs) -> Result<()> {
    let style = BlobStyle {
        jitter: a.jitter,
        noise: a.noise,
        distractor: a.distractor,
    };
    let ds = gen_blobs(
        a.classes,
        a.per_class,
        [a.channels, a.height, a.width],
        a.seed,
        style,
    )?;
    save_dataset(&a.out, &ds)?;
    println!(
        "{} images, {} classes -> {}",
        ds.len(),
        ds.num_classes(),
        a.out.display()
    );
    Ok(())
}

fn make_lt_cmd(a: MakeLtArgs) -> Result<()> {
    let source = load_dataset(&a.source)?;
    let rest = match (a.test_per_class, &a.test_out) {
        (Some(n), Some(path)) => {
            let (test, rest) = balanced_split(&source, n, a.seed.wrapping_add(1))?;
            save_dataset(path, &test)?;
            rest
        }
        _ => source,
    };
    let spec = LongTailSpec {
        num_classes: rest.num_classes(),
        largest_class_count: a.largest,
        imbalance_factor: a.imbalance_factor,
        seed: a.seed,
    };
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let lt = make_long_tail(&rest, &spec)?;
    save_dataset(&a.out, &lt)?;
    println!(
        "class counts {:?} -> {}",
        lt.class_counts(),
        a.out.display()
    );
    Ok(())
}

fn train_expert_cmd(a: TrainExpertArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let mut cfg = ExpertTrainConfig::from_kv(&kv_from(a.config.as_deref(), &a.overrides)?)?;
    if a.plain {
        cfg = cfg.plain_cross_entropy();
    }
    let t0 = Instant::now();
    let (ckpt, rows) = train_expert(&data, a.model.spec(&data), &cfg)?;
    ckpt.save(&a.out)?;
    if let Some(log) = &a.log {
        write_train_log(log, &rows)?;
    }
    let last = rows.last().map_or(f64::NAN, |r| r.total);
    eprintln!(
        "trained {} iterations in {:.1?}, final loss {last:.4}",
        cfg.iterations,
        t0.elapsed()
    );
    println!("{}", ckpt.hash());
    Ok(())
}

fn recalibrate_cmd(a: RecalibrateArgs, deterministic: bool) -> Result<()> {
    let observer = ExpertCheckpoint::load(&a.observer)?;
    let data = load_dataset(&a.data)?;
    let bundle = if a.running_stats {
        RealStatsBundle::from_running_stats(&observer, &data.hash())
    } else {
        let shards = if deterministic { 1 } else { a.shards };
        let opts = RecalibOptions {
            batch_size: a.batch_size,
            shards,
            law_of_total_variance: a.law_of_total_variance,
        };
        recalibrate(&observer, &data, opts)?
    };
    bundle.save(&a.out)?;
    println!("{}", bundle.hash());
    Ok(())
}

fn init_cmd(a: InitArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let cfg = InitConfig {
        ipc: a.ipc,
        n_aug: a.n_aug,
        seed: a.seed,
        ..Default::default()
    };
    let out = if a.naive {
        let (images, labels) = naive_init(&data, a.ipc, &cfg.crop, a.seed)?;
        LabeledImages::new(images, labels)?
    } else {
        let teacher_path = a.teacher.as_ref().context("--teacher is required")?;
        let teacher = ExpertCheckpoint::load(teacher_path)?;
        let res = confidence_init(&teacher.model, &data, &cfg)?;
        if let Some(p) = &a.selection_csv {
            write_selection_csv(p, &res.selections)?;
        }
        LabeledImages::new(res.images, res.labels)?
    };
    out.save(&a.out)?;
    println!("{} images -> {}", out.labels.len(), a.out.display());
    Ok(())
}

fn recover_cmd(a: RecoverArgs) -> Result<()> {
    let cfg = RecoveryConfig::from_kv(&kv_from(a.config.as_deref(), &a.overrides)?)?;
    let init = LabeledImages::load(&a.init)?;
    let observer = ExpertCheckpoint::load(&a.observer)?;
    let bundle = RealStatsBundle::load(&a.bundle)?;
    let (images, report) = recover(&init.images, &init.labels, &observer, &bundle, &cfg)?;
    if let Some(p) = &a.report {
        report.write_csv(p)?;
    }
    LabeledImages::new(images, init.labels)?.save(&a.out)?;
    println!(
        "alignment loss {:.6} -> {:.6}",
        report.initial, report.final_loss
    );
    Ok(())
}

fn relabel_cmd(a: RelabelArgs) -> Result<()> {
    let teacher = ExpertCheckpoint::load(&a.teacher)?;
    let rec = LabeledImages::load(&a.images)?;
    let num_classes = teacher.model.spec().num_classes;
    let ipc = rec.labels.iter().filter(|&&y| y == 0).count();
    let soft_labels = relabel(&teacher.model, &rec.images, a.batch_size)?;
    let mut provenance = KeyValues::new();
    provenance
        .set("teacher", file_hash(&a.teacher)?)
        .set("images", file_hash(&a.images)?);
    let set = DistilledSet {
        images: rec.images,
        hard_labels: rec.labels,
        soft_labels,
        num_classes,
        ipc,
        provenance,
    };
    set.save(&a.out)?;
    println!(
        "{} images, soft/hard agreement {:.3}",
        set.len(),
        set.label_agreement()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cfg = StudentConfig::from_kv(&kv_from(a.config.as_deref(), &a.overrides)?)?;
    let distilled = DistilledSet::load(&a.distilled)?;
    let test = load_dataset(&a.test)?;
    let spec = a.model.spec(&test);
    let mut reports = Vec::new();
    for &seed in &a.seeds {
        let (student, _) = train_student(&distilled, spec, &cfg, seed)?;
        let r = evaluate(&student, &test, seed)?;
        println!(
            "seed {seed}: overall {:.4} balanced {:.4}",
            r.overall, r.balanced
        );
        reports.push(r);
    }
    let out = a.out.unwrap_or_else(|| a.distilled.join("report.csv"));
    pipeline::write_eval_csv(&out, &reports)?;
    let mean = EvalReport::average(&reports)?;
    println!(
        "mean: overall {:.4} balanced {:.4}",
        mean.overall, mean.balanced
    );
    Ok(())
}

fn run_cmd(a: RunArgs, deterministic: bool) -> Result<()> {
    let mut kv = read_kv(Some(&a.config))?;
    a.overrides.apply(&mut kv)?;
    if deterministic {
        kv.set("deterministic", true);
    }
    let cfg = PipelineConfig::from_kv(&kv, a.out)?;
    let t0 = Instant::now();
    let summary = pipeline::run_pipeline(&cfg)?;
    for (stage, outcome) in &summary.stages {
        let verb = match outcome {
            StageOutcome::Ran => "ran",
            StageOutcome::Skipped => "skipped",
        };
        eprintln!("{stage:>12}  {verb}");
    }
    eprintln!("finished in {:.1?}", t0.elapsed());
    println!(
        "{}: overall {:.4} balanced {:.4}",
        cfg.output_dir.display(),
        summary.report.overall,
        summary.report.balanced
    );
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    if !a.dir.is_dir() {
        bail!("{} is not a directory", a.dir.display());
    }
    let mean = pipeline::report(&a.dir)?;
    println!(
        "mean balanced accuracy {:.4}; wrote summary.csv, per_class.csv, per_class.svg",
        mean.balanced
    );
    Ok(())
}
