use ltdd::data::{balanced_split, gen_blobs, BlobStyle};
use ltdd::expert::{train_expert, write_train_log, ExpertCheckpoint, ExpertTrainConfig};
use ltdd::{ConvNetSpec, Error, LongTailDataset, Model};

fn accuracy(model: &Model, data: &LongTailDataset) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let logits = model.predict(&data.batch(&idx), 64).unwrap();
    let c = data.num_classes();
    let correct = logits
        .data()
        .chunks(c)
        .zip(data.labels())
        .filter(|(row, &y)| {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            arg == y
        })
        .count();
    correct as f64 / data.len() as f64
}

fn plain(iterations: usize, seed: u64) -> ExpertTrainConfig {
    ExpertTrainConfig {
        iterations,
        batch_size: 16,
        seed,
        ..Default::default()
    }
    .plain_cross_entropy()
}

#[test]
fn two_class_blobs_are_learnable() {
    let data = gen_blobs(2, 50, [3, 16, 16], 21, BlobStyle::default()).unwrap();
    let (test, train) = balanced_split(&data, 15, 4).unwrap();
    let spec = ConvNetSpec::new(2, 8, [3, 16, 16], 2);
    let (ckpt, log) = train_expert(&train, spec, &plain(120, 1)).unwrap();
    let tail: f64 = log[log.len() - 10..].iter().map(|r| r.total).sum::<f64>() / 10.0;
    assert!(tail < 0.1, "final training loss {tail}");
    let acc = accuracy(&ckpt.model, &test);
    assert!(acc >= 0.95, "held-out accuracy {acc}");
}

#[test]
fn training_is_deterministic_and_counts_steps() {
    let data = gen_blobs(3, 8, [3, 8, 8], 2, BlobStyle::default()).unwrap();
    let spec = ConvNetSpec::new(2, 4, [3, 8, 8], 3);
    let cfg = ExpertTrainConfig {
        iterations: 5,
        batch_size: 8,
        seed: 3,
        ..Default::default()
    };
    let (a, log_a) = train_expert(&data, spec, &cfg).unwrap();
    let (b, log_b) = train_expert(&data, spec, &cfg).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.last().unwrap().alpha, 1.0);
    assert!(log_a.iter().all(|r| r.robust.abs() <= 2.0));

    let one = ExpertTrainConfig {
        iterations: 1,
        ..cfg.clone()
    };
    let (c, log_c) = train_expert(&data, spec, &one).unwrap();
    assert_eq!(log_c.len(), 1);
    assert_ne!(
        c.model.to_bytes(),
        Model::build(spec, 3).unwrap().to_bytes()
    );
}

#[test]
fn checkpoint_and_log_persist() {
    let data = gen_blobs(2, 6, [3, 8, 8], 5, BlobStyle::default()).unwrap();
    let spec = ConvNetSpec::new(1, 4, [3, 8, 8], 2);
    let cfg = ExpertTrainConfig {
        iterations: 3,
        batch_size: 4,
        ..Default::default()
    };
    let (ckpt, log) = train_expert(&data, spec, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("expert.bin");
    ckpt.save(&p).unwrap();
    let back = ExpertCheckpoint::load(&p).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.hash(), ckpt.hash());

    let csv = dir.path().join("log.csv");
    write_train_log(&csv, &log).unwrap();
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("iteration,L_robust,L_debias,total,alpha\n"));
    assert_eq!(text.lines().count(), 4);

    let mut bytes = ckpt.to_bytes();
    bytes[0] ^= 1;
    assert!(matches!(
        ExpertCheckpoint::from_bytes(&bytes),
        Err(Error::BadMagic(_))
    ));
}

#[test]
fn divergence_is_reported() {
    let data = gen_blobs(2, 6, [3, 8, 8], 5, BlobStyle::default()).unwrap();
    let spec = ConvNetSpec::new(1, 4, [3, 8, 8], 2);
    let mut cfg = plain(20, 0);
    cfg.optimizer = ltdd::OptimizerConfig::sgd(f32::INFINITY);
    cfg.cosine_schedule = false;
    let r = train_expert(&data, spec, &cfg);
    assert!(
        matches!(r, Err(Error::Diverged { .. })),
        "{:?}",
        r.map(|x| x.1.last().copied())
    );
}
