use ltdd::data::{gen_blobs, make_long_tail, BlobStyle};
use ltdd::expert::{train_expert, ExpertTrainConfig};
use ltdd::init::{confidence_init, InitConfig};
use ltdd::recalib::{recalibrate, RecalibOptions};
use ltdd::recovery::{recover, Batching, RecoveryConfig};
use ltdd::{ConvNetSpec, Error, LongTailSpec};

#[test]
fn both_batchings_descend_within_the_clamp() {
    let src = gen_blobs(4, 40, [3, 8, 8], 1, BlobStyle::default()).unwrap();
    let spec = LongTailSpec {
        num_classes: 4,
        largest_class_count: 40,
        imbalance_factor: 8.0,
        seed: 2,
    };
    let lt = make_long_tail(&src, &spec).unwrap();
    let net = ConvNetSpec::new(2, 8, [3, 8, 8], 4);
    let (observer, _) = train_expert(
        &lt,
        net,
        &ExpertTrainConfig {
            iterations: 60,
            ..Default::default()
        },
    )
    .unwrap();
    let bundle = recalibrate(&observer, &lt, RecalibOptions::default()).unwrap();
    let init = confidence_init(
        &observer.model,
        &lt,
        &InitConfig {
            ipc: 3,
            n_aug: 2,
            ..Default::default()
        },
    )
    .unwrap();

    for batching in [Batching::Joint, Batching::PerClass] {
        let cfg = RecoveryConfig {
            iterations: 200,
            batching,
            clamp: (0.1, 0.9),
            ..Default::default()
        };
        let (images, report) =
            recover(&init.images, &init.labels, &observer, &bundle, &cfg).unwrap();
        assert_eq!(report.total.len(), 200);
        assert_eq!(report.total[0], report.initial);
        assert!(
            report.final_loss < 0.5 * report.initial,
            "{batching:?}: {} -> {}",
            report.initial,
            report.final_loss
        );
        assert!(images.data().iter().all(|&v| (0.1..=0.9).contains(&v)));
        assert_eq!(images.shape(), init.images.shape());
    }

    // A bundle recorded against another observer is refused.
    let (other, _) = train_expert(
        &lt,
        net,
        &ExpertTrainConfig {
            iterations: 5,
            seed: 9,
            ..Default::default()
        },
    )
    .unwrap();
    let err = recover(
        &init.images,
        &init.labels,
        &other,
        &bundle,
        &RecoveryConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Provenance { .. }));
}
