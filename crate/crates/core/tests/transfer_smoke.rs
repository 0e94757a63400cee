//! Fine-tuning the small synthetic dataset from a trunk pretrained on the
//! medium one beats training the small net from scratch.

use coshare::dataio::{
    augment, split_repetition, synthetic, AugmentationConfig, DatasetBundle, SplitCounts,
    SyntheticConfig,
};
use coshare::layers::{build_network, Architecture, NetworkSpec};
use coshare::params::ParamStore;
use coshare::training::{train_single, CostKind, Task, TrainConfig};
use coshare::transfer::{finetune, transfer_trunk, GradientMode, ResizeMode, TransferMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn budget(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: None,
        max_updates: Some(600),
        patience: 50,
        ..TrainConfig::cotrain(seed)
    }
}

#[test]
fn pretrained_trunk_beats_scratch_on_small_data() {
    let small_spec = NetworkSpec::new("small", Architecture::One, 64, 10, 1);
    let medium_spec = NetworkSpec::new("medium", Architecture::One, 96, 10, 1);
    let (mut scratch, mut tuned) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let medium = DatasetBundle::new(
            "medium",
            synthetic(&SyntheticConfig::medium(100 + seed)).unwrap(),
            None,
        )
        .unwrap();
        let small = DatasetBundle::new(
            "small",
            synthetic(&SyntheticConfig::small(200 + seed)).unwrap(),
            None,
        )
        .unwrap();
        let medium = split_repetition(
            &medium,
            SplitCounts {
                train: 3000,
                val: 750,
                holdout: 500,
            },
            0,
            seed,
            None,
        )
        .unwrap();
        let small = split_repetition(
            &small,
            SplitCounts {
                train: 100,
                val: 30,
                holdout: 20,
            },
            0,
            seed,
            None,
        )
        .unwrap();
        let small = augment(
            &small,
            &AugmentationConfig {
                seed,
                ..AugmentationConfig::default()
            },
        )
        .unwrap();
        let (mt, mv) = (
            medium.train_samples().unwrap(),
            medium.val_samples().unwrap(),
        );
        let (st, sv) = (small.train_samples().unwrap(), small.val_samples().unwrap());

        let mut store = ParamStore::new();
        let net = build_network(
            &small_spec,
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        let task = Task {
            net: &net,
            train: &st,
            val: &sv,
            cost: CostKind::Rmse,
            means: None,
        };
        scratch.push(
            train_single(&task, &mut store, &budget(seed))
                .unwrap()
                .checkpoint
                .score,
        );

        let mut store = ParamStore::new();
        let net = build_network(
            &medium_spec,
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        let task = Task {
            net: &net,
            train: &mt,
            val: &mv,
            cost: CostKind::Rmse,
            means: None,
        };
        let source = train_single(&task, &mut store, &budget(seed))
            .unwrap()
            .checkpoint;

        let mode = TransferMode {
            gradient: GradientMode::Full,
            resize: ResizeMode::WeightShare,
        };
        let (net, mut store) = transfer_trunk(
            &source,
            &small_spec,
            mode,
            &mut ChaCha8Rng::seed_from_u64(seed + 50),
        )
        .unwrap();
        let task = Task {
            net: &net,
            train: &st,
            val: &sv,
            cost: CostKind::Rmse,
            means: None,
        };
        tuned.push(
            finetune(&task, &mut store, &budget(seed))
                .unwrap()
                .checkpoint
                .score,
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&scratch), mean(&tuned));
    println!("scratch {scratch:?} mean {a:.4}\nfine-tuned {tuned:?} mean {b:.4}");
    assert!(b < a, "fine-tuned {b:.4} vs scratch {a:.4}");
}
