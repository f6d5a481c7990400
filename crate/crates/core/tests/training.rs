use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stegamark::data_io::{random_message, synthetic_image, Batch, Dataset, DatasetItem};
use stegamark::nn::NormMode;
use stegamark::perturb::PerturbConfig;
use stegamark::trainer::{self, read_metrics, train_step, TrainConfig, TrainState, CHECKPOINT_FILE, METRICS_FILE};

fn dataset(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| DatasetItem {
            name: format!("img_{i:03}.png"),
            image: synthetic_image(size, size, &mut rng).unwrap(),
        })
        .collect();
    Dataset::from_items(items, (size, size)).unwrap()
}

#[test]
fn single_batch_overfits_without_perturbations() {
    let mut cfg = TrainConfig::toy();
    cfg.model.norm.mode = NormMode::Instance;
    cfg.perturb = PerturbConfig::disabled();
    let data = dataset(8, 64, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let images: Vec<_> = data.items().iter().map(|it| &it.image).collect();
    let messages = (0..8).map(|_| random_message(16, &mut rng).unwrap()).collect();
    let batch = Batch::from_parts(&images, messages).unwrap();

    let mut state = TrainState::new(cfg).unwrap();
    let mut reached = None;
    for _ in 0..2000 {
        let row = train_step(&mut state, &batch).unwrap();
        if row.bit_acc == 1.0 {
            reached = Some(row.step);
            break;
        }
    }
    let step = reached.expect("batch bit accuracy never reached 1.0 within 2000 steps");
    println!("single batch memorised at step {step}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut cfg = TrainConfig::toy();
    cfg.model.image_size = 32;
    cfg.model.n_bits = 8;
    cfg.perturb = PerturbConfig {
        ramp_steps: 6,
        ..PerturbConfig::for_image_size(32)
    };
    cfg.batch_size = 2;
    cfg.total_steps = 12;
    cfg.log_every = 1;
    cfg.checkpoint_every = 100;
    let data = dataset(6, 32, 5);

    let full = tempfile::tempdir().unwrap();
    let end = trainer::train(&cfg, &data, full.path()).unwrap();
    let rows = read_metrics(&full.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 12);

    let split = tempfile::tempdir().unwrap();
    let mut first = cfg.clone();
    first.total_steps = 5;
    trainer::train(&first, &data, split.path()).unwrap();
    let resumed = trainer::resume(&split.path().join(CHECKPOINT_FILE), &data, split.path(), Some(12)).unwrap();
    let split_rows = read_metrics(&split.path().join(METRICS_FILE)).unwrap();

    assert_eq!(split_rows, rows);
    assert_eq!(resumed.model, end.model);
    assert_eq!(resumed.adaptive, end.adaptive);
    assert_eq!(resumed.step, 12);
}

#[test]
fn metrics_strength_is_monotone_and_ratios_finite() {
    let mut cfg = TrainConfig::toy();
    cfg.model.image_size = 32;
    cfg.model.n_bits = 8;
    cfg.perturb = PerturbConfig {
        ramp_steps: 10,
        ..PerturbConfig::for_image_size(32)
    };
    cfg.batch_size = 2;
    cfg.total_steps = 20;
    cfg.log_every = 1;
    let data = dataset(4, 32, 2);
    let dir = tempfile::tempdir().unwrap();
    trainer::train(&cfg, &data, dir.path()).unwrap();
    let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 20);
    assert!(rows.windows(2).all(|w| w[1].strength >= w[0].strength));
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.bit_acc)));
    assert!(rows.iter().all(|r| r.ratio_r.is_finite() && r.ratio_r > 0.0));
    assert!(rows.iter().all(|r| r.grad_enc_fc >= 0.0 && r.grad_dec_conv1 >= 0.0));
}
