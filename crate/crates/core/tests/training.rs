//! Training-level properties checked through the public API.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segdiff::toy::GaussianToy;
use segdiff::training::{dsm_loss, validation_loss};
use segdiff::{
    load_model, train, ImageTensor, ScoreModel, ScoreModelConfig, Shape, Split, TrainConfig, TrainingSet,
};

fn tiny(conditional: bool) -> ScoreModelConfig {
    ScoreModelConfig {
        fourier_dim: 4,
        ..ScoreModelConfig::desk(conditional).with_levels(&[8, 4], &[4, 8])
    }
}

fn random_images(n: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ImageTensor::from_fn(Shape::square(8), |_, _, _| rand::Rng::random::<f64>(&mut rng)))
        .collect()
}

#[test]
fn zero_predictor_loss_has_unit_expectation_per_pixel() {
    // a freshly built model has a zero output layer
    let model = ScoreModel::new(tiny(false), 0).unwrap();
    assert!(model
        .score_forward(&random_images(1, 9)[0], None, 0.5)
        .unwrap()
        .values()
        .iter()
        .all(|v| *v == 0.0));
    let imgs = random_images(10_000, 1);
    let refs: Vec<&ImageTensor> = imgs.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut total = 0.0;
    for chunk in refs.chunks(500) {
        let out = dsm_loss(&model, chunk, None, segdiff::LossWeighting::SigmaSquared, 1e-5, &mut rng).unwrap();
        total += out.per_sample.iter().sum::<f64>();
    }
    let per_pixel = total / (imgs.len() * 64) as f64;
    assert!((per_pixel - 1.0).abs() < 0.05, "per-pixel expectation {per_pixel}");
}

#[test]
fn unconditional_model_ignores_conditions() {
    let model = ScoreModel::new(tiny(false), 3).unwrap();
    let mut trained = model.clone();
    let images = random_images(12, 4);
    let conds = random_images(12, 5);
    let mut shuffled = conds.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(6));
    let with = |c: Option<Vec<ImageTensor>>| TrainingSet { split: Split::Train, images: images.clone(), conditions: c };
    let cfg = TrainConfig { batch_size: 4, max_steps: Some(6), ..TrainConfig::default() };
    train(&mut trained, &with(None), None, &cfg).unwrap();

    let base = validation_loss(&trained, &with(Some(conds)), &cfg).unwrap();
    let perm = validation_loss(&trained, &with(Some(shuffled)), &cfg).unwrap();
    let none = validation_loss(&trained, &with(None), &cfg).unwrap();
    assert_eq!(base.to_bits(), perm.to_bits());
    assert_eq!(base.to_bits(), none.to_bits());
}

#[test]
fn best_checkpoint_reproduces_logged_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let images = random_images(16, 7);
    let conds = random_images(16, 8);
    let train_set = TrainingSet { split: Split::Train, images: images[..12].to_vec(), conditions: Some(conds[..12].to_vec()) };
    let val_set = TrainingSet { split: Split::Val, images: images[12..].to_vec(), conditions: Some(conds[12..].to_vec()) };
    let cfg = TrainConfig {
        batch_size: 4,
        max_epochs: 4,
        learning_rate: 1e-3,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        log_path: Some(dir.path().join("train.log")),
        ..TrainConfig::default()
    };
    let mut model = ScoreModel::new(tiny(true), 9).unwrap();
    let report = train(&mut model, &train_set, Some(&val_set), &cfg).unwrap();

    let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
    let logged: Vec<f64> = log
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(logged.len(), 4);
    let best_logged = logged.iter().copied().fold(f64::INFINITY, f64::min);
    assert!((best_logged - report.best_val_loss.unwrap()).abs() < 1e-6);

    let reloaded = load_model(dir.path().join("best.sdf")).unwrap();
    let recomputed = validation_loss(&reloaded, &val_set, &cfg).unwrap();
    assert!((recomputed - best_logged).abs() < 1e-6, "{recomputed} vs {best_logged}");
}

#[test]
fn toy_validation_loss_halves_within_2000_steps() {
    let toy = GaussianToy::default();
    let train_set = toy.samples(4096, Split::Train, 1);
    let val_set = toy.samples(512, Split::Val, 2);
    let mut model = ScoreModel::new(toy.model_config(), 0).unwrap();
    let cfg = TrainConfig { batch_size: 16, max_steps: Some(2000), ..TrainConfig::default() };
    let before = validation_loss(&model, &val_set, &cfg).unwrap();
    let report = train(&mut model, &train_set, Some(&val_set), &cfg).unwrap();
    let after = report.epochs.last().unwrap().val_loss.unwrap();
    assert!(after <= 0.5 * before, "validation loss {before} -> {after}");
}
