//! Trains a score network on one-dimensional Gaussian data and compares it
//! with the closed-form marginal score.
//!
//! Training runs in stages with decreasing learning rate.

use segdiff::toy::GaussianToy;
use segdiff::training::validation_loss;
use segdiff::{ScoreModel, Split};

fn main() -> segdiff::Result<()> {
    let toy = GaussianToy::default();
    let train_set = toy.samples(4096, Split::Train, 1);
    let val_set = toy.samples(512, Split::Val, 2);
    let mut model = ScoreModel::new(toy.model_config(), 0)?;
    let cfg = toy.train_config();

    println!("untrained: validation loss {:.4}", validation_loss(&model, &val_set, &cfg)?);
    for (i, report) in toy.fit(&mut model, &train_set, None, 0)?.iter().enumerate() {
        let (_, lr) = GaussianToy::STAGES[i];
        let loss = validation_loss(&model, &val_set, &cfg)?;
        println!("stage {i}: {} steps at lr {lr:e}, validation loss {loss:.4}", report.steps);
    }
    for t in [0.1, 0.5, 0.9] {
        println!("t = {t}: relative RMS score error {:.3}", toy.relative_score_error(&model, t, 101)?);
    }
    Ok(())
}
