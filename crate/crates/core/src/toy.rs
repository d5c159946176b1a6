//! One-dimensional Gaussian toy problem.
//!
//! Data are `1 x 1 x 1` images drawn from `N(mean, std^2)`. Under the VE SDE
//! the marginal at time `t` is `N(mean, std^2 + sigma_t^2)`, so the exact score
//! `(mean - x) / (std^2 + sigma_t^2)` is available for checking a trained
//! network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::phantom::Split;
use crate::score_net::{ScoreModel, ScoreModelConfig};
use crate::tensor::{ImageTensor, Shape};
use crate::training::{train, TrainConfig, TrainReport, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianToy {
    pub mean: f64,
    pub std: f64,
}

impl Default for GaussianToy {
    fn default() -> Self {
        Self { mean: 0.5, std: 0.05 }
    }
}

impl GaussianToy {
    pub fn samples(&self, n: usize, split: Split, seed: u64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(self.mean, self.std).expect("positive std");
        TrainingSet {
            split,
            images: (0..n)
                .map(|_| ImageTensor::filled(Shape::square(1), d.sample(&mut rng)))
                .collect(),
            conditions: None,
        }
    }

    /// Unconditional score network for `1 x 1` inputs.
    pub fn model_config(&self) -> ScoreModelConfig {
        ScoreModelConfig {
            fourier_dim: 16,
            fourier_scale: 1.0,
            ..ScoreModelConfig::desk(false).with_levels(&[1, 1], &[32, 32])
        }
    }

    /// Steps and learning rate of each training stage. A constant learning
    /// rate leaves the small-sigma end of the score noisy; two tenfold drops
    /// let it settle.
    pub const STAGES: [(usize, f64); 3] = [(6000, 2e-4), (2000, 2e-5), (2000, 2e-6)];

    /// Per-stage training settings: batch 64, step-limited.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            max_epochs: usize::MAX,
            max_steps: Some(Self::STAGES[0].0),
            learning_rate: Self::STAGES[0].1,
            ..TrainConfig::default()
        }
    }

    /// Trains through all of [`Self::STAGES`], each with a fresh optimiser
    /// and seed `seed + stage`.
    pub fn fit(
        &self,
        model: &mut ScoreModel,
        train_set: &TrainingSet,
        val_set: Option<&TrainingSet>,
        seed: u64,
    ) -> Result<Vec<TrainReport>> {
        Self::STAGES
            .iter()
            .enumerate()
            .map(|(i, &(steps, lr))| {
                let cfg = TrainConfig {
                    max_steps: Some(steps),
                    learning_rate: lr,
                    seed: seed + i as u64,
                    ..self.train_config()
                };
                train(model, train_set, val_set, &cfg)
            })
            .collect()
    }

    pub fn exact_score(&self, x: f64, sigma: f64) -> f64 {
        (self.mean - x) / (self.std * self.std + sigma * sigma)
    }

    /// Relative RMS error of the model score over `points` evenly spaced
    /// inputs in `|x - mean| < 2 sqrt(std^2 + sigma_t^2)`.
    pub fn relative_score_error(&self, model: &ScoreModel, t: f64, points: usize) -> Result<f64> {
        let sigma = model.schedule().sigma(t)?;
        let half = 2.0 * (self.std * self.std + sigma * sigma).sqrt();
        let mut err = 0.0;
        let mut norm = 0.0;
        for i in 0..points {
            // open interval: skip the endpoints
            let x = self.mean - half + 2.0 * half * (i as f64 + 0.5) / points as f64;
            let got = model.score_forward(&ImageTensor::filled(Shape::square(1), x), None, t)?.values()[0];
            let want = self.exact_score(x, sigma);
            err += (got - want).powi(2);
            norm += want * want;
        }
        Ok((err / norm).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn log_density(x: f64, mean: f64, var: f64) -> f64 {
        -0.5 * (x - mean).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
    }

    #[test]
    fn samples_follow_the_distribution() {
        let toy = GaussianToy::default();
        let set = toy.samples(20_000, Split::Train, 3);
        let xs: Vec<f64> = set.images.iter().map(|i| i.values()[0]).collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!((m - toy.mean).abs() < 5.0 * toy.std / n.sqrt());
        assert!((sd - toy.std).abs() < 0.02 * toy.std);
        assert!(set.conditions.is_none());
        assert_eq!(set.images[0].shape(), Shape::square(1));
    }

    #[test]
    fn stages_lower_the_learning_rate() {
        let toy = GaussianToy::default();
        let lrs: Vec<f64> = GaussianToy::STAGES.iter().map(|s| s.1).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(toy.train_config().learning_rate, lrs[0]);
        assert!(toy.train_config().validate().is_ok());
        assert!(toy.model_config().validate().is_ok());
    }

    proptest! {
        #[test]
        fn exact_score_is_the_log_density_gradient(x in -1.0f64..2.0, sigma in 0.01f64..5.0) {
            let toy = GaussianToy::default();
            let var = toy.std * toy.std + sigma * sigma;
            let h = 1e-5 * var.sqrt();
            let fd = (log_density(x + h, toy.mean, var) - log_density(x - h, toy.mean, var)) / (2.0 * h);
            let s = toy.exact_score(x, sigma);
            prop_assert!((fd - s).abs() <= 1e-5 * (1.0 + s.abs()), "{} vs {}", fd, s);
        }
    }
}
