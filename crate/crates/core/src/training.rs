//! Denoising score matching for the score networks and L1 regression for the
//! baseline U-Net.
//!
//! For every sample the DSM objective draws `t ~ U[t_eps, 1]` and
//! `z ~ N(0, I)`, perturbs `x_t = x_0 + sigma_t z` and regresses the network
//! onto the kernel score `(x_0 - x_t) / sigma_t^2 = -z / sigma_t`. The batch
//! loss is `mean_b w(t_b) ||s(x_t) - target||^2 / D` with `D` the pixel count
//! and `w = sigma_t^2` by default, so the zero predictor scores 1.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::phantom::Split;
use crate::score_net::{save_model, ScoreModel};
use crate::sde::{kernel_score, perturb, TimePoint};
use crate::tensor::{ImageTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWeighting {
    /// `w(t) = sigma_t^2`
    SigmaSquared,
    /// `w(t) = 1`
    None,
}

impl std::str::FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma_squared" => Ok(Self::SigmaSquared),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidConfig(format!("unknown loss weighting {other:?}"))),
        }
    }
}

impl std::fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SigmaSquared => "sigma_squared",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub t_eps: f64,
    pub loss_weighting: LossWeighting,
    pub seed: u64,
    /// Save `epoch_<k>.sdf` every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Where checkpoints (`best.sdf`, `epoch_<k>.sdf`) go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Per-epoch log: `epoch<TAB>train_loss<TAB>val_loss<TAB>seconds`.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 2e-4,
            max_epochs: 300,
            max_steps: None,
            t_eps: 1e-5,
            loss_weighting: LossWeighting::SigmaSquared,
            seed: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.t_eps > 0.0 && self.t_eps < 1.0) {
            return Err(Error::InvalidConfig(format!("t_eps must lie in (0, 1), got {}", self.t_eps)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One DSM draw: diffusion time and standard-normal noise.
#[derive(Debug, Clone)]
pub struct DsmDraw {
    pub t: f64,
    pub noise: ImageTensor,
}

pub fn draw_dsm<R: Rng + ?Sized>(n: usize, shape: Shape, t_eps: f64, rng: &mut R) -> Vec<DsmDraw> {
    (0..n)
        .map(|_| {
            let t = rng.random_range(t_eps..=1.0);
            DsmDraw {
                t,
                noise: ImageTensor::standard_normal(shape, rng),
            }
        })
        .collect()
}

/// Loss value, per-sample terms and the exact parameter gradient.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// DSM: `w(t) ||r||^2` (not divided by `D`); L1: per-sample mean absolute error.
    pub per_sample: Vec<f64>,
    pub grads: Vec<f64>,
}

/// DSM loss with freshly drawn `(t, z)`.
pub fn dsm_loss<R: Rng + ?Sized>(
    model: &ScoreModel,
    images: &[&ImageTensor],
    conditions: Option<&[&ImageTensor]>,
    weighting: LossWeighting,
    t_eps: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    let shape = images
        .first()
        .ok_or_else(|| Error::Domain("empty batch".into()))?
        .shape();
    let draws = draw_dsm(images.len(), shape, t_eps, rng);
    dsm_loss_with_draws(model, images, conditions, &draws, weighting)
}

/// DSM loss for given draws, so that the loss is a deterministic function of
/// the parameters.
pub fn dsm_loss_with_draws(
    model: &ScoreModel,
    images: &[&ImageTensor],
    conditions: Option<&[&ImageTensor]>,
    draws: &[DsmDraw],
    weighting: LossWeighting,
) -> Result<LossOutput> {
    if images.is_empty() || draws.len() != images.len() {
        return Err(Error::Domain(format!(
            "batch of {} images with {} draws",
            images.len(),
            draws.len()
        )));
    }
    if let Some(c) = conditions {
        if c.len() != images.len() {
            return Err(Error::Domain("condition count differs from image count".into()));
        }
    }
    let schedule = *model.schedule();
    let mut xts = Vec::with_capacity(images.len());
    let mut targets = Vec::with_capacity(images.len());
    for (x0, d) in images.iter().zip(draws) {
        let t = TimePoint::new(d.t)?;
        let xt = perturb(x0, &schedule, t, &d.noise)?;
        targets.push(kernel_score(&xt, x0, &schedule, t)?);
        xts.push(xt);
    }
    let xt_refs: Vec<&ImageTensor> = xts.iter().collect();
    let ts: Vec<f64> = draws.iter().map(|d| d.t).collect();
    let pass = model.score_batch(&xt_refs, conditions, &ts)?;

    let n = images.len();
    let dim = images[0].len();
    let mut per_sample = Vec::with_capacity(n);
    let mut dscores = vec![0.0; n * dim];
    for (b, target) in targets.iter().enumerate() {
        let sigma = pass.sigmas[b];
        let w = match weighting {
            LossWeighting::SigmaSquared => sigma * sigma,
            LossWeighting::None => 1.0,
        };
        let s = &pass.scores[b * dim..(b + 1) * dim];
        let mut sq = 0.0;
        for ((d, &sv), &tv) in dscores[b * dim..(b + 1) * dim].iter_mut().zip(s).zip(target.values()) {
            let r = sv - tv;
            sq += r * r;
            *d = 2.0 * w * r / (n * dim) as f64;
        }
        let term = w * sq;
        if !term.is_finite() {
            return Err(Error::NonFinite(format!(
                "DSM loss at t = {}, sigma = {sigma}, |r| = {}",
                draws[b].t,
                sq.sqrt()
            )));
        }
        per_sample.push(term);
    }
    let loss = per_sample.iter().sum::<f64>() / (n * dim) as f64;
    let grads = model.score_backward(&pass, &dscores);
    Ok(LossOutput {
        loss,
        per_sample,
        grads,
    })
}

/// Mean absolute error of the baseline prediction, with its subgradient.
pub fn l1_loss(model: &ScoreModel, conditions: &[&ImageTensor], targets: &[&ImageTensor]) -> Result<LossOutput> {
    if conditions.is_empty() || conditions.len() != targets.len() {
        return Err(Error::Domain("L1 batch needs equally many conditions and targets".into()));
    }
    let pass = model.unet_batch(conditions)?;
    let n = targets.len();
    let dim = targets[0].len();
    let mut per_sample = Vec::with_capacity(n);
    let mut dpred = vec![0.0; n * dim];
    for (b, target) in targets.iter().enumerate() {
        if target.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{dim} pixels"),
                got: format!("{} pixels", target.len()),
            });
        }
        let p = &pass.preds[b * dim..(b + 1) * dim];
        let mut acc = 0.0;
        for ((d, &pv), &tv) in dpred[b * dim..(b + 1) * dim].iter_mut().zip(p).zip(target.values()) {
            let r = pv - tv;
            acc += r.abs();
            *d = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            } / (n * dim) as f64;
        }
        per_sample.push(acc / dim as f64);
    }
    let loss = per_sample.iter().sum::<f64>() / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("L1 loss".into()));
    }
    let grads = model.unet_backward(&pass, &dpred);
    Ok(LossOutput {
        loss,
        per_sample,
        grads,
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Images (and conditions, for conditional or baseline models) from one split.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub split: Split,
    pub images: Vec<ImageTensor>,
    pub conditions: Option<Vec<ImageTensor>>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
    pub best_val_loss: Option<f64>,
}

const VAL_SEED_SALT: u64 = 0x7661_6c69_6461_7465;

fn batch_loss<R: Rng + ?Sized>(
    model: &ScoreModel,
    set: &TrainingSet,
    idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    let images: Vec<&ImageTensor> = idx.iter().map(|&i| &set.images[i]).collect();
    let conds: Option<Vec<&ImageTensor>> = set.conditions.as_ref().map(|c| idx.iter().map(|&i| &c[i]).collect());
    if model.is_noise_conditioned() {
        let conds = if model.is_conditional() {
            Some(
                conds
                    .ok_or_else(|| Error::Misuse("conditional score model needs conditions in the training set".into()))?,
            )
        } else {
            None
        };
        dsm_loss(model, &images, conds.as_deref(), cfg.loss_weighting, cfg.t_eps, rng)
    } else {
        let conds = conds.ok_or_else(|| Error::Misuse("the baseline U-Net trains on conditions".into()))?;
        l1_loss(model, &conds, &images)
    }
}

/// Validation loss with a fixed draw sequence, so repeated evaluation of the
/// same parameters gives the same value.
pub fn validation_loss(model: &ScoreModel, set: &TrainingSet, cfg: &TrainConfig) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Domain("empty validation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_SEED_SALT);
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        total += batch_loss(model, set, chunk, cfg, &mut rng)?.loss * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

fn refuse_test(set: &TrainingSet) -> Result<()> {
    if set.split == Split::Test {
        return Err(Error::Misuse("training must not read test-split data".into()));
    }
    Ok(())
}

/// Optimises `model` with Adam. DSM for score models, L1 for the baseline.
/// Deterministic given `cfg.seed`.
pub fn train(
    model: &mut ScoreModel,
    train_set: &TrainingSet,
    val_set: Option<&TrainingSet>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    refuse_test(train_set)?;
    if let Some(v) = val_set {
        refuse_test(v)?;
    }
    if train_set.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    let mut log = match &cfg.log_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "# epoch\ttrain_loss\tval_loss\tseconds").map_err(|e| Error::io(p, e))?;
            Some((f, p.clone()))
        }
        None => None,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.param_count(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    let started = Instant::now();

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut stop = false;
        for chunk in order.chunks(cfg.batch_size) {
            let out = match batch_loss(model, train_set, chunk, cfg, &mut rng) {
                Ok(o) => o,
                Err(Error::NonFinite(msg)) => {
                    let last = report.checkpoints.last().map(|p| p.display().to_string());
                    return Err(Error::NonFinite(format!(
                        "{msg} (epoch {epoch}, step {}; last good checkpoint: {})",
                        report.steps,
                        last.as_deref().unwrap_or("none")
                    )));
                }
                Err(e) => return Err(e),
            };
            adam.step(model.params_mut(), &out.grads);
            report.steps += 1;
            loss_sum += out.loss * chunk.len() as f64;
            seen += chunk.len();
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                stop = true;
                break;
            }
        }
        let train_loss = loss_sum / seen as f64;
        let val_loss = val_set.map(|v| validation_loss(model, v, cfg)).transpose()?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some((f, p)) = log.as_mut() {
            let val = record.val_loss.map_or_else(|| "nan".to_string(), |v| format!("{v:.9}"));
            writeln!(f, "{}\t{:.9}\t{}\t{:.3}", epoch, train_loss, val, record.seconds).map_err(|e| Error::io(&*p, e))?;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every.is_some_and(|k| k > 0 && epoch % k == 0) {
                let path = dir.join(format!("epoch_{epoch}.sdf"));
                save_model(model, &path)?;
                report.checkpoints.push(path);
            }
            let improved = match (val_loss, report.best_val_loss) {
                (Some(v), Some(best)) => v < best,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if improved {
                let path = dir.join("best.sdf");
                save_model(model, &path)?;
                if !report.checkpoints.contains(&path) {
                    report.checkpoints.push(path);
                }
            }
        }
        if let Some(v) = val_loss {
            if report.best_val_loss.is_none_or(|b| v < b) {
                report.best_val_loss = Some(v);
            }
        }
        report.epochs.push(record);
        if stop {
            break 'epochs;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_net::ScoreModelConfig;
    use rand_distr::StandardNormal;

    fn tiny(conditional: bool) -> ScoreModelConfig {
        ScoreModelConfig {
            fourier_dim: 4,
            ..ScoreModelConfig::desk(conditional).with_levels(&[4, 2], &[4, 4])
        }
    }

    fn images(n: usize, seed: u64) -> Vec<ImageTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| ImageTensor::from_fn(Shape::square(4), |_, _, _| rng.random::<f64>()))
            .collect()
    }

    #[test]
    fn zero_predictor_loss_is_noise_energy() {
        let model = ScoreModel::new(tiny(false), 0).unwrap();
        let imgs = images(3, 1);
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = draw_dsm(3, Shape::square(4), 1e-5, &mut rng);
        let out = dsm_loss_with_draws(&model, &refs, None, &draws, LossWeighting::SigmaSquared).unwrap();
        for (term, d) in out.per_sample.iter().zip(&draws) {
            let zz: f64 = d.noise.values().iter().map(|v| v * v).sum();
            assert!((term - zz).abs() < 1e-9 * zz);
        }
        let none = dsm_loss_with_draws(&model, &refs, None, &draws, LossWeighting::None).unwrap();
        for ((a, b), d) in none.per_sample.iter().zip(&out.per_sample).zip(&draws) {
            let s = model.schedule().sigma(d.t).unwrap();
            assert!((a - b / (s * s)).abs() <= 1e-9 * a.abs());
            assert!(*a >= 0.0);
        }
    }

    #[test]
    fn dsm_loss_gradient_matches_finite_differences() {
        let mut model = ScoreModel::new(tiny(true), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        model
            .params_mut()
            .iter_mut()
            .for_each(|v| *v += 0.05 * rng.sample::<f64, _>(StandardNormal));
        let imgs = images(2, 5);
        let conds = images(2, 6);
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        let crefs: Vec<&ImageTensor> = conds.iter().collect();
        let draws = draw_dsm(2, Shape::square(4), 0.05, &mut rng);
        let out = dsm_loss_with_draws(&model, &refs, Some(&crefs), &draws, LossWeighting::SigmaSquared).unwrap();
        let gmax = out.grads.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let h = 1e-6;
        let mut checked = 0;
        for idx in (0..model.param_count()).step_by(7) {
            if out.grads[idx].abs() < 1e-6 * gmax {
                continue;
            }
            let orig = model.params()[idx];
            model.params_mut()[idx] = orig + h;
            let lp = dsm_loss_with_draws(&model, &refs, Some(&crefs), &draws, LossWeighting::SigmaSquared).unwrap().loss;
            model.params_mut()[idx] = orig - h;
            let lm = dsm_loss_with_draws(&model, &refs, Some(&crefs), &draws, LossWeighting::SigmaSquared).unwrap().loss;
            model.params_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - out.grads[idx]).abs() / fd.abs().max(out.grads[idx].abs());
            assert!(rel < 1e-4, "param {idx}: fd {fd} vs {}", out.grads[idx]);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn l1_loss_cases() {
        let cfg = ScoreModelConfig::desk_unet().with_levels(&[4, 2], &[4, 4]);
        let model = ScoreModel::new(cfg, 0).unwrap();
        // fresh baseline predicts exactly 0
        let zero = ImageTensor::zeros(Shape::square(4));
        let target = ImageTensor::filled(Shape::square(4), 0.1);
        let c = ImageTensor::filled(Shape::square(4), 0.5);
        assert_eq!(l1_loss(&model, &[&c], &[&zero]).unwrap().loss, 0.0);
        let out = l1_loss(&model, &[&c], &[&target]).unwrap();
        assert!((out.loss - 0.1).abs() < 1e-15);
        // target - 0.1 offset from the (zero) prediction on the other side
        let neg = l1_loss(&model, &[&c], &[&ImageTensor::filled(Shape::square(4), 0.0)]).unwrap();
        assert_eq!(neg.loss, 0.0);
    }

    #[test]
    fn training_refuses_test_split() {
        let mut model = ScoreModel::new(tiny(false), 0).unwrap();
        let set = TrainingSet {
            split: Split::Test,
            images: images(2, 0),
            conditions: None,
        };
        assert!(matches!(train(&mut model, &set, None, &TrainConfig::default()), Err(Error::Misuse(_))));
    }

    #[test]
    fn training_is_deterministic_and_keeps_frequencies() {
        let set = TrainingSet {
            split: Split::Train,
            images: images(6, 8),
            conditions: None,
        };
        let cfg = TrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let mut a = ScoreModel::new(tiny(false), 1).unwrap();
        let mut b = ScoreModel::new(tiny(false), 1).unwrap();
        let freqs = a.frequencies().to_vec();
        let ra = train(&mut a, &set, None, &cfg).unwrap();
        train(&mut b, &set, None, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.frequencies(), freqs.as_slice());
        assert_eq!(ra.steps, 6);
        assert_eq!(ra.epochs.len(), 2);
    }
}
