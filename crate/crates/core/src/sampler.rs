//! Reverse-diffusion sampling: predictor and Langevin corrector steps, the
//! SDEdit-style conditional sampler (CSM), the conditionally trained sampler
//! (CTM) and the single-pass U-Net baseline.
//!
//! The default predictor is the VE reverse-diffusion update
//! `x += (s_hi^2 - s_lo^2) score(x, t_hi) + sqrt(s_hi^2 - s_lo^2) z`.
//! [`Discretization::Literal`] instead applies `g(t_hi)^2 score + g(t_hi) z`
//! without a step-size factor.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::score_net::ScoreModel;
use crate::sde::{prior_sample, SigmaSchedule};
use crate::tensor::ImageTensor;

/// Anything that can evaluate a time-dependent score.
pub trait ScoreFn {
    fn score(&self, x: &ImageTensor, condition: Option<&ImageTensor>, t: f64) -> Result<ImageTensor>;
    fn schedule(&self) -> &SigmaSchedule;
    /// Whether the score takes a condition channel.
    fn is_conditional(&self) -> bool;
}

impl ScoreFn for ScoreModel {
    fn score(&self, x: &ImageTensor, condition: Option<&ImageTensor>, t: f64) -> Result<ImageTensor> {
        self.score_forward(x, condition, t)
    }

    fn schedule(&self) -> &SigmaSchedule {
        ScoreModel::schedule(self)
    }

    fn is_conditional(&self) -> bool {
        ScoreModel::is_conditional(self)
    }
}

/// Exact marginal score of data `N(mean, std^2 I)` under the VE SDE:
/// `-(x - mean) / (std^2 + sigma_t^2)`.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    pub mean: f64,
    pub std: f64,
    pub schedule: SigmaSchedule,
    /// Accept (and ignore) a condition, so the oracle can drive the CTM loop.
    pub conditional: bool,
}

impl GaussianScore {
    pub fn new(mean: f64, std: f64, schedule: SigmaSchedule) -> Self {
        Self {
            mean,
            std,
            schedule,
            conditional: false,
        }
    }

    pub fn accepting_condition(mut self) -> Self {
        self.conditional = true;
        self
    }
}

impl ScoreFn for GaussianScore {
    fn score(&self, x: &ImageTensor, _condition: Option<&ImageTensor>, t: f64) -> Result<ImageTensor> {
        let sigma = self.schedule.sigma(t)?;
        let v = self.std * self.std + sigma * sigma;
        Ok(x.map(|xi| -(xi - self.mean) / v))
    }

    fn schedule(&self) -> &SigmaSchedule {
        &self.schedule
    }

    fn is_conditional(&self) -> bool {
        self.conditional
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discretization {
    /// Per-step variance `sigma_hi^2 - sigma_lo^2`.
    Standard,
    /// `g(t)^2` and `g(t)` applied without a step-size factor.
    Literal,
}

impl std::str::FromStr for Discretization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "literal" => Ok(Self::Literal),
            other => Err(Error::InvalidConfig(format!("unknown discretization {other:?}"))),
        }
    }
}

impl fmt::Display for Discretization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::Literal => "literal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    /// Start time of CSM.
    pub t0: f64,
    pub snr: f64,
    pub corrector_steps: usize,
    pub clamp_output: bool,
    /// Correctors are skipped below this time.
    pub t_eps: f64,
    pub discretization: Discretization,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 500,
            t0: 0.4,
            snr: 0.4,
            corrector_steps: 1,
            clamp_output: true,
            t_eps: 1e-5,
            discretization: Discretization::Standard,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidConfig("n_steps must be at least 1".into()));
        }
        if !(self.t0 > 0.0 && self.t0 <= 1.0) {
            return Err(Error::InvalidConfig(format!("t0 must lie in (0, 1], got {}", self.t0)));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::InvalidConfig(format!("snr must be positive, got {}", self.snr)));
        }
        if !(self.t_eps >= 0.0 && self.t_eps < 1.0) {
            return Err(Error::InvalidConfig(format!("t_eps must lie in [0, 1), got {}", self.t_eps)));
        }
        Ok(())
    }
}

/// What the corrector did after one predictor step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorrectorStatus {
    /// Applied with this step size (the last one when several ran).
    Applied(f64),
    /// Score was exactly zero, so no step size is defined.
    SkippedZeroScore,
    /// Below `t_eps` or `corrector_steps = 0`.
    NotRun,
}

impl fmt::Display for CorrectorStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Applied(eps) => write!(f, "{eps:.9e}"),
            Self::SkippedZeroScore => f.write_str("skipped"),
            Self::NotRun => f.write_str("-"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub n: usize,
    pub t: f64,
    pub sigma: f64,
    pub corrector: CorrectorStatus,
    pub mean_abs: f64,
}

/// Per-step diagnostics, in sampling order (decreasing `t`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleTrace {
    pub steps: Vec<StepRecord>,
}

impl SampleTrace {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# n\tt\tsigma\tcorrector_epsilon\tmean_abs_x\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{}\t{:.9}\t{:.9e}\t{}\t{:.9e}\n",
                r.n, r.t, r.sigma, r.corrector, r.mean_abs
            ));
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// CTM grid `t_n = n / N`, indexed by `n = 0..=N`.
pub fn ctm_grid(n_steps: usize) -> Vec<f64> {
    (0..=n_steps).map(|n| n as f64 / n_steps as f64).collect()
}

/// CSM grid `t_n = (n / N) t0`, indexed by `n = 0..=N`.
pub fn csm_grid(n_steps: usize, t0: f64) -> Vec<f64> {
    (0..=n_steps).map(|n| n as f64 / n_steps as f64 * t0).collect()
}

/// Predictor update with given score and noise.
pub fn predictor_update(x: &ImageTensor, score: &ImageTensor, z: &ImageTensor, sigma_hi: f64, sigma_lo: f64) -> Result<ImageTensor> {
    let var = sigma_hi * sigma_hi - sigma_lo * sigma_lo;
    let mut out = x.clone();
    out.axpy(var, score)?;
    out.axpy(var.max(0.0).sqrt(), z)?;
    Ok(out)
}

/// Langevin step size `2 (r ||z|| / ||s||)^2`, or `None` for a zero score.
pub fn corrector_epsilon(score: &ImageTensor, z: &ImageTensor, snr: f64) -> Option<f64> {
    let s = score.l2_norm();
    if s == 0.0 {
        return None;
    }
    let ratio = snr * z.l2_norm() / s;
    Some(2.0 * ratio * ratio)
}

/// Langevin update `x + eps s + sqrt(2 eps) z` with given score and noise.
pub fn corrector_update(x: &ImageTensor, score: &ImageTensor, z: &ImageTensor, snr: f64) -> Result<(ImageTensor, Option<f64>)> {
    x.ensure_same_shape(score)?;
    let Some(eps) = corrector_epsilon(score, z, snr) else {
        return Ok((x.clone(), None));
    };
    let mut out = x.clone();
    out.axpy(eps, score)?;
    out.axpy((2.0 * eps).sqrt(), z)?;
    Ok((out, Some(eps)))
}

/// One reverse step from `t_hi` to `t_lo`, with the score evaluated at `t_hi`.
pub fn predictor_step<S: ScoreFn + ?Sized, R: Rng + ?Sized>(
    model: &S,
    x: &ImageTensor,
    condition: Option<&ImageTensor>,
    t_hi: f64,
    t_lo: f64,
    discretization: Discretization,
    rng: &mut R,
) -> Result<ImageTensor> {
    if !(0.0 <= t_lo && t_lo <= t_hi && t_hi <= 1.0) {
        return Err(Error::Domain(format!("predictor needs 0 <= t_lo <= t_hi <= 1, got {t_lo} and {t_hi}")));
    }
    if t_hi == t_lo {
        return Ok(x.clone());
    }
    let schedule = *model.schedule();
    let score = model.score(x, condition, t_hi)?;
    let z = ImageTensor::standard_normal(x.shape(), rng);
    match discretization {
        Discretization::Standard => predictor_update(x, &score, &z, schedule.sigma(t_hi)?, schedule.sigma(t_lo)?),
        Discretization::Literal => {
            let (_, g) = schedule.drift_diffusion(t_hi)?;
            let mut out = x.clone();
            out.axpy(g * g, &score)?;
            out.axpy(g, &z)?;
            Ok(out)
        }
    }
}

/// One Langevin corrector step at time `t`.
pub fn corrector_step<S: ScoreFn + ?Sized, R: Rng + ?Sized>(
    model: &S,
    x: &ImageTensor,
    condition: Option<&ImageTensor>,
    t: f64,
    snr: f64,
    rng: &mut R,
) -> Result<(ImageTensor, Option<f64>)> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("corrector time must lie in (0, 1], got {t}")));
    }
    let score = model.score(x, condition, t)?;
    let z = ImageTensor::standard_normal(x.shape(), rng);
    corrector_update(x, &score, &z, snr)
}

/// Predictor-corrector loop over `grid` (indexed `t_0..=t_N`, increasing),
/// starting from `x` at `t_N`.
pub fn run_pc_loop<S: ScoreFn + ?Sized, R: Rng + ?Sized>(
    model: &S,
    mut x: ImageTensor,
    condition: Option<&ImageTensor>,
    grid: &[f64],
    config: &SamplerConfig,
    rng: &mut R,
    mut trace: Option<&mut SampleTrace>,
) -> Result<ImageTensor> {
    let schedule = *model.schedule();
    for n in (0..grid.len().saturating_sub(1)).rev() {
        let (t_hi, t_lo) = (grid[n + 1], grid[n]);
        x = predictor_step(model, &x, condition, t_hi, t_lo, config.discretization, rng)?;
        let mut status = CorrectorStatus::NotRun;
        if t_lo >= config.t_eps && t_lo > 0.0 {
            for _ in 0..config.corrector_steps {
                let (next, eps) = corrector_step(model, &x, condition, t_lo, config.snr, rng)?;
                x = next;
                status = match eps {
                    Some(e) => CorrectorStatus::Applied(e),
                    None => CorrectorStatus::SkippedZeroScore,
                };
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at step n = {n}, t = {t_lo}")));
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.steps.push(StepRecord {
                n,
                t: t_lo,
                sigma: schedule.sigma(t_lo)?,
                corrector: status,
                mean_abs: x.mean_abs(),
            });
        }
    }
    Ok(if config.clamp_output { x.clamp(0.0, 1.0) } else { x })
}

fn single_channel(y: &ImageTensor) -> Result<()> {
    if y.channels() != 1 {
        return Err(Error::ShapeMismatch {
            expected: "single-channel condition".into(),
            got: format!("{} channels", y.channels()),
        });
    }
    Ok(())
}

/// CSM initial state `y + sigma_{t0} z`.
pub fn csm_initial_state<R: Rng + ?Sized>(y: &ImageTensor, sigma_t0: f64, rng: &mut R) -> ImageTensor {
    let z = ImageTensor::standard_normal(y.shape(), rng);
    let mut x = y.clone();
    x.axpy(sigma_t0, &z).expect("same shape");
    x
}

/// CSM with an explicit generator.
pub fn sample_csm_with<S: ScoreFn + ?Sized, R: Rng + ?Sized>(
    model: &S,
    y: &ImageTensor,
    config: &SamplerConfig,
    rng: &mut R,
    trace: Option<&mut SampleTrace>,
) -> Result<ImageTensor> {
    config.validate()?;
    single_channel(y)?;
    if model.is_conditional() {
        return Err(Error::Misuse("CSM needs an unconditionally trained score model".into()));
    }
    let sigma_t0 = model.schedule().sigma(config.t0)?;
    let x = csm_initial_state(y, sigma_t0, rng);
    run_pc_loop(model, x, None, &csm_grid(config.n_steps, config.t0), config, rng, trace)
}

/// CSM: noise the condition to `t0` and run the reverse loop with the
/// unconditional score. Seeded from `config.seed`.
pub fn sample_csm<S: ScoreFn + ?Sized>(model: &S, y: &ImageTensor, config: &SamplerConfig) -> Result<ImageTensor> {
    sample_csm_with(model, y, config, &mut ChaCha8Rng::seed_from_u64(config.seed), None)
}

/// CTM with an explicit generator.
pub fn sample_ctm_with<S: ScoreFn + ?Sized, R: Rng + ?Sized>(
    model: &S,
    y: &ImageTensor,
    config: &SamplerConfig,
    rng: &mut R,
    trace: Option<&mut SampleTrace>,
) -> Result<ImageTensor> {
    config.validate()?;
    single_channel(y)?;
    if !model.is_conditional() {
        return Err(Error::Misuse("CTM needs a conditionally trained score model".into()));
    }
    let x = prior_sample(y.shape(), model.schedule(), rng);
    run_pc_loop(model, x, Some(y), &ctm_grid(config.n_steps), config, rng, trace)
}

/// CTM: start from the prior and run the reverse loop with the condition
/// concatenated at every call. Seeded from `config.seed`.
pub fn sample_ctm<S: ScoreFn + ?Sized>(model: &S, y: &ImageTensor, config: &SamplerConfig) -> Result<ImageTensor> {
    sample_ctm_with(model, y, config, &mut ChaCha8Rng::seed_from_u64(config.seed), None)
}

/// Baseline prediction: one deterministic network pass, clamped to `[0, 1]`.
pub fn sample_unet(model: &ScoreModel, y: &ImageTensor) -> Result<ImageTensor> {
    model.unet_forward(y)
}
