//! Time-conditional score network and the noise-free U-Net baseline.
//!
//! The same encoder-decoder backbone serves three roles:
//!
//! * unconditional score model `s(x_t, t)`: one input channel (the perturbed
//!   image);
//! * conditional score model `s(x_t, y, t)`: the condition is concatenated as a
//!   second input channel;
//! * baseline U-Net: no time embedding, the condition is the only input and the
//!   output is clamped to `[0, 1]`.
//!
//! Score models embed `ln sigma_t` with frozen Gaussian Fourier features, feed
//! the perturbed image scaled by `1 / sqrt(1 + sigma_t^2)` and divide the raw
//! network output by `sigma_t`.

mod io;

pub use io::{load_model, save_model, MODEL_FORMAT_VERSION};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::layers::{group_count, Batch};
use crate::nn::unet::{UNet, UNetSpec, UNetTape};
use crate::sde::SigmaSchedule;
use crate::tensor::{ImageTensor, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModelConfig {
    /// Spatial size per level, top level first. Each level equals the previous
    /// one or half of it.
    pub resolution_levels: Vec<usize>,
    pub channels_per_level: Vec<usize>,
    /// Number of Fourier frequencies; the embedding has twice this width.
    pub fourier_dim: usize,
    /// Standard deviation of the Fourier frequencies.
    pub fourier_scale: f64,
    pub conditional: bool,
    /// `false` selects the baseline U-Net.
    pub noise_conditioned: bool,
    pub input_channels: usize,
    /// Feed `x / sqrt(1 + sigma^2)` instead of `x`.
    pub input_scaling: bool,
    pub schedule: SigmaSchedule,
}

impl ScoreModelConfig {
    /// Desk-scale score model: levels (64, 32, 16), channels (32, 64, 64).
    pub fn desk(conditional: bool) -> Self {
        Self {
            resolution_levels: vec![64, 32, 16],
            channels_per_level: vec![32, 64, 64],
            fourier_dim: 64,
            fourier_scale: 0.3,
            conditional,
            noise_conditioned: true,
            input_channels: if conditional { 2 } else { 1 },
            input_scaling: true,
            schedule: SigmaSchedule::default(),
        }
    }

    /// Baseline U-Net on the desk-scale backbone.
    pub fn desk_unet() -> Self {
        Self {
            conditional: false,
            noise_conditioned: false,
            input_channels: 1,
            ..Self::desk(false)
        }
    }

    /// Same backbone with other widths and sizes.
    pub fn with_levels(mut self, levels: &[usize], channels: &[usize]) -> Self {
        self.resolution_levels = levels.to_vec();
        self.channels_per_level = channels.to_vec();
        self
    }

    pub fn image_size(&self) -> usize {
        self.resolution_levels[0]
    }

    pub fn image_shape(&self) -> Shape {
        Shape::square(self.image_size())
    }

    fn temb_dim(&self) -> usize {
        4 * self.channels_per_level[0]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let levels = &self.resolution_levels;
        let chans = &self.channels_per_level;
        if levels.len() != chans.len() || levels.len() < 2 {
            return bad(format!(
                "need at least two levels with one channel count each, got {} levels and {} channel counts",
                levels.len(),
                chans.len()
            ));
        }
        if levels.iter().any(|&l| l == 0 || !l.is_power_of_two()) {
            return bad(format!("resolution levels must be powers of two: {levels:?}"));
        }
        if levels.windows(2).any(|w| w[1] != w[0] && 2 * w[1] != w[0]) {
            return bad(format!("each level must keep or halve the previous size: {levels:?}"));
        }
        if chans.iter().any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        if self.conditional && self.input_channels != 2 {
            return bad("conditional models take two input channels".into());
        }
        if !self.conditional && self.input_channels != 1 {
            return bad("unconditional models and the baseline take one input channel".into());
        }
        if !self.noise_conditioned && self.conditional {
            return bad("the baseline U-Net takes the condition as its only input; set conditional = false".into());
        }
        if self.noise_conditioned && (self.fourier_dim == 0 || !(self.fourier_scale > 0.0)) {
            return bad("time-conditioned models need fourier_dim > 0 and fourier_scale > 0".into());
        }
        // every normalisation site must see at least two values per group
        let depth = levels.len();
        let mut sites = Vec::new();
        for i in 0..depth {
            let cin = if i == 0 { chans[0] } else { chans[i - 1] };
            sites.push((cin, levels[i]));
            sites.push((chans[i], levels[i]));
            let cur = if i == depth - 1 { chans[depth - 1] } else { chans[i + 1] };
            sites.push((cur + chans[i], levels[i]));
        }
        for (c, res) in sites {
            if (c / group_count(c)) * res * res < 2 {
                return bad(format!(
                    "group normalisation over {c} channels at {res}x{res} has a single value per group"
                ));
            }
        }
        Ok(())
    }

    fn unet_spec(&self) -> UNetSpec {
        UNetSpec {
            in_channels: self.input_channels,
            levels: self.resolution_levels.clone(),
            channels: self.channels_per_level.clone(),
            time_features: self.noise_conditioned.then_some(2 * self.fourier_dim),
            temb_dim: self.temb_dim(),
        }
    }
}

/// Parameter count implied by a configuration.
pub fn parameter_count(config: &ScoreModelConfig) -> Result<usize> {
    config.validate()?;
    Ok(UNet::new(config.unet_spec()).param_count())
}

/// A network with its configuration, frozen Fourier frequencies and
/// parameters.
#[derive(Debug, Clone)]
pub struct ScoreModel {
    config: ScoreModelConfig,
    frequencies: Vec<f64>,
    params: Vec<f64>,
    net: UNet,
}

pub(crate) struct ScorePass {
    pub scores: Vec<f64>,
    pub sigmas: Vec<f64>,
    tape: UNetTape,
}

pub(crate) struct UnetPass {
    pub raw: Vec<f64>,
    pub preds: Vec<f64>,
    tape: UNetTape,
}

impl ScoreModel {
    /// Initialises a fresh model. The output layer starts at zero, so the
    /// initial score estimate (or baseline prediction) is identically zero.
    pub fn new(config: ScoreModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = if config.noise_conditioned {
            (0..config.fourier_dim)
                .map(|_| config.fourier_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        } else {
            Vec::new()
        };
        let net = UNet::new(config.unet_spec());
        let params = net.init_params(&mut rng);
        Ok(Self {
            config,
            frequencies,
            params,
            net,
        })
    }

    pub fn from_parts(config: ScoreModelConfig, frequencies: Vec<f64>, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected_freqs = if config.noise_conditioned { config.fourier_dim } else { 0 };
        if frequencies.len() != expected_freqs {
            return Err(Error::InvalidConfig(format!(
                "expected {expected_freqs} Fourier frequencies, got {}",
                frequencies.len()
            )));
        }
        let net = UNet::new(config.unet_spec());
        if params.len() != net.param_count() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                net.param_count(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            frequencies,
            params,
            net,
        })
    }

    pub fn config(&self) -> &ScoreModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &SigmaSchedule {
        &self.config.schedule
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_conditional(&self) -> bool {
        self.config.conditional
    }

    pub fn is_noise_conditioned(&self) -> bool {
        self.config.noise_conditioned
    }

    /// `[sin(2 pi f_i u), cos(2 pi f_i u)]` with `u = ln sigma_t`.
    pub fn fourier_embed(&self, t: f64) -> Result<Vec<f64>> {
        let u = self.config.schedule.sigma(t)?.ln();
        Ok(self.embed_log_sigma(u))
    }

    fn embed_log_sigma(&self, u: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.frequencies.len());
        out.extend(self.frequencies.iter().map(|f| (2.0 * PI * f * u).sin()));
        out.extend(self.frequencies.iter().map(|f| (2.0 * PI * f * u).cos()));
        out
    }

    fn check_image(&self, img: &ImageTensor, what: &str) -> Result<()> {
        let expected = self.config.image_shape();
        if img.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{what} of shape {expected}"),
                got: img.shape().to_string(),
            });
        }
        Ok(())
    }

    /// Estimated score `s(x_t, [y], t)`; `t` may be 0 (evaluates at `sigma_min`).
    pub fn score_forward(&self, xt: &ImageTensor, condition: Option<&ImageTensor>, t: f64) -> Result<ImageTensor> {
        let conds = condition.map(|c| vec![c]);
        let pass = self.score_batch(&[xt], conds.as_deref(), &[t])?;
        ImageTensor::new(xt.shape(), pass.scores)
    }

    pub(crate) fn score_batch(
        &self,
        xs: &[&ImageTensor],
        conds: Option<&[&ImageTensor]>,
        ts: &[f64],
    ) -> Result<ScorePass> {
        if !self.config.noise_conditioned {
            return Err(Error::Misuse("the baseline U-Net has no score; use unet_forward".into()));
        }
        match (self.config.conditional, conds) {
            (true, None) => return Err(Error::Misuse("conditional score model called without a condition".into())),
            (false, Some(_)) => {
                return Err(Error::Misuse("unconditional score model called with a condition".into()))
            }
            _ => {}
        }
        let n = xs.len();
        assert_eq!(ts.len(), n);
        let size = self.config.image_size();
        let plane = size * size;
        let mut input = Batch::zeros(n, self.config.input_channels, size, size);
        let mut features = Vec::with_capacity(n * 2 * self.frequencies.len());
        let mut sigmas = Vec::with_capacity(n);
        for i in 0..n {
            self.check_image(xs[i], "perturbed image")?;
            let sigma = self.config.schedule.sigma(ts[i])?;
            sigmas.push(sigma);
            features.extend(self.embed_log_sigma(sigma.ln()));
            let c_in = if self.config.input_scaling {
                1.0 / (1.0 + sigma * sigma).sqrt()
            } else {
                1.0
            };
            let dst = input.sample_mut(i);
            for (d, &v) in dst[..plane].iter_mut().zip(xs[i].values()) {
                *d = c_in * v;
            }
            if let Some(cs) = conds {
                self.check_image(cs[i], "condition")?;
                dst[plane..].copy_from_slice(cs[i].values());
            }
        }
        let (out, tape) = self.net.forward(&self.params, input, features);
        let mut scores = out.data;
        for (i, s) in sigmas.iter().enumerate() {
            scores[i * plane..(i + 1) * plane].iter_mut().for_each(|v| *v /= s);
        }
        Ok(ScorePass { scores, sigmas, tape })
    }

    /// Parameter gradient given `dL/dscore` for every sample of the pass.
    pub(crate) fn score_backward(&self, pass: &ScorePass, dscores: &[f64]) -> Vec<f64> {
        let size = self.config.image_size();
        let plane = size * size;
        let n = pass.sigmas.len();
        let mut dout = Batch::zeros(n, 1, size, size);
        for (i, s) in pass.sigmas.iter().enumerate() {
            for (d, &v) in dout.data[i * plane..(i + 1) * plane]
                .iter_mut()
                .zip(&dscores[i * plane..(i + 1) * plane])
            {
                *d = v / s;
            }
        }
        self.net.backward(&self.params, &pass.tape, &dout)
    }

    /// Baseline prediction: condition in, radiograph in `[0, 1]` out.
    pub fn unet_forward(&self, condition: &ImageTensor) -> Result<ImageTensor> {
        let pass = self.unet_batch(&[condition])?;
        ImageTensor::new(condition.shape(), pass.preds)
    }

    pub(crate) fn unet_batch(&self, conds: &[&ImageTensor]) -> Result<UnetPass> {
        if self.config.noise_conditioned {
            return Err(Error::Misuse("unet_forward needs a model built without noise conditioning".into()));
        }
        let size = self.config.image_size();
        let mut input = Batch::zeros(conds.len(), 1, size, size);
        for (i, c) in conds.iter().enumerate() {
            self.check_image(c, "condition")?;
            input.sample_mut(i).copy_from_slice(c.values());
        }
        let (out, tape) = self.net.forward(&self.params, input, Vec::new());
        let preds = out.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(UnetPass {
            raw: out.data,
            preds,
            tape,
        })
    }

    /// Parameter gradient given `dL/dprediction`; the clamp passes gradient
    /// where the raw output lies in `[0, 1]`.
    pub(crate) fn unet_backward(&self, pass: &UnetPass, dpreds: &[f64]) -> Vec<f64> {
        let size = self.config.image_size();
        let mut dout = Batch::zeros(pass.raw.len() / (size * size), 1, size, size);
        for ((d, &g), &r) in dout.data.iter_mut().zip(dpreds).zip(&pass.raw) {
            *d = if (0.0..=1.0).contains(&r) { g } else { 0.0 };
        }
        self.net.backward(&self.params, &pass.tape, &dout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(conditional: bool) -> ScoreModelConfig {
        ScoreModelConfig {
            fourier_dim: 8,
            ..ScoreModelConfig::desk(conditional).with_levels(&[8, 4], &[4, 8])
        }
    }

    #[test]
    fn validation_rules() {
        assert!(tiny(false).validate().is_ok());
        assert!(tiny(true).validate().is_ok());
        let mut c = tiny(true);
        c.input_channels = 1;
        assert!(c.validate().is_err());
        assert!(tiny(false).with_levels(&[8], &[4]).validate().is_err());
        assert!(tiny(false).with_levels(&[8, 2], &[4, 4]).validate().is_err());
        assert!(tiny(false).with_levels(&[6, 3], &[4, 4]).validate().is_err());
        assert!(tiny(false).with_levels(&[1, 1], &[32, 32]).validate().is_ok());
        // a single channel at 1x1 leaves nothing to normalise
        assert!(tiny(false).with_levels(&[1, 1], &[1, 1]).validate().is_err());
        let unet = ScoreModelConfig {
            conditional: true,
            input_channels: 2,
            ..ScoreModelConfig::desk_unet()
        };
        assert!(unet.validate().is_err());
    }

    #[test]
    fn parameter_count_depends_on_config_only() {
        let a = ScoreModel::new(tiny(true), 1).unwrap();
        let b = ScoreModel::new(tiny(true), 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(a.param_count(), parameter_count(&tiny(true)).unwrap());
        assert_ne!(a.params(), b.params());
    }

    #[test]
    fn fourier_embedding_properties() {
        let m = ScoreModel::new(tiny(false), 3).unwrap();
        let e = m.fourier_embed(0.37).unwrap();
        assert_eq!(e.len(), 16);
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        for i in 0..8 {
            assert!((e[i] * e[i] + e[i + 8] * e[i + 8] - 1.0).abs() < 1e-12);
        }
        assert_eq!(e, m.fourier_embed(0.37).unwrap());
        assert!(m.fourier_embed(1.5).is_err());
    }

    #[test]
    fn fresh_model_scores_zero_and_keeps_shape() {
        let m = ScoreModel::new(tiny(true), 4).unwrap();
        let x = ImageTensor::filled(Shape::square(8), 0.3);
        let y = ImageTensor::filled(Shape::square(8), 0.5);
        let s = m.score_forward(&x, Some(&y), 0.5).unwrap();
        assert_eq!(s.shape(), x.shape());
        assert!(s.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditionality_is_enforced() {
        let x = ImageTensor::zeros(Shape::square(8));
        let cond = ScoreModel::new(tiny(true), 0).unwrap();
        let uncond = ScoreModel::new(tiny(false), 0).unwrap();
        assert!(matches!(cond.score_forward(&x, None, 0.5), Err(Error::Misuse(_))));
        assert!(matches!(uncond.score_forward(&x, Some(&x), 0.5), Err(Error::Misuse(_))));
        assert!(matches!(uncond.unet_forward(&x), Err(Error::Misuse(_))));
        assert!(uncond.score_forward(&ImageTensor::zeros(Shape::square(4)), None, 0.5).is_err());
    }

    #[test]
    fn unet_output_is_clamped_and_deterministic() {
        let cfg = ScoreModelConfig::desk_unet().with_levels(&[8, 4], &[4, 8]);
        let mut m = ScoreModel::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m.params_mut().iter_mut().for_each(|v| *v += 0.2 * rng.sample::<f64, _>(StandardNormal));
        let c = ImageTensor::from_fn(Shape::square(8), |_, y, x| if (x + y) % 3 == 0 { 0.5 } else { 0.0 });
        let a = m.unet_forward(&c).unwrap();
        assert_eq!(a.shape(), c.shape());
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.values().iter().any(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a, m.unet_forward(&c).unwrap());
        assert!(m.score_forward(&c, None, 0.5).is_err());
    }
}
