//! Run configuration: `key = value` lines with dotted section prefixes.
//!
//! ```text
//! # comment
//! seed = 7
//! data.n_phantoms = 16
//! model.channels = 32, 64, 64
//! sampler.n_steps = 500
//! ```
//!
//! Unknown keys are errors. [`RunConfig::to_text`] writes every key, and
//! parsing that text reproduces the configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::phantom::{ConditionKind, PhantomParams, ProjectionGeometry};
use crate::sampler::{Discretization, SamplerConfig};
use crate::score_net::ScoreModelConfig;
use crate::sde::SigmaSchedule;
use crate::training::{LossWeighting, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub levels: Vec<usize>,
    pub channels: Vec<usize>,
    pub fourier_dim: usize,
    pub fourier_scale: f64,
    pub input_scaling: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ScoreModelConfig::desk(false);
        Self {
            levels: d.resolution_levels,
            channels: d.channels_per_level,
            fourier_dim: d.fourier_dim,
            fourier_scale: d.fourier_scale,
            input_scaling: d.input_scaling,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Global seed; every stochastic stage derives its seed from it.
    pub seed: u64,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub n_phantoms: usize,
    pub phantom: PhantomParams,
    pub geometry: ProjectionGeometry,
    pub schedule: SigmaSchedule,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Evaluate at most this many test images (evenly spaced); `None` for all.
    pub eval_max_images: Option<usize>,
    pub eval_conditions: Vec<ConditionKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            n_phantoms: 16,
            phantom: PhantomParams::default(),
            geometry: ProjectionGeometry::default(),
            schedule: SigmaSchedule::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval_max_images: None,
            eval_conditions: ConditionKind::ALL.to_vec(),
        }
    }
}

/// Independent seed for a named stage.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    seed ^ (crc32fast::hash(stage.as_bytes()) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

/// `0` stands for "no limit".
fn optional(n: usize) -> Option<usize> {
    (n > 0).then_some(n)
}

impl RunConfig {
    /// Reads a config file over the defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Sets one key; `assignment` is `key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.phantom;
        let g = &mut self.geometry;
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.sampler;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.dir" => self.data_dir = PathBuf::from(v),
            "data.n_phantoms" => self.n_phantoms = parse(key, v)?,
            "checkpoint.dir" => self.checkpoint_dir = PathBuf::from(v),
            "phantom.grid" => {
                let d: Vec<usize> = parse_list(key, v)?;
                if d.len() != 3 {
                    return Err(Error::InvalidConfig(format!("{key}: expected nx, ny, nz")));
                }
                p.grid = (d[0], d[1], d[2]);
            }
            "phantom.spacing" => p.spacing = parse(key, v)?,
            "phantom.leg_radius_range" => p.leg_radius_range = pair(key, v)?,
            "phantom.bone_radius_range" => p.bone_radius_range = pair(key, v)?,
            "phantom.bone_offset_range" => p.bone_offset_range = pair(key, v)?,
            "phantom.soft_tissue_mu" => p.soft_tissue_mu = parse(key, v)?,
            "phantom.bone_mu" => p.bone_mu = parse(key, v)?,
            "phantom.n_bones" => p.n_bones = parse(key, v)?,
            "geometry.n_views" => g.n_views = parse(key, v)?,
            "geometry.angular_increment" => g.angular_increment = parse(key, v)?,
            "geometry.detector_h" => g.detector_h = parse(key, v)?,
            "geometry.detector_w" => g.detector_w = parse(key, v)?,
            "geometry.pixel_size" => g.detector_pixel_size = parse(key, v)?,
            "schedule.sigma_min" => self.schedule = SigmaSchedule::new(parse(key, v)?, self.schedule.sigma_max())?,
            "schedule.sigma_max" => self.schedule = SigmaSchedule::new(self.schedule.sigma_min(), parse(key, v)?)?,
            "model.levels" => m.levels = parse_list(key, v)?,
            "model.channels" => m.channels = parse_list(key, v)?,
            "model.fourier_dim" => m.fourier_dim = parse(key, v)?,
            "model.fourier_scale" => m.fourier_scale = parse(key, v)?,
            "model.input_scaling" => m.input_scaling = parse_bool(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.max_epochs" => t.max_epochs = parse(key, v)?,
            "train.max_steps" => t.max_steps = optional(parse(key, v)?),
            "train.t_eps" => t.t_eps = parse(key, v)?,
            "train.loss_weighting" => t.loss_weighting = v.parse::<LossWeighting>()?,
            "train.checkpoint_every" => t.checkpoint_every = optional(parse(key, v)?),
            "sampler.n_steps" => s.n_steps = parse(key, v)?,
            "sampler.t0" => s.t0 = parse(key, v)?,
            "sampler.snr" => s.snr = parse(key, v)?,
            "sampler.corrector_steps" => s.corrector_steps = parse(key, v)?,
            "sampler.clamp_output" => s.clamp_output = parse_bool(key, v)?,
            "sampler.t_eps" => s.t_eps = parse(key, v)?,
            "sampler.discretization" => s.discretization = v.parse::<Discretization>()?,
            "eval.max_images" => self.eval_max_images = optional(parse(key, v)?),
            "eval.conditions" => {
                self.eval_conditions = v
                    .split(',')
                    .map(|c| c.trim().parse::<ConditionKind>())
                    .collect::<Result<Vec<_>>>()?
            }
            other => return Err(Error::InvalidConfig(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn to_text(&self) -> String {
        let p = &self.phantom;
        let g = &self.geometry;
        let m = &self.model;
        let t = &self.train;
        let s = &self.sampler;
        let lines = [
            format!("seed = {}", self.seed),
            format!("data.dir = {}", self.data_dir.display()),
            format!("data.n_phantoms = {}", self.n_phantoms),
            format!("checkpoint.dir = {}", self.checkpoint_dir.display()),
            format!("phantom.grid = {}, {}, {}", p.grid.0, p.grid.1, p.grid.2),
            format!("phantom.spacing = {:?}", p.spacing),
            format!("phantom.leg_radius_range = {:?}, {:?}", p.leg_radius_range.0, p.leg_radius_range.1),
            format!("phantom.bone_radius_range = {:?}, {:?}", p.bone_radius_range.0, p.bone_radius_range.1),
            format!("phantom.bone_offset_range = {:?}, {:?}", p.bone_offset_range.0, p.bone_offset_range.1),
            format!("phantom.soft_tissue_mu = {:?}", p.soft_tissue_mu),
            format!("phantom.bone_mu = {:?}", p.bone_mu),
            format!("phantom.n_bones = {}", p.n_bones),
            format!("geometry.n_views = {}", g.n_views),
            format!("geometry.angular_increment = {:?}", g.angular_increment),
            format!("geometry.detector_h = {}", g.detector_h),
            format!("geometry.detector_w = {}", g.detector_w),
            format!("geometry.pixel_size = {:?}", g.detector_pixel_size),
            format!("schedule.sigma_min = {:?}", self.schedule.sigma_min()),
            format!("schedule.sigma_max = {:?}", self.schedule.sigma_max()),
            format!("model.levels = {}", join(&m.levels)),
            format!("model.channels = {}", join(&m.channels)),
            format!("model.fourier_dim = {}", m.fourier_dim),
            format!("model.fourier_scale = {:?}", m.fourier_scale),
            format!("model.input_scaling = {}", m.input_scaling),
            format!("train.batch_size = {}", t.batch_size),
            format!("train.learning_rate = {:?}", t.learning_rate),
            format!("train.max_epochs = {}", t.max_epochs),
            format!("train.max_steps = {}", t.max_steps.unwrap_or(0)),
            format!("train.t_eps = {:?}", t.t_eps),
            format!("train.loss_weighting = {}", t.loss_weighting),
            format!("train.checkpoint_every = {}", t.checkpoint_every.unwrap_or(0)),
            format!("sampler.n_steps = {}", s.n_steps),
            format!("sampler.t0 = {:?}", s.t0),
            format!("sampler.snr = {:?}", s.snr),
            format!("sampler.corrector_steps = {}", s.corrector_steps),
            format!("sampler.clamp_output = {}", s.clamp_output),
            format!("sampler.t_eps = {:?}", s.t_eps),
            format!("sampler.discretization = {}", s.discretization),
            format!("eval.max_images = {}", self.eval_max_images.unwrap_or(0)),
            format!("eval.conditions = {}", join(&self.eval_conditions)),
        ];
        let mut out = String::from("# segdiff effective configuration\n");
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
        out
    }

    /// Eight hex digits identifying the effective configuration.
    pub fn hash(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.to_text().as_bytes()))
    }

    /// Writes the effective configuration to `dir/config.txt`.
    pub fn echo_into(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.txt");
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Network configuration for a score model (`conditional` selects CTM)
    /// or, with `baseline`, for the U-Net.
    pub fn model_config(&self, conditional: bool, baseline: bool) -> ScoreModelConfig {
        let base = if baseline {
            ScoreModelConfig::desk_unet()
        } else {
            ScoreModelConfig::desk(conditional)
        };
        ScoreModelConfig {
            fourier_dim: self.model.fourier_dim,
            fourier_scale: self.model.fourier_scale,
            input_scaling: self.model.input_scaling,
            schedule: self.schedule,
            ..base.with_levels(&self.model.levels, &self.model.channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.geometry.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.model_config(true, false).validate()?;
        if self.model.levels.first() != Some(&self.geometry.detector_h) || self.geometry.detector_h != self.geometry.detector_w {
            return Err(Error::InvalidConfig(format!(
                "model.levels must start at the square detector size {}x{}",
                self.geometry.detector_h, self.geometry.detector_w
            )));
        }
        if self.eval_conditions.is_empty() {
            return Err(Error::InvalidConfig("eval.conditions is empty".into()));
        }
        Ok(())
    }
}

fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let xs: Vec<f64> = parse_list(key, v)?;
    match xs.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::InvalidConfig(format!("{key}: expected low, high"))),
    }
}
