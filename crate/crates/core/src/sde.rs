//! Variance-exploding SDE: noise schedule, coefficients, perturbation kernel
//! and prior.
//!
//! The forward process has zero drift and a noise level that grows
//! geometrically from `sigma_min` at `t = 0` to `sigma_max` at `t = 1`:
//!
//! ```text
//! sigma(t) = sigma_min * (sigma_max / sigma_min)^t
//! g(t)     = sigma(t) * sqrt(2 ln(sigma_max / sigma_min))
//! x_t | x_0 ~ N(x_0, sigma(t)^2 I)
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Shape};

/// Geometric noise schedule of the VE SDE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSchedule {
    sigma_min: f64,
    sigma_max: f64,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            sigma_max: 128.0,
        }
    }
}

impl SigmaSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise schedule needs 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
            )));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
        })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    /// `ln(sigma_max / sigma_min)`.
    pub fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    /// Noise standard deviation at time `t` in `[0, 1]`.
    ///
    /// The endpoints return `sigma_min` and `sigma_max` exactly.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(self.sigma_unchecked(t))
    }

    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        if t == 0.0 {
            self.sigma_min
        } else if t == 1.0 {
            self.sigma_max
        } else {
            (self.sigma_min.ln() + t * self.log_ratio()).exp()
        }
    }

    /// Drift and diffusion coefficients `(f, g)` at time `t`. The drift is
    /// identically zero for the VE process.
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64)> {
        let sigma = self.sigma(t)?;
        Ok((0.0, sigma * (2.0 * self.log_ratio()).sqrt()))
    }
}

/// A diffusion time in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TimePoint(f64);

impl TimePoint {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Domain(format!("time point {t} outside (0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Draws `x_t = x0 + sigma(t) * noise`.
pub fn perturb(
    x0: &ImageTensor,
    schedule: &SigmaSchedule,
    t: TimePoint,
    noise: &ImageTensor,
) -> Result<ImageTensor> {
    let sigma = schedule.sigma(t.get())?;
    x0.zip_map(noise, |a, z| a + sigma * z)
}

/// Score of the Gaussian perturbation kernel, `(x0 - xt) / sigma(t)^2`.
pub fn kernel_score(
    xt: &ImageTensor,
    x0: &ImageTensor,
    schedule: &SigmaSchedule,
    t: TimePoint,
) -> Result<ImageTensor> {
    let sigma = schedule.sigma(t.get())?;
    let inv_var = 1.0 / (sigma * sigma);
    x0.zip_map(xt, |a, b| (a - b) * inv_var)
}

/// i.i.d. `N(0, sigma_max^2)` entries.
pub fn prior_sample<R: Rng + ?Sized>(shape: Shape, schedule: &SigmaSchedule, rng: &mut R) -> ImageTensor {
    let mut x = ImageTensor::standard_normal(shape, rng);
    let s = schedule.sigma_max();
    x.values_mut().iter_mut().for_each(|v| *v *= s);
    x
}
