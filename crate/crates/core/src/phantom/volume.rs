//! Procedural leg phantoms on a voxel grid.
//!
//! The body is an elliptic soft-tissue cylinder along `z` whose radius tapers
//! from thigh to calf. Inside it sit a femur (upper shaft), a tibia (lower
//! shaft) and optionally a patella in front of the knee.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Voxel volume centred on the origin, `z`-major then `y` then `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    nx: usize,
    ny: usize,
    nz: usize,
    spacing: f64,
    attenuation: Vec<f64>,
    bone_mask: Vec<bool>,
}

impl VolumeGrid {
    pub fn new(nx: usize, ny: usize, nz: usize, spacing: f64, attenuation: Vec<f64>, bone_mask: Vec<bool>) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Parameter("volume dimensions must be positive".into()));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::Parameter(format!("voxel spacing must be positive, got {spacing}")));
        }
        let n = nx * ny * nz;
        if attenuation.len() != n || bone_mask.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} voxels"),
                got: format!("{} attenuation, {} mask", attenuation.len(), bone_mask.len()),
            });
        }
        if attenuation.iter().any(|&m| !(m >= 0.0 && m.is_finite())) {
            return Err(Error::Parameter("attenuation must be finite and non-negative".into()));
        }
        if bone_mask.iter().zip(&attenuation).any(|(&b, &m)| b && m <= 0.0) {
            return Err(Error::Parameter("bone mask marks a voxel without attenuation".into()));
        }
        Ok(Self {
            nx,
            ny,
            nz,
            spacing,
            attenuation,
            bone_mask,
        })
    }

    /// Volume of the given shape filled from a function of voxel-centre
    /// coordinates in mm, with an empty bone mask.
    pub fn from_fn(nx: usize, ny: usize, nz: usize, spacing: f64, mut f: impl FnMut(f64, f64, f64) -> f64) -> Result<Self> {
        let mut att = Vec::with_capacity(nx * ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    att.push(f(
                        centre(i, nx, spacing),
                        centre(j, ny, spacing),
                        centre(k, nz, spacing),
                    ));
                }
            }
        }
        Self::new(nx, ny, nz, spacing, att, vec![false; nx * ny * nz])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn attenuation(&self) -> &[f64] {
        &self.attenuation
    }

    pub fn bone_mask(&self) -> &[bool] {
        &self.bone_mask
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.ny + j) * self.nx + i
    }

    /// Indicator volume of the bone mask (attenuation 1 on bone voxels).
    pub fn bone_volume(&self) -> VolumeGrid {
        Self {
            attenuation: self.bone_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            ..self.clone()
        }
    }

    /// `alpha * self + beta * other` on the same grid; the mask is the union.
    pub fn combine(&self, alpha: f64, other: &VolumeGrid, beta: f64) -> Result<VolumeGrid> {
        if self.dims() != other.dims() || self.spacing != other.spacing {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?} @ {}", self.dims(), self.spacing),
                got: format!("{:?} @ {}", other.dims(), other.spacing),
            });
        }
        let att: Vec<f64> = self
            .attenuation
            .iter()
            .zip(&other.attenuation)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let mask = self
            .bone_mask
            .iter()
            .zip(&other.bone_mask)
            .zip(&att)
            .map(|((&a, &b), &m)| (a || b) && m > 0.0)
            .collect();
        Self::new(self.nx, self.ny, self.nz, self.spacing, att, mask)
    }

    pub fn body_voxels(&self) -> usize {
        self.attenuation.iter().filter(|&&m| m > 0.0).count()
    }

    pub fn bone_voxels(&self) -> usize {
        self.bone_mask.iter().filter(|&&b| b).count()
    }
}

pub(crate) fn centre(i: usize, n: usize, spacing: f64) -> f64 {
    (i as f64 - (n as f64 - 1.0) / 2.0) * spacing
}

/// Random phantom description. Ranges are `(low, high)` in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomParams {
    pub seed: u64,
    /// Voxel counts `(nx, ny, nz)`.
    pub grid: (usize, usize, usize),
    /// Isotropic voxel size in mm.
    pub spacing: f64,
    pub leg_radius_range: (f64, f64),
    pub bone_radius_range: (f64, f64),
    /// Distance of the bone shaft axes from the leg axis.
    pub bone_offset_range: (f64, f64),
    pub soft_tissue_mu: f64,
    pub bone_mu: f64,
    /// 2 (femur, tibia) or 3 (plus patella).
    pub n_bones: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: (64, 64, 64),
            spacing: 2.0,
            leg_radius_range: (38.0, 52.0),
            bone_radius_range: (7.0, 11.0),
            bone_offset_range: (0.0, 8.0),
            soft_tissue_mu: 0.02,
            bone_mu: 0.05,
            n_bones: 3,
        }
    }
}

/// Smallest ratio of the short to the long body semi-axis.
const MIN_ELLIPTICITY: f64 = 0.8;

fn check_range(name: &str, r: (f64, f64), allow_zero: bool) -> Result<()> {
    let low_ok = if allow_zero { r.0 >= 0.0 } else { r.0 > 0.0 };
    if !low_ok || !(r.1 >= r.0) || !r.1.is_finite() {
        return Err(Error::Parameter(format!("{name} must be a non-empty positive interval, got {r:?}")));
    }
    Ok(())
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.grid;
        if nx < 4 || ny < 4 || nz < 4 {
            return Err(Error::Parameter(format!("grid {:?} too small", self.grid)));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::Parameter("spacing must be positive".into()));
        }
        check_range("leg_radius_range", self.leg_radius_range, false)?;
        check_range("bone_radius_range", self.bone_radius_range, false)?;
        check_range("bone_offset_range", self.bone_offset_range, true)?;
        if !(self.soft_tissue_mu > 0.0 && self.bone_mu > self.soft_tissue_mu) {
            return Err(Error::Parameter(format!(
                "need bone_mu > soft_tissue_mu > 0, got {} and {}",
                self.bone_mu, self.soft_tissue_mu
            )));
        }
        if !(2..=3).contains(&self.n_bones) {
            return Err(Error::Parameter(format!("n_bones must be 2 or 3, got {}", self.n_bones)));
        }
        // The body must stay inside the in-plane circle so every view sees all of it.
        let half = (nx.min(ny) as f64 / 2.0 - 1.0) * self.spacing;
        if self.leg_radius_range.1 > half {
            return Err(Error::Parameter(format!(
                "leg radius up to {} mm does not fit the {half} mm field of view",
                self.leg_radius_range.1
            )));
        }
        let inner = MIN_ELLIPTICITY * self.leg_radius_range.0 - 2.0 * self.spacing;
        if self.bone_offset_range.1 + self.bone_radius_range.1 > inner {
            return Err(Error::Parameter(format!(
                "bones (offset {} + radius {} mm) cannot fit inside a body of minor radius {} mm",
                self.bone_offset_range.1,
                self.bone_radius_range.1,
                MIN_ELLIPTICITY * self.leg_radius_range.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Shaft {
    cx: f64,
    cy: f64,
    r: f64,
    z_lo: f64,
    z_hi: f64,
}

impl Shaft {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        z >= self.z_lo && z <= self.z_hi && (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.r * self.r
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    c: (f64, f64, f64),
    a: (f64, f64, f64),
}

impl Ellipsoid {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        ((x - self.c.0) / self.a.0).powi(2) + ((y - self.c.1) / self.a.1).powi(2) + ((z - self.c.2) / self.a.2).powi(2)
            <= 1.0
    }
}

fn uniform<R: Rng>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

/// Builds one phantom. Deterministic in `params.seed`.
pub fn build_phantom(params: &PhantomParams) -> Result<VolumeGrid> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (nx, ny, nz) = params.grid;
    let s = params.spacing;
    let z_half = nz as f64 * s / 2.0;

    let r_thigh = uniform(&mut rng, params.leg_radius_range);
    let r_calf = uniform(&mut rng, (params.leg_radius_range.0, r_thigh));
    let ellipticity = rng.random_range(MIN_ELLIPTICITY..=1.0);
    let knee_z = rng.random_range(-0.15..0.15) * z_half;
    let knee_gap = rng.random_range(1.5..3.0) * s;
    let body = |x: f64, y: f64, z: f64| {
        // smooth taper centred at the knee
        let w = 0.5 * (1.0 + ((z - knee_z) / (0.35 * z_half)).tanh());
        let rx = r_calf + (r_thigh - r_calf) * w;
        let ry = ellipticity * rx;
        (x / rx).powi(2) + (y / ry).powi(2) <= 1.0
    };

    let shaft = |rng: &mut ChaCha8Rng, z_lo: f64, z_hi: f64| {
        let r = uniform(rng, params.bone_radius_range);
        let d = uniform(rng, params.bone_offset_range);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        Shaft {
            cx: d * phi.cos(),
            cy: d * phi.sin(),
            r,
            z_lo,
            z_hi,
        }
    };
    let femur = shaft(&mut rng, knee_z + knee_gap / 2.0, z_half);
    let tibia = shaft(&mut rng, -z_half, knee_z - knee_gap / 2.0);
    let patella = (params.n_bones == 3).then(|| {
        let a = uniform(&mut rng, params.bone_radius_range);
        let semi = (0.8 * a, 0.45 * a, 1.1 * a);
        // minor body radius at the knee, with a voxel of tissue in front
        let front = MIN_ELLIPTICITY * params.leg_radius_range.0 - semi.1 - 2.0 * s;
        Ellipsoid {
            c: (0.0, front, knee_z),
            a: semi,
        }
    });

    const SUB: usize = 4;
    let n = nx * ny * nz;
    let mut att = vec![0.0; n];
    let mut mask = vec![false; n];
    for k in 0..nz {
        let z = centre(k, nz, s);
        for j in 0..ny {
            let y = centre(j, ny, s);
            for i in 0..nx {
                let x = centre(i, nx, s);
                let idx = (k * ny + j) * nx + i;
                let in_body = body(x, y, z);
                let in_bone =
                    femur.contains(x, y, z) || tibia.contains(x, y, z) || patella.is_some_and(|p| p.contains(x, y, z));
                if in_bone && !in_body {
                    return Err(Error::Parameter(format!(
                        "seed {}: bone voxel ({i}, {j}, {k}) lies outside the body",
                        params.seed
                    )));
                }
                if in_bone {
                    att[idx] = params.bone_mu;
                    mask[idx] = true;
                } else {
                    // partial-volume edge: fraction of an in-plane sub-grid inside the body
                    let mut inside = 0;
                    for a in 0..SUB {
                        for b in 0..SUB {
                            let px = x + ((a as f64 + 0.5) / SUB as f64 - 0.5) * s;
                            let py = y + ((b as f64 + 0.5) / SUB as f64 - 0.5) * s;
                            inside += body(px, py, z) as usize;
                        }
                    }
                    att[idx] = params.soft_tissue_mu * inside as f64 / (SUB * SUB) as f64;
                }
            }
        }
    }
    VolumeGrid::new(nx, ny, nz, s, att, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_volume() {
        let p = PhantomParams {
            seed: 11,
            ..PhantomParams::default()
        };
        assert_eq!(build_phantom(&p).unwrap(), build_phantom(&p).unwrap());
        let q = PhantomParams { seed: 12, ..p };
        assert_ne!(build_phantom(&q).unwrap().attenuation(), build_phantom(&p).unwrap().attenuation());
    }

    #[test]
    fn bones_inside_body_and_fraction_bounded() {
        for seed in 0..8 {
            let v = build_phantom(&PhantomParams {
                seed,
                ..PhantomParams::default()
            })
            .unwrap();
            assert!(v
                .bone_mask()
                .iter()
                .zip(v.attenuation())
                .all(|(&b, &m)| !b || m > 0.0));
            let frac = v.bone_voxels() as f64 / v.body_voxels() as f64;
            assert!(frac > 0.0 && frac < 0.5, "seed {seed}: {frac}");
        }
    }

    #[test]
    fn infeasible_geometry_is_a_parameter_error() {
        let p = PhantomParams {
            bone_radius_range: (30.0, 40.0),
            ..PhantomParams::default()
        };
        assert!(matches!(build_phantom(&p), Err(Error::Parameter(_))));
        let q = PhantomParams {
            leg_radius_range: (38.0, 200.0),
            ..PhantomParams::default()
        };
        assert!(matches!(build_phantom(&q), Err(Error::Parameter(_))));
        let r = PhantomParams {
            bone_mu: 0.01,
            ..PhantomParams::default()
        };
        assert!(matches!(build_phantom(&r), Err(Error::Parameter(_))));
    }

    #[test]
    fn combine_is_linear() {
        let a = build_phantom(&PhantomParams::default()).unwrap();
        let b = a.bone_volume();
        let c = a.combine(2.0, &b, 3.0).unwrap();
        for ((x, y), z) in a.attenuation().iter().zip(b.attenuation()).zip(c.attenuation()) {
            assert_eq!(*z, 2.0 * x + 3.0 * y);
        }
    }
}
