//! Sweep normalisation and the two segmentation conditions.

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Label of the body outline.
pub const CONTOUR_VALUE: f64 = 0.5;
/// Label of bone inside the body.
pub const BONE_VALUE: f64 = 1.0;
pub const DEFAULT_CONTOUR_THRESHOLD: f64 = 0.1;
pub const DEFAULT_BONE_THRESHOLD: f64 = 0.0;

/// Maps a set of projections affinely to `[0, 1]` using the set's global
/// minimum and maximum.
pub fn normalize_set(projections: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
    if projections.is_empty() {
        return Err(Error::DegenerateInput("no projections to normalize".into()));
    }
    let (lo, hi) = projections.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let (a, b) = p.min_max();
        (lo.min(a), hi.max(b))
    });
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "projection set is constant (min {lo}, max {hi})"
        )));
    }
    let scale = 1.0 / (hi - lo);
    Ok(projections
        .iter()
        .map(|p| p.map(|v| ((v - lo) * scale).clamp(0.0, 1.0)))
        .collect())
}

/// `0.5` where `drr > threshold`, else `0`.
pub fn contour_segmentation(drr: &ImageTensor, threshold: f64) -> ImageTensor {
    drr.map(|v| if v > threshold { CONTOUR_VALUE } else { 0.0 })
}

#[derive(Debug, Clone)]
pub struct BoneSegmentation {
    pub condition: ImageTensor,
    /// Bone pixels that fell outside the contour and were clamped to 1.
    pub outside_contour: usize,
}

/// Adds `0.5` to the contour wherever the bone-mask projection exceeds
/// `bone_threshold`. Bone pixels outside the contour are counted and the
/// result is clamped to `1`.
pub fn bone_segmentation(
    bone_projection: &ImageTensor,
    contour: &ImageTensor,
    bone_threshold: f64,
) -> Result<BoneSegmentation> {
    bone_projection.ensure_same_shape(contour)?;
    let outside = bone_projection
        .values()
        .iter()
        .zip(contour.values())
        .filter(|&(&b, &c)| b > bone_threshold && c == 0.0)
        .count();
    let condition = bone_projection.zip_map(contour, |b, c| {
        if b > bone_threshold {
            (c + CONTOUR_VALUE).min(BONE_VALUE)
        } else {
            c
        }
    })?;
    Ok(BoneSegmentation {
        condition,
        outside_contour: outside,
    })
}
