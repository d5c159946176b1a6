//! Procedural leg phantoms, parallel-beam radiographs and segmentation
//! conditions.

pub mod dataset;
pub mod projector;
pub mod segmentation;
pub mod volume;

pub use dataset::{
    assign_splits, build_dataset, simulate_phantom, split_counts, BuildStats, ConditionKind, DatasetManifest,
    ManifestRecord, PhantomViews, Split, MANIFEST_NAME,
};
pub use projector::{forward_project, project_sweep, ProjectionGeometry};
pub use segmentation::{bone_segmentation, contour_segmentation, normalize_set, BoneSegmentation};
pub use volume::{build_phantom, PhantomParams, VolumeGrid};
