//! Dataset generation, phantom-level splits and the manifest file.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.tsv
//! images/p003_v017_drr.pgm
//! images/p003_v017_contour.pgm
//! images/p003_v017_contour_bone.pgm
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pgm;
use crate::phantom::projector::{project_sweep, ProjectionGeometry};
use crate::phantom::segmentation::{
    bone_segmentation, contour_segmentation, normalize_set, DEFAULT_BONE_THRESHOLD, DEFAULT_CONTOUR_THRESHOLD,
};
use crate::phantom::volume::{build_phantom, PhantomParams};
use crate::tensor::ImageTensor;

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "# phantom_id\tview_index\tsplit\tradiograph_path\tcontour_path\tcontour_bone_path";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// Which segmentation conditions a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConditionKind {
    Contour,
    ContourBone,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 2] = [ConditionKind::Contour, ConditionKind::ContourBone];
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditionKind::Contour => "contour",
            ConditionKind::ContourBone => "contour_bone",
        })
    }
}

impl FromStr for ConditionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contour" => Ok(ConditionKind::Contour),
            "contour_bone" | "contour+bone" => Ok(ConditionKind::ContourBone),
            other => Err(Error::InvalidConfig(format!("unknown condition type {other:?}"))),
        }
    }
}

/// Phantoms per split `(train, val, test)` for a 9:1:1 ratio. Validation
/// rounds down, test rounds up, each is at least one, and training gets the
/// remainder.
pub fn split_counts(n_phantoms: usize) -> Result<(usize, usize, usize)> {
    if n_phantoms < 3 {
        return Err(Error::Parameter(format!("need at least 3 phantoms, got {n_phantoms}")));
    }
    let val = (n_phantoms / 11).max(1);
    let test = n_phantoms.div_ceil(11).max(1);
    Ok((n_phantoms - val - test, val, test))
}

/// Split of every phantom id, from a seeded shuffle.
pub fn assign_splits(n_phantoms: usize, split_seed: u64) -> Result<Vec<Split>> {
    let (_, val, test) = split_counts(n_phantoms)?;
    let mut ids: Vec<usize> = (0..n_phantoms).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let mut splits = vec![Split::Train; n_phantoms];
    for (rank, &id) in ids.iter().enumerate() {
        if rank < test {
            splits[id] = Split::Test;
        } else if rank < test + val {
            splits[id] = Split::Val;
        }
    }
    Ok(splits)
}

/// All views of one phantom: radiographs and both conditions.
#[derive(Debug, Clone)]
pub struct PhantomViews {
    /// Normalised to `[0, 1]` over the sweep and quantised to the 16-bit
    /// storage grid, so that the stored files reproduce them exactly.
    pub radiographs: Vec<ImageTensor>,
    pub contours: Vec<ImageTensor>,
    pub contour_bones: Vec<ImageTensor>,
    /// Bone pixels that fell outside the contour, summed over views.
    pub bone_outside_contour: usize,
}

/// Builds, projects and segments one phantom.
pub fn simulate_phantom(params: &PhantomParams, geom: &ProjectionGeometry) -> Result<PhantomViews> {
    let vol = build_phantom(params)?;
    let bones = vol.bone_volume();
    let mut sweeps = project_sweep(&[&vol, &bones], geom)?;
    let bone_proj = sweeps.pop().expect("two sweeps");
    let drr = sweeps.pop().expect("two sweeps");
    let radiographs: Vec<ImageTensor> = normalize_set(&drr)?
        .iter()
        .map(|img| img.map(|v| pgm::dequantize(pgm::quantize(v))))
        .collect();
    let mut contours = Vec::with_capacity(radiographs.len());
    let mut contour_bones = Vec::with_capacity(radiographs.len());
    let mut outside = 0;
    for (r, b) in radiographs.iter().zip(&bone_proj) {
        let c = contour_segmentation(r, DEFAULT_CONTOUR_THRESHOLD);
        let cb = bone_segmentation(b, &c, DEFAULT_BONE_THRESHOLD)?;
        outside += cb.outside_contour;
        contours.push(c);
        contour_bones.push(cb.condition);
    }
    Ok(PhantomViews {
        radiographs,
        contours,
        contour_bones,
        bone_outside_contour: outside,
    })
}

/// Seed of phantom `id` given the template seed.
pub fn phantom_seed(base: u64, id: usize) -> u64 {
    base.wrapping_add(id as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub phantom_id: usize,
    pub view_index: usize,
    pub split: Split,
    /// Paths relative to the manifest directory.
    pub radiograph: PathBuf,
    pub contour: PathBuf,
    pub contour_bone: PathBuf,
}

impl ManifestRecord {
    pub fn condition_path(&self, kind: ConditionKind) -> &Path {
        match kind {
            ConditionKind::Contour => &self.contour,
            ConditionKind::ContourBone => &self.contour_bone,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory that relative record paths resolve against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Number of images per split `(train, val, test)`.
    pub fn image_counts(&self) -> (usize, usize, usize) {
        let c = |s| self.records_in(s).count();
        (c(Split::Train), c(Split::Val), c(Split::Test))
    }

    /// Number of distinct phantoms per split `(train, val, test)`.
    pub fn phantom_counts(&self) -> (usize, usize, usize) {
        let c = |s| {
            let mut ids: Vec<usize> = self.records_in(s).map(|r| r.phantom_id).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.len()
        };
        (c(Split::Train), c(Split::Val), c(Split::Test))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Loads `(radiographs, conditions)` of one split in manifest order.
    pub fn load_split(&self, split: Split, kind: ConditionKind) -> Result<(Vec<ImageTensor>, Vec<ImageTensor>)> {
        let mut images = Vec::new();
        let mut conds = Vec::new();
        for r in self.records_in(split) {
            images.push(pgm::read_image(self.resolve(&r.radiograph))?);
            conds.push(pgm::read_condition(self.resolve(r.condition_path(kind)))?);
        }
        Ok((images, conds))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.phantom_id,
                r.view_index,
                r.split,
                r.radiograph.display(),
                r.contour.display(),
                r.contour_bone.display()
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; record paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::format(path, format!("line {}: expected 6 fields, found {}", lineno + 1, f.len())));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::format(path, format!("line {}: bad integer {s:?}", lineno + 1)))
            };
            records.push(ManifestRecord {
                phantom_id: num(f[0])?,
                view_index: num(f[1])?,
                split: f[2]
                    .parse()
                    .map_err(|_| Error::format(path, format!("line {}: bad split {:?}", lineno + 1, f[2])))?,
                radiograph: PathBuf::from(f[3]),
                contour: PathBuf::from(f[4]),
                contour_bone: PathBuf::from(f[5]),
            });
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildStats {
    pub bone_outside_contour: usize,
}

/// Simulates `n_phantoms` phantoms over the sweep and writes images plus
/// `manifest.tsv` into `out_dir`. Phantom `id` uses seed
/// `params.seed + id`; splits are by phantom.
pub fn build_dataset(
    out_dir: impl AsRef<Path>,
    n_phantoms: usize,
    geom: &ProjectionGeometry,
    params: &PhantomParams,
    split_seed: u64,
) -> Result<(DatasetManifest, BuildStats)> {
    let out_dir = out_dir.as_ref();
    geom.validate()?;
    params.validate()?;
    let splits = assign_splits(n_phantoms, split_seed)?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(n_phantoms * geom.n_views);
    let mut stats = BuildStats::default();
    for (id, &split) in splits.iter().enumerate() {
        let p = PhantomParams {
            seed: phantom_seed(params.seed, id),
            ..params.clone()
        };
        let views = simulate_phantom(&p, geom)?;
        stats.bone_outside_contour += views.bone_outside_contour;
        for view in 0..geom.n_views {
            let stem = format!("p{id:03}_v{view:02}");
            let rec = ManifestRecord {
                phantom_id: id,
                view_index: view,
                split,
                radiograph: PathBuf::from(format!("images/{stem}_drr.pgm")),
                contour: PathBuf::from(format!("images/{stem}_contour.pgm")),
                contour_bone: PathBuf::from(format!("images/{stem}_contour_bone.pgm")),
            };
            pgm::write_image(out_dir.join(&rec.radiograph), &views.radiographs[view])?;
            pgm::write_condition(out_dir.join(&rec.contour), &views.contours[view])?;
            pgm::write_condition(out_dir.join(&rec.contour_bone), &views.contour_bones[view])?;
            records.push(rec);
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.save(out_dir.join(MANIFEST_NAME))?;
    Ok((manifest, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_sizes() {
        assert_eq!(split_counts(11).unwrap(), (9, 1, 1));
        assert_eq!(split_counts(16).unwrap(), (13, 1, 2));
        assert_eq!(split_counts(55).unwrap(), (45, 5, 5));
        assert_eq!(split_counts(3).unwrap(), (1, 1, 1));
        assert!(split_counts(2).is_err());
    }

    proptest! {
        #[test]
        fn splits_partition_phantoms(n in 3usize..200, seed in any::<u64>()) {
            let s = assign_splits(n, seed).unwrap();
            let (tr, va, te) = split_counts(n).unwrap();
            prop_assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), tr);
            prop_assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), va);
            prop_assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), te);
            prop_assert!(tr >= 1 && va >= 1 && te >= 1);
        }
    }

    fn small() -> (ProjectionGeometry, PhantomParams) {
        let geom = ProjectionGeometry::sweep(6, 16, 16, 4.0).unwrap();
        let params = PhantomParams {
            grid: (16, 16, 16),
            spacing: 4.0,
            leg_radius_range: (24.0, 26.0),
            bone_radius_range: (4.0, 6.0),
            bone_offset_range: (0.0, 2.0),
            ..PhantomParams::default()
        };
        (geom, params)
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (geom, params) = small();
        let (m, _) = build_dataset(dir.path(), 4, &geom, &params, 3).unwrap();
        assert_eq!(m.len(), 24);
        assert_eq!(m.phantom_counts(), (2, 1, 1));
        let loaded = DatasetManifest::load(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(loaded.records, m.records);
        let (imgs, conds) = loaded.load_split(Split::Val, ConditionKind::ContourBone).unwrap();
        assert_eq!(imgs.len(), 6);
        let views = simulate_phantom(
            &PhantomParams {
                seed: phantom_seed(params.seed, loaded.records_in(Split::Val).next().unwrap().phantom_id),
                ..params
            },
            &geom,
        )
        .unwrap();
        assert_eq!(imgs, views.radiographs);
        assert_eq!(conds, views.contour_bones);
    }

    #[test]
    fn phantom_views_span_unit_range() {
        let (geom, params) = small();
        let v = simulate_phantom(&params, &geom).unwrap();
        let lo = v.radiographs.iter().map(|r| r.min_max().0).fold(f64::INFINITY, f64::min);
        let hi = v.radiographs.iter().map(|r| r.min_max().1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        for (r, c) in v.radiographs.iter().zip(&v.contours) {
            for (x, y) in r.values().iter().zip(c.values()) {
                assert_eq!(*y == 0.5, *x > 0.1);
            }
        }
        assert!(v.contour_bones.iter().any(|c| c.values().contains(&1.0)));
    }
}
