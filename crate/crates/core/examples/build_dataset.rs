//! Generates a small split dataset with a manifest and prints the split
//! counts.
//!
//! Usage: `cargo run --release --example build_dataset [out_dir] [n_phantoms]`

use segdiff::phantom::build_dataset;
use segdiff::{ConditionKind, DatasetManifest, PhantomParams, ProjectionGeometry, Split};

fn main() -> segdiff::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "dataset_out".into());
    let n: usize = args.next().map(|a| a.parse().expect("n_phantoms")).unwrap_or(6);

    let geom = ProjectionGeometry::sweep(12, 64, 64, 2.0)?;
    let (manifest, stats) = build_dataset(&out, n, &geom, &PhantomParams::default(), 11)?;
    let (tr, va, te) = manifest.phantom_counts();
    let (itr, iva, ite) = manifest.image_counts();
    println!("phantoms train/val/test: {tr}/{va}/{te}");
    println!("images   train/val/test: {itr}/{iva}/{ite}");
    println!("bone pixels outside contour: {}", stats.bone_outside_contour);

    let reloaded = DatasetManifest::load(manifest.root.join(segdiff::phantom::MANIFEST_NAME))?;
    let (drr, cond) = reloaded.load_split(Split::Val, ConditionKind::ContourBone)?;
    println!("reloaded {} validation pairs, first condition mean {:.3}", drr.len(), cond[0].mean());
    Ok(())
}
