//! Builds one knee phantom, projects a few views and writes the radiographs
//! and both segmentation conditions as 16-bit PGM files.
//!
//! Usage: `cargo run --release --example phantom_radiographs [out_dir]`

use segdiff::phantom::{build_phantom, simulate_phantom};
use segdiff::{pgm, PhantomParams, ProjectionGeometry};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "phantom_out".into());
    std::fs::create_dir_all(&out)?;

    let params = PhantomParams { seed: 3, ..PhantomParams::default() };
    let vol = build_phantom(&params)?;
    let (nx, ny, nz) = vol.dims();
    println!(
        "volume {nx}x{ny}x{nz}, {} body voxels, {} bone voxels",
        vol.body_voxels(),
        vol.bone_voxels()
    );

    let geom = ProjectionGeometry::default();
    let views = simulate_phantom(&params, &geom)?;
    for v in [0, 15, 30, 45] {
        let stem = format!("{out}/v{v:02}");
        pgm::write_image(format!("{stem}_drr.pgm"), &views.radiographs[v])?;
        pgm::write_condition(format!("{stem}_contour.pgm"), &views.contours[v])?;
        pgm::write_condition(format!("{stem}_contour_bone.pgm"), &views.contour_bones[v])?;
        let (lo, hi) = views.radiographs[v].min_max();
        println!("view {v:2} at {:5.1} deg: drr range [{lo:.3}, {hi:.3}]", geom.angle_degrees(v));
    }
    println!("bone pixels outside the contour over the sweep: {}", views.bone_outside_contour);
    println!("wrote {out}/");
    Ok(())
}
