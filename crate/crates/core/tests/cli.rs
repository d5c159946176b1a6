//! End-to-end runs of the command-line binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
data.n_phantoms = 3
phantom.grid = 16, 16, 16
phantom.spacing = 8
phantom.leg_radius_range = 40, 50
phantom.bone_radius_range = 8, 12
phantom.bone_offset_range = 0, 4
geometry.n_views = 6
geometry.angular_increment = 60
geometry.detector_h = 16
geometry.detector_w = 16
geometry.pixel_size = 8
model.levels = 16, 8
model.channels = 4, 8
model.fourier_dim = 8
train.batch_size = 4
train.max_epochs = 2
sampler.n_steps = 10
eval.max_images = 2
eval.conditions = contour
";

fn segdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segdiff"))
        .current_dir(dir)
        .arg("--config")
        .arg("tiny.cfg")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = segdiff(dir, args);
    assert!(
        out.status.success(),
        "segdiff {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

/// Runs every command once; returns all produced files, relative path first.
fn full_run(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    ok(dir, &["gen-data", "--out", "data"]);
    ok(dir, &["train", "--method", "csm", "--data", "data", "--out", "ckpt"]);
    for m in ["ctm", "unet"] {
        ok(dir, &["train", "--method", m, "--condition", "contour", "--data", "data", "--out", "ckpt"]);
    }
    let cond = "data/images/p000_v00_contour.pgm";
    ok(dir, &["sample", "--method", "csm", "--checkpoint", "ckpt/csm.sdf", "--condition-file", cond, "--out", "out/csm.pgm", "--trace", "out/csm_trace.tsv"]);
    ok(dir, &["sample", "--method", "ctm", "--checkpoint", "ckpt/ctm_contour.sdf", "--condition-file", cond, "--out", "out/ctm.pgm"]);
    ok(dir, &["eval", "--checkpoints", "ckpt", "--data", "data", "--out", "report/report.txt"]);

    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_path_buf();
                let mut bytes = fs::read(&p).unwrap();
                if rel.file_name().is_some_and(|n| n == "train.log") {
                    bytes = strip_seconds(&bytes);
                }
                files.push((rel, bytes));
            }
        }
    }
    files.sort();
    files
}

/// Drops the wall-clock column of a training log.
fn strip_seconds(log: &[u8]) -> Vec<u8> {
    String::from_utf8_lossy(log)
        .lines()
        .map(|l| l.rsplit_once('\t').map_or(l, |(head, _)| head).to_string() + "\n")
        .collect::<String>()
        .into_bytes()
}

#[test]
fn every_command_is_deterministic() {
    let (a, b) = (workspace(), workspace());
    let fa = full_run(a.path());
    let fb = full_run(b.path());
    let names: Vec<_> = fa.iter().map(|(p, _)| p.clone()).collect();
    assert_eq!(names, fb.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>());
    for ((p, x), (_, y)) in fa.iter().zip(&fb) {
        assert!(x == y, "{} differs between runs", p.display());
    }
    for want in ["data/manifest.tsv", "ckpt/csm.sdf", "ckpt/ctm_contour/train.log", "report/report_details.tsv", "out/csm_trace.tsv"] {
        assert!(names.iter().any(|p| p == Path::new(want)), "missing {want}");
    }

    // sampled image is a 16-bit binary PGM of the detector size
    let pgm = &fa.iter().find(|(p, _)| p == Path::new("out/ctm.pgm")).unwrap().1;
    assert!(pgm.starts_with(b"P5\n16 16\n65535\n"));
    assert_eq!(pgm.len(), b"P5\n16 16\n65535\n".len() + 2 * 16 * 16);

    let report = String::from_utf8_lossy(&fa.iter().find(|(p, _)| p == Path::new("report/report.txt")).unwrap().1).into_owned();
    for m in ["csm", "ctm", "unet"] {
        assert!(report.contains(m), "report lacks {m}:\n{report}");
    }
}

#[test]
fn mismatched_checkpoint_and_misuse_exit_nonzero() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["gen-data", "--out", "data"]);
    ok(d, &["--set", "train.max_epochs=1", "train", "--method", "csm", "--data", "data", "--out", "ckpt"]);
    let cond = "data/images/p000_v00_contour.pgm";

    let wrong = segdiff(d, &["sample", "--method", "ctm", "--checkpoint", "ckpt/csm.sdf", "--condition-file", cond, "--out", "x.pgm"]);
    assert_eq!(wrong.status.code(), Some(2));
    assert!(!d.join("x.pgm").exists());

    let conditioned_csm = segdiff(d, &["train", "--method", "csm", "--condition", "contour", "--data", "data"]);
    assert_eq!(conditioned_csm.status.code(), Some(2));

    let missing = segdiff(d, &["eval", "--checkpoints", "ckpt", "--data", "data", "--out", "r.txt"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("ctm_contour.sdf"));

    let unknown_key = segdiff(d, &["--set", "model.depth=3", "gen-data"]);
    assert_eq!(unknown_key.status.code(), Some(2));
}

#[test]
fn default_dataset_arithmetic() {
    // 16 phantoms at 60 views split 13/1/2
    assert_eq!(segdiff::phantom::split_counts(16).unwrap(), (13, 1, 2));
    assert_eq!(16 * segdiff::ProjectionGeometry::default().n_views, 960);
    // a 55-subject cohort gives 3300 images split 45/5/5
    assert_eq!(segdiff::phantom::split_counts(55).unwrap(), (45, 5, 5));
    assert_eq!(55 * segdiff::ProjectionGeometry::default().n_views, 3300);
}
