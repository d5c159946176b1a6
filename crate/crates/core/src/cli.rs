//! Command-line front end: `gen-data`, `train`, `sample` and `eval`.
//!
//! Checkpoints live in one directory: `csm.sdf`, `ctm_<condition>.sdf` and
//! `unet_<condition>.sdf`, each next to a run directory of the same stem
//! holding the training log, intermediate checkpoints and the effective
//! configuration.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{derive_seed, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_split, EvalReport, Method, ReportHeader};
use crate::pgm;
use crate::phantom::{build_dataset, ConditionKind, DatasetManifest, PhantomParams, Split, MANIFEST_NAME};
use crate::sampler::{sample_csm_with, sample_ctm_with, sample_unet, SampleTrace, SamplerConfig};
use crate::score_net::{load_model, save_model, ScoreModel};
use crate::training::{train, TrainConfig, TrainReport, TrainingSet};

#[derive(Debug, Parser)]
#[command(name = "segdiff", version, about = "Segmentation-conditioned radiograph synthesis with score-based diffusion")]
pub struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Global seed, overriding the configuration.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output location: dataset directory, checkpoint directory, image or report.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the configuration file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate phantoms and write radiographs, conditions and the manifest.
    GenData,
    /// Train one model on the training split.
    Train {
        #[arg(long)]
        method: Method,
        /// Condition type (ctm and unet only).
        #[arg(long)]
        condition: Option<ConditionKind>,
        /// Dataset directory (defaults to `data.dir`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate one radiograph from a condition image.
    Sample {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "condition-file")]
        condition_file: PathBuf,
        /// Optional per-step trace file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score methods on the test split and write the report.
    Eval {
        #[arg(long, value_delimiter = ',', default_value = "csm,ctm,unet")]
        methods: Vec<Method>,
        /// Checkpoint directory (defaults to `checkpoint.dir`).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Dataset directory (defaults to `data.dir`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Effective configuration: defaults, then the file, then `--set`, then `--seed`.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Checkpoint file name of a trained method.
pub fn checkpoint_name(method: Method, condition: Option<ConditionKind>) -> String {
    match (method, condition) {
        (Method::Csm, _) | (_, None) => method.to_string(),
        (m, Some(c)) => format!("{m}_{c}"),
    }
}

pub fn checkpoint_path(dir: &Path, method: Method, condition: Option<ConditionKind>) -> PathBuf {
    dir.join(format!("{}.sdf", checkpoint_name(method, condition)))
}

/// Dataset generation; returns the manifest.
pub fn cmd_gen_data(cfg: &RunConfig, out: Option<&Path>) -> Result<DatasetManifest> {
    let dir = out.unwrap_or(&cfg.data_dir);
    let params = PhantomParams {
        seed: derive_seed(cfg.seed, "phantom"),
        ..cfg.phantom.clone()
    };
    let (manifest, stats) = build_dataset(dir, cfg.n_phantoms, &cfg.geometry, &params, derive_seed(cfg.seed, "split"))?;
    cfg.echo_into(dir)?;
    let (ti, vi, si) = manifest.image_counts();
    let (tp, vp, sp) = manifest.phantom_counts();
    println!("wrote {} images to {}", manifest.len(), dir.display());
    println!("train\t{tp} phantoms\t{ti} images");
    println!("val\t{vp} phantoms\t{vi} images");
    println!("test\t{sp} phantoms\t{si} images");
    if stats.bone_outside_contour > 0 {
        println!("warning: {} bone pixels fell outside the contour", stats.bone_outside_contour);
    }
    Ok(manifest)
}

fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Err(Error::Missing(format!("no dataset manifest at {}; run gen-data first", path.display())));
    }
    DatasetManifest::load(path)
}

fn training_set(manifest: &DatasetManifest, split: Split, condition: Option<ConditionKind>) -> Result<TrainingSet> {
    let kind = condition.unwrap_or(ConditionKind::Contour);
    let (images, conds) = manifest.load_split(split, kind)?;
    Ok(TrainingSet {
        split,
        images,
        conditions: condition.map(|_| conds),
    })
}

/// Trains one method; returns the final checkpoint path and the report.
pub fn cmd_train(
    cfg: &RunConfig,
    method: Method,
    condition: Option<ConditionKind>,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<(PathBuf, TrainReport)> {
    match (method, condition) {
        (Method::Csm, Some(_)) => {
            return Err(Error::Misuse("csm trains unconditionally; drop --condition".into()));
        }
        (Method::Ctm | Method::Unet, None) => {
            return Err(Error::Misuse(format!("{method} needs --condition contour|contour_bone")));
        }
        _ => {}
    }
    let manifest = load_manifest(data.unwrap_or(&cfg.data_dir))?;
    let train_set = training_set(&manifest, Split::Train, condition)?;
    let val_set = training_set(&manifest, Split::Val, condition)?;
    let model_cfg = cfg.model_config(method == Method::Ctm, method == Method::Unet);
    let mut model = ScoreModel::new(model_cfg, derive_seed(cfg.seed, "model"))?;

    let dir = out.unwrap_or(&cfg.checkpoint_dir);
    let name = checkpoint_name(method, condition);
    let run_dir = dir.join(&name);
    cfg.echo_into(&run_dir)?;
    let tcfg = TrainConfig {
        seed: derive_seed(cfg.seed, "train"),
        checkpoint_dir: Some(run_dir.clone()),
        log_path: Some(run_dir.join("train.log")),
        ..cfg.train.clone()
    };
    let report = train(&mut model, &train_set, Some(&val_set), &tcfg)?;
    let best = run_dir.join("best.sdf");
    let final_path = checkpoint_path(dir, method, condition);
    if best.exists() {
        fs::copy(&best, &final_path).map_err(|e| Error::io(&final_path, e))?;
    } else {
        save_model(&model, &final_path)?;
    }
    for e in &report.epochs {
        println!(
            "epoch {}\ttrain_loss {:.6}\tval_loss {}",
            e.epoch,
            e.train_loss,
            e.val_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
        );
    }
    println!("{} steps; checkpoint {}", report.steps, final_path.display());
    Ok((final_path, report))
}

fn sampler_config(cfg: &RunConfig) -> SamplerConfig {
    SamplerConfig {
        seed: derive_seed(cfg.seed, "sampler"),
        ..cfg.sampler.clone()
    }
}

/// Generates one image from a condition file and writes it as 16-bit PGM.
pub fn cmd_sample(
    cfg: &RunConfig,
    method: Method,
    checkpoint: &Path,
    condition_file: &Path,
    out: &Path,
    trace_path: Option<&Path>,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    method.check_model(&model).map_err(|e| {
        Error::Misuse(format!("checkpoint {} does not fit method {method}: {e}", checkpoint.display()))
    })?;
    let y = pgm::read_condition(condition_file)?;
    let scfg = sampler_config(cfg);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(scfg.seed);
    let mut trace = SampleTrace::default();
    let tr = trace_path.map(|_| &mut trace);
    let img = match method {
        Method::Csm => sample_csm_with(&model, &y, &scfg, &mut rng, tr)?,
        Method::Ctm => sample_ctm_with(&model, &y, &scfg, &mut rng, tr)?,
        Method::Unet => sample_unet(&model, &y)?,
    };
    // unclamped samples are clipped for storage
    pgm::write_image(out, &img.clamp(0.0, 1.0))?;
    if let Some(p) = trace_path {
        trace.write(p)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Evaluates `methods` over every configured condition type and writes the
/// report plus `<out stem>_details.tsv`.
pub fn cmd_eval(
    cfg: &RunConfig,
    methods: &[Method],
    checkpoints: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
) -> Result<EvalReport> {
    let ckpt_dir = checkpoints.unwrap_or(&cfg.checkpoint_dir);
    let mut wanted = Vec::new();
    for &m in methods {
        for &c in &cfg.eval_conditions {
            wanted.push((m, c, checkpoint_path(ckpt_dir, m, Some(c))));
        }
    }
    let mut missing: Vec<String> = wanted
        .iter()
        .filter(|(_, _, p)| !p.exists())
        .map(|(_, _, p)| p.display().to_string())
        .collect();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Error::Missing(format!("checkpoints not found: {}", missing.join(", "))));
    }
    let manifest = load_manifest(data.unwrap_or(&cfg.data_dir))?;
    let scfg = sampler_config(cfg);
    let mut report = EvalReport {
        header: ReportHeader {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            sampler_seed: scfg.seed,
        },
        rows: Vec::new(),
    };
    for (m, c, path) in &wanted {
        let model = load_model(path)?;
        let ev = evaluate_split(*m, &model, &manifest, *c, &scfg, cfg.eval_max_images)?;
        println!(
            "{m}\t{c}\tMAE {:.4} +- {:.4}\tPSNR {:.2} +- {:.2} dB\t({} images)",
            ev.row.mae_mean, ev.row.mae_std, ev.row.psnr_mean_db, ev.row.psnr_std_db, ev.row.n_images
        );
        report.rows.push(ev.row);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        cfg.echo_into(dir)?;
    }
    fs::write(out, report.to_table()).map_err(|e| Error::io(out, e))?;
    let details = details_path(out);
    fs::write(&details, report.to_details()).map_err(|e| Error::io(&details, e))?;
    Ok(report)
}

/// `<dir>/<stem>_details.tsv` next to a report path.
pub fn details_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}_details.tsv"))
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, out).map(|_| ()),
        Command::Train { method, condition, data } => {
            cmd_train(&cfg, *method, *condition, data.as_deref(), out).map(|_| ())
        }
        Command::Sample {
            method,
            checkpoint,
            condition_file,
            trace,
        } => {
            let out = out.ok_or_else(|| Error::Misuse("sample needs --out PATH".into()))?;
            cmd_sample(&cfg, *method, checkpoint, condition_file, out, trace.as_deref())
        }
        Command::Eval {
            methods,
            checkpoints,
            data,
        } => {
            let out = out.ok_or_else(|| Error::Misuse("eval needs --out PATH".into()))?;
            cmd_eval(&cfg, methods, checkpoints.as_deref(), data.as_deref(), out).map(|_| ())
        }
    }
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
