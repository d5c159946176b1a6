//! Small end-to-end run through the library API: dataset, CTM and U-Net
//! training on contour conditions, then sampling and scoring on the test
//! split. Sizes are cut down so that it finishes in a few minutes.
//!
//! Usage: `cargo run --release --example conditional_pipeline [work_dir]`

use segdiff::metrics::evaluate_split;
use segdiff::phantom::build_dataset;
use segdiff::{
    pgm, train, ConditionKind, Method, PhantomParams, ProjectionGeometry, SamplerConfig, ScoreModel, Split,
    TrainConfig, TrainingSet,
};

fn main() -> segdiff::Result<()> {
    let work = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "pipeline_out".into()));
    let params = PhantomParams { grid: (32, 32, 32), spacing: 4.0, ..PhantomParams::default() };
    let geom = ProjectionGeometry::sweep(12, 32, 32, 4.0)?;
    let (manifest, _) = build_dataset(work.join("data"), 6, &geom, &params, 5)?;
    let kind = ConditionKind::Contour;

    let set = |split| -> segdiff::Result<TrainingSet> {
        let (images, conditions) = manifest.load_split(split, kind)?;
        Ok(TrainingSet { split, images, conditions: Some(conditions) })
    };
    let (train_set, val_set) = (set(Split::Train)?, set(Split::Val)?);
    println!("{} training pairs, {} validation pairs", train_set.len(), val_set.len());

    let cfg = TrainConfig { batch_size: 8, learning_rate: 1e-3, max_steps: Some(150), ..TrainConfig::default() };
    let levels = [32, 16, 8];
    let channels = [8, 16, 16];
    let mut ctm = ScoreModel::new(segdiff::ScoreModelConfig::desk(true).with_levels(&levels, &channels), 1)?;
    let mut unet = ScoreModel::new(segdiff::ScoreModelConfig::desk_unet().with_levels(&levels, &channels), 2)?;
    for (name, model) in [("ctm", &mut ctm), ("unet", &mut unet)] {
        let r = train(model, &train_set, Some(&val_set), &cfg)?;
        println!("{name}: {} steps, best validation loss {:.4}", r.steps, r.best_val_loss.unwrap_or(f64::NAN));
    }

    let sampler = SamplerConfig { n_steps: 100, seed: 3, ..SamplerConfig::default() };
    for (method, model) in [(Method::Ctm, &ctm), (Method::Unet, &unet)] {
        let ev = evaluate_split(method, model, &manifest, kind, &sampler, Some(4))?;
        println!(
            "{method}: MAE {:.4} +- {:.4}, PSNR {:.2} dB",
            ev.row.mae_mean, ev.row.mae_std, ev.row.psnr_mean_db
        );
        pgm::write_image(work.join(format!("{method}_first.pgm")), &ev.outputs[0])?;
    }
    Ok(())
}
