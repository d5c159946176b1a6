//! Image-quality metrics and test-split evaluation.
//!
//! Reports give the mean and population standard deviation over test images
//! of MAE and PSNR. Identical images have infinite PSNR; reports cap it at
//! [`PSNR_CAP_DB`] and count the capped images.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pgm;
use crate::phantom::{ConditionKind, DatasetManifest, ManifestRecord, Split};
use crate::sampler::{sample_csm_with, sample_ctm_with, sample_unet, SamplerConfig};
use crate::score_net::ScoreModel;
use crate::tensor::ImageTensor;

pub const PSNR_CAP_DB: f64 = 99.0;

pub fn mae(pred: &ImageTensor, label: &ImageTensor) -> Result<f64> {
    pred.ensure_same_shape(label)?;
    let sum: f64 = pred.values().iter().zip(label.values()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / pred.len() as f64)
}

pub fn mse(pred: &ImageTensor, label: &ImageTensor) -> Result<f64> {
    pred.ensure_same_shape(label)?;
    let sum: f64 = pred.values().iter().zip(label.values()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sum / pred.len() as f64)
}

/// `10 log10(peak^2 / MSE)` in dB; `+inf` for identical images.
pub fn psnr(pred: &ImageTensor, label: &ImageTensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("PSNR peak must be positive, got {peak}")));
    }
    let m = mse(pred, label)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Sorensen-Dice overlap of two masks; two empty masks give 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} pixels", a.len()),
            got: format!("{} pixels", b.len()),
        });
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Dice between `output > threshold` and the support of a condition image.
pub fn contour_dice(output: &ImageTensor, condition: &ImageTensor, threshold: f64) -> Result<f64> {
    output.ensure_same_shape(condition)?;
    let a: Vec<bool> = output.values().iter().map(|&v| v > threshold).collect();
    let b: Vec<bool> = condition.values().iter().map(|&v| v > 0.0).collect();
    dice(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Csm,
    Ctm,
    Unet,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Csm, Method::Ctm, Method::Unet];

    /// Checks that `model` is the kind of network this method runs.
    pub fn check_model(self, model: &ScoreModel) -> Result<()> {
        let ok = match self {
            Method::Csm => model.is_noise_conditioned() && !model.is_conditional(),
            Method::Ctm => model.is_noise_conditioned() && model.is_conditional(),
            Method::Unet => !model.is_noise_conditioned(),
        };
        if ok {
            Ok(())
        } else {
            let kind = if !model.is_noise_conditioned() {
                "a U-Net baseline"
            } else if model.is_conditional() {
                "a conditional score model"
            } else {
                "an unconditional score model"
            };
            Err(Error::Misuse(format!("method {self} cannot run {kind}")))
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Csm => "csm",
            Method::Ctm => "ctm",
            Method::Unet => "unet",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csm" => Ok(Method::Csm),
            "ctm" => Ok(Method::Ctm),
            "unet" | "u-net" => Ok(Method::Unet),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub phantom_id: usize,
    pub view_index: usize,
    pub mae: f64,
    /// Capped at [`PSNR_CAP_DB`].
    pub psnr_db: f64,
    pub psnr_capped: bool,
}

impl ImageScore {
    pub fn new(phantom_id: usize, view_index: usize, pred: &ImageTensor, label: &ImageTensor) -> Result<Self> {
        let p = psnr(pred, label, 1.0)?;
        Ok(Self {
            phantom_id,
            view_index,
            mae: mae(pred, label)?,
            psnr_db: p.min(PSNR_CAP_DB),
            psnr_capped: p > PSNR_CAP_DB,
        })
    }
}

/// One method under one condition type.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub method: Method,
    pub condition: ConditionKind,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub psnr_mean_db: f64,
    pub psnr_std_db: f64,
    pub n_images: usize,
    pub n_capped: usize,
    pub per_image: Vec<ImageScore>,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalRow {
    pub fn aggregate(method: Method, condition: ConditionKind, per_image: Vec<ImageScore>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::DegenerateInput("no images to aggregate".into()));
        }
        let (mae_mean, mae_std) = mean_std(per_image.iter().map(|s| s.mae));
        let (psnr_mean_db, psnr_std_db) = mean_std(per_image.iter().map(|s| s.psnr_db));
        Ok(Self {
            method,
            condition,
            mae_mean,
            mae_std,
            psnr_mean_db,
            psnr_std_db,
            n_images: per_image.len(),
            n_capped: per_image.iter().filter(|s| s.psnr_capped).count(),
            per_image,
        })
    }
}

/// Provenance written into the report header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportHeader {
    pub config_hash: String,
    pub seed: u64,
    pub sampler_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub header: ReportHeader,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, method: Method, condition: ConditionKind) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method && r.condition == condition)
    }

    /// Summary table: one MAE line and one PSNR line per (method, condition).
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "# segdiff evaluation report\n# config_hash\t{}\n# seed\t{}\n# sampler_seed\t{}\n# std\tpopulation\n# psnr_cap_db\t{}\n",
            self.header.config_hash, self.header.seed, self.header.sampler_seed, PSNR_CAP_DB
        );
        s.push_str("method\tcondition\tmetric\tmean\tstd\tn_images\tn_capped\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\tMAE\t{:.6}\t{:.6}\t{}\t0\n",
                r.method, r.condition, r.mae_mean, r.mae_std, r.n_images
            ));
            s.push_str(&format!(
                "{}\t{}\tPSNR\t{:.4}\t{:.4}\t{}\t{}\n",
                r.method, r.condition, r.psnr_mean_db, r.psnr_std_db, r.n_images, r.n_capped
            ));
        }
        s
    }

    /// Per-image detail table.
    pub fn to_details(&self) -> String {
        let mut s = String::from("method\tcondition\tphantom_id\tview_index\tmae\tpsnr_db\tpsnr_capped\n");
        for r in &self.rows {
            for i in &r.per_image {
                s.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{:.9}\t{:.6}\t{}\n",
                    r.method, r.condition, i.phantom_id, i.view_index, i.mae, i.psnr_db, i.psnr_capped as u8
                ));
            }
        }
        s
    }
}

/// Outputs and scores of one method on the test split.
#[derive(Debug, Clone)]
pub struct SplitEvaluation {
    pub row: EvalRow,
    pub records: Vec<ManifestRecord>,
    pub conditions: Vec<ImageTensor>,
    pub outputs: Vec<ImageTensor>,
}

/// Evenly spaced subset of at most `max` records, in manifest order.
pub fn test_subset(manifest: &DatasetManifest, max: Option<usize>) -> Vec<ManifestRecord> {
    let all: Vec<ManifestRecord> = manifest.records_in(Split::Test).cloned().collect();
    match max {
        Some(m) if m < all.len() => (0..m).map(|i| all[i * all.len() / m].clone()).collect(),
        _ => all,
    }
}

/// Generates one sample per test condition and scores it against the paired
/// radiograph. Image `i` draws its noise from stream `i` of a generator
/// seeded with `sampler.seed`.
pub fn evaluate_split(
    method: Method,
    model: &ScoreModel,
    manifest: &DatasetManifest,
    condition: ConditionKind,
    sampler: &SamplerConfig,
    max_images: Option<usize>,
) -> Result<SplitEvaluation> {
    method.check_model(model)?;
    let records = test_subset(manifest, max_images);
    if records.is_empty() {
        return Err(Error::Missing("the manifest has no test-split images".into()));
    }
    let mut scores = Vec::with_capacity(records.len());
    let mut conditions = Vec::with_capacity(records.len());
    let mut outputs = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let label = pgm::read_image(manifest.resolve(&r.radiograph))?;
        let y = pgm::read_condition(manifest.resolve(r.condition_path(condition)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
        rng.set_stream(i as u64);
        let out = match method {
            Method::Csm => sample_csm_with(model, &y, sampler, &mut rng, None)?,
            Method::Ctm => sample_ctm_with(model, &y, sampler, &mut rng, None)?,
            Method::Unet => sample_unet(model, &y)?,
        };
        scores.push(ImageScore::new(r.phantom_id, r.view_index, &out, &label)?);
        conditions.push(y);
        outputs.push(out);
    }
    Ok(SplitEvaluation {
        row: EvalRow::aggregate(method, condition, scores)?,
        records,
        conditions,
        outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_pair(seed: u64) -> (ImageTensor, ImageTensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(5, 7, 1);
        let a = ImageTensor::from_fn(s, |_, _, _| rng.random::<f64>());
        let b = ImageTensor::from_fn(s, |_, _, _| rng.random::<f64>());
        (a, b)
    }

    #[test]
    fn mae_cases() {
        let (a, b) = random_pair(0);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let lab = ImageTensor::filled(Shape::square(3), 0.5);
        let pred = lab.map(|v| v + 0.25);
        assert!((mae(&pred, &lab).unwrap() - 0.25).abs() < 1e-15);
        let mut naive = 0.0;
        for y in 0..5 {
            for x in 0..7 {
                naive += (a.get(0, y, x) - b.get(0, y, x)).abs();
            }
        }
        naive /= 35.0;
        assert!((mae(&a, &b).unwrap() - naive).abs() < 1e-12);
        assert!(mae(&a, &lab).is_err());
    }

    #[test]
    fn psnr_cases() {
        let lab = ImageTensor::filled(Shape::square(3), 0.5);
        let pred = lab.map(|v| v + 0.25);
        // 20 log10(4) = 12.0411998265592478085...
        assert!((psnr(&pred, &lab, 1.0).unwrap() - 12.041_199_826_559_248).abs() < 1e-12);
        assert_eq!(psnr(&lab, &lab, 1.0).unwrap(), f64::INFINITY);
        let s = ImageScore::new(0, 0, &lab, &lab).unwrap();
        assert_eq!(s.psnr_db, PSNR_CAP_DB);
        assert!(s.psnr_capped);
        let (a, b) = random_pair(1);
        let half = a.zip_map(&b, |x, y| y + 0.5 * (x - y)).unwrap();
        let gain = psnr(&half, &b, 1.0).unwrap() - psnr(&a, &b, 1.0).unwrap();
        assert!((gain - 6.020_599_913_279_624).abs() < 1e-9);
    }

    #[test]
    fn aggregation_matches_naive_recomputation() {
        let scores: Vec<ImageScore> = (0..6)
            .map(|i| {
                let (a, b) = random_pair(10 + i);
                ImageScore::new(0, i as usize, &a, &b).unwrap()
            })
            .collect();
        let row = EvalRow::aggregate(Method::Ctm, ConditionKind::Contour, scores.clone()).unwrap();
        let m: f64 = scores.iter().map(|s| s.mae).sum::<f64>() / 6.0;
        let sd = (scores.iter().map(|s| (s.mae - m).powi(2)).sum::<f64>() / 6.0).sqrt();
        assert!((row.mae_mean - m).abs() < 1e-9 && (row.mae_std - sd).abs() < 1e-9);
        let single = EvalRow::aggregate(Method::Ctm, ConditionKind::Contour, scores[..1].to_vec()).unwrap();
        assert_eq!(single.mae_std, 0.0);
        assert_eq!(single.psnr_std_db, 0.0);
        let report = EvalReport {
            header: ReportHeader::default(),
            rows: vec![row.clone(), EvalRow { method: Method::Unet, ..row }],
        };
        let data_lines = report.to_table().lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(data_lines, 1 + 2 * 2);
        assert_eq!(report.to_details().lines().count(), 1 + 12);
    }

    #[test]
    fn dice_cases() {
        assert_eq!(dice(&[true, false], &[true, false]).unwrap(), 1.0);
        assert_eq!(dice(&[false, false], &[false, false]).unwrap(), 1.0);
        assert_eq!(dice(&[true, true], &[true, false]).unwrap(), 2.0 / 3.0);
        assert!(dice(&[true], &[true, false]).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in any::<u64>()) {
            let (a, b) = random_pair(seed);
            prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        }

        #[test]
        fn psnr_decreases_with_mse(seed in any::<u64>(), k in 1.01f64..4.0) {
            let (a, b) = random_pair(seed);
            let far = a.zip_map(&b, |x, y| y + k * (x - y)).unwrap();
            prop_assert!(psnr(&far, &b, 1.0).unwrap() < psnr(&a, &b, 1.0).unwrap());
        }
    }
}
