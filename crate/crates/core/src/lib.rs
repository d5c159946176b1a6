//! Segmentation-conditioned radiograph synthesis with variance-exploding
//! score-based diffusion.

pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod pgm;
pub mod phantom;
pub(crate) mod nn;
pub mod score_net;
pub mod sampler;
pub mod sde;
pub mod tensor;
pub mod toy;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use metrics::{mae, psnr, EvalReport, Method};
pub use phantom::{ConditionKind, DatasetManifest, PhantomParams, ProjectionGeometry, Split, VolumeGrid};
pub use sampler::{sample_csm, sample_ctm, sample_unet, SamplerConfig, ScoreFn};
pub use score_net::{load_model, parameter_count, save_model, ScoreModel, ScoreModelConfig};
pub use sde::{SigmaSchedule, TimePoint};
pub use training::{train, LossWeighting, TrainConfig, TrainingSet};
pub use tensor::{ImageTensor, Shape};
