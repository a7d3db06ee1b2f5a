//! Transfer learning for diffusion models on low-dimensional synthetic data.
//!
//! The crate contains every piece of the fine-tuning pipeline: the forward
//! noise schedule, toy source/target distributions and the memory bank of
//! pre-sampled outputs, the exact posterior-mean denoiser and a trainable
//! MLP noise predictor, the retention/reconsolidation training objectives,
//! DDPM/DDIM samplers (including the hybrid sampler that hands the final
//! denoising steps to a second model), and two-sample quality metrics.

pub mod data;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod objectives;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use data::{
    load_memory_bank, make_distribution, save_memory_bank, Condition, DistributionKind,
    DistributionSpec, MemoryBank, PointDataset, Provenance,
};
pub use denoiser::{
    load_checkpoint, save_checkpoint, Adam, AdamState, Batch, ClosedFormDenoiser, Denoiser,
    MlpArch, MlpDenoiser, PretrainedSnapshot,
};
pub use error::{Error, Result};
pub use metrics::{ewc_l2, mmd_rbf, sliced_wasserstein, EwcReport, MetricReport};
pub use objectives::{CoefficientSchedule, TrainConfig, Trainer, Variant};
pub use sampler::{cfg_combine, hybrid_sample, sample, SamplerConfig, SamplerMethod};
pub use schedule::NoiseSchedule;
