//! Noise schedule, conditional denoiser, training objective, and DDIM
//! sampling.

mod checkpoint;
mod denoiser;
mod model;
mod sampler;
mod schedule;
mod train;

pub use checkpoint::{
    read_container, write_container, Container, TensorRecord, BASE_MAGIC, FORMAT_VERSION,
};
pub use denoiser::{Denoiser, DenoiserCache, DenoiserConfig, DenoiserGrads, Injection};
pub use model::{
    CondInput, ConditionalModel, ModelConfig, ModelPredictor, PreparedBatch, SampleCondition,
    TrainConfig, TrainingExample,
};
pub use sampler::{ddim_sample, ddim_timesteps, Branch, DdimConfig, NoisePredictor};
pub use schedule::{build_schedule, forward_diffuse, DiffusionSchedule, ScheduleConfig};
pub use train::train_model;
