//! Conditional diffusion reconstructor: schedule, denoiser, training and
//! DDIM sampling.

pub mod condition;
pub mod denoiser;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use condition::{make_condition, make_target, Condition, Target};
pub use denoiser::{Architecture, DenoiserParams};
pub use model::TrainedModel;
pub use sampler::{ddim_sample, NoisePredictor, OraclePredictor};
pub use schedule::{ddim_step, forward_noise, NoiseSchedule, SamplerConfig, DEFAULT_BETA_END, DEFAULT_BETA_START};
pub use train::{loss_and_grad, loss_and_grad_with, train, Dataset, Draw, TrainConfig, TrainOutcome, TrainingPair};
