//! Noise schedules, training objectives, samplers and the training loop.

mod checkpoint;
mod objective;
mod sampler;
mod schedule;
mod train;

pub use checkpoint::Checkpoint;
pub use objective::{
    diffusion_loss, flow_matching_loss, forward_noise, forward_noise_with_alpha_bar, loss_at_draws, regression_batch,
    squared_error, LossOutput, Objective, RegressionBatch, TrainingDraws, FLOW_TIME_SCALE,
};
pub use sampler::{respaced_timesteps, sample, sample_batch, Denoiser, Network, SamplerKind, SamplerSpec, SeedBundle};
pub use schedule::{NoiseSchedule, ScheduleKind, MAX_TERMINAL_ALPHA_BAR};
pub use train::{eval_loss, train, TrainConfig, TrainOutcome, DIVERGENCE_LOSS};
