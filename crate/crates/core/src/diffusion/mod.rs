//! Noise schedules, the two-timestep training objective and the samplers.

pub mod objective;
pub mod sampler;
pub mod schedule;

pub use objective::{
    cfg_combine, diffusion_loss, draw_step, training_step, Denoise, LossTerms, StepDraws, StepOutput, Trainable,
    TrainingBatch,
};
pub use sampler::{
    item_seed, sample_conditional_motion, sample_conditional_text, sample_hierarchical, sample_items, sample_joint,
    SampleItem, SampleResult, SamplerConfig, TaskMode,
};
pub use schedule::{make_schedule, q_sample, NoiseSchedule, ScheduleKind};
