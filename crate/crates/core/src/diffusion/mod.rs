//! Noise schedule, forward process, training loop and reverse samplers.

mod sample;
mod schedule;
mod train;

pub use sample::{
    noised_condition, sample_guided, sample_guided_constant, sample_guided_predicted, sample_guided_random,
    sample_unconditional, sample_unconditional_observed, ChannelMask, Guidance, Observer, StepView,
};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use train::{
    model_from_container, schedule_from_container, LossStats, StepRecord, TrainingState, NOISE_STREAM,
    SHUFFLE_STREAM, TIMESTEP_STREAM,
};
