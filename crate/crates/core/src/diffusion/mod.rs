//! Noise schedules, forward noising, prediction-space conversions, DDIM
//! sampling and inversion, and classifier-free guidance.

mod sampler;
mod schedule;

pub use sampler::{
    cfg_combine, ddim_invert, sample, sample_loop, strided_timesteps, Denoise, Guided, Prediction, SampleOptions,
};
pub use schedule::{NoiseSchedule, ScheduleKind};
