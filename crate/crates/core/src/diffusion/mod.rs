//! Diffusion process numerics: noise schedule, closed-form forward process,
//! velocity parameterization, forward-process posterior, classifier-free
//! guidance and the ancestral reverse sampler.

mod process;
pub(crate) mod sampler;
mod schedule;

pub use process::{cfg_combine, forward_sample, posterior, posterior_between, recover_noise, recover_x0, velocity, Posterior};
pub use sampler::{inference_timesteps, sample, Condition, Predictor, SamplerConfig, AUDIO_GUIDANCE, TEXT_GUIDANCE};
pub use schedule::{NoiseSchedule, ScheduleConfig, ScheduleTable};
