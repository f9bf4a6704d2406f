//! The corrective diffusion stage: variance schedule, guided forward
//! process, tractable posterior, denoising network, and reverse sampler.

pub mod chain;
pub mod denoise;
pub mod schedule;

pub use chain::{
    forward_sample, forward_step, posterior_params, recover_y0, sample_chain_with, shift,
};
pub use denoise::{
    chain_mean_encoder, condition, denoise, denoise_with_cond, loss_diffusion,
    loss_diffusion_given, loss_diffusion_taped, sample_chain, sample_chain_cond, BnStats,
    DenoiseCond, DenoiseDims, DenoiseParams,
};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleConfig};
