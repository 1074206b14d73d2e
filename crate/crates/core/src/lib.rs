//! Training-free semantic mixing of a reference concept into a video, done in
//! diffusion latent space.
//!
//! The crate provides the numerical machinery: noise schedules and DDIM
//! (plain, inverted and momentum-corrected), overlap-maximization mask
//! tracking, masked blending with residual noise, FIFO diagonal denoising with
//! low-frequency tail noise, and alignment-shift metrics. Pretrained networks
//! sit behind the [`scheduler::Denoiser`] and [`tracking::Segmenter`] traits;
//! [`synth`] supplies analytic stand-ins.

pub mod blending;
pub mod config;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod scheduler;
pub mod synth;
pub mod tensorcore;
pub mod tracking;

pub use error::{Error, Result};
