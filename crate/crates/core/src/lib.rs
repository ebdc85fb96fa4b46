//! Zero-shot object removal on a pluggable diffusion denoiser.
//!
//! The input is inverted with deterministic DDIM. Denoising then re-runs
//! from the final latent. At every step, self-attention queries from the
//! edited branch attend to keys and values captured from the stored
//! inversion latents. Background queries see only background keys. Object
//! queries lose their most-attended keys and every object key. A mask-gated
//! guidance blend then steers the object region away from the original
//! trajectory.
//!
//! [`toydenoiser::ToyDenoiser`] is a small seeded network with genuine
//! self-attention that stands in for an image U-Net, so the whole loop runs
//! at desk scale.

pub mod attnctl;
pub mod cli;
pub mod exec;
pub mod guidance;
pub mod latent;
pub mod masking;
pub mod metrics;
pub mod ndkernel;
pub mod pipeline;
pub mod scheduler;
pub mod toydenoiser;
pub mod verify;

pub use attnctl::{AttnError, DissolutionConfig, DissolvedSet, PandoraProcessor, StepWindow};
pub use exec::Exec;
pub use guidance::GuidanceSchedule;
pub use latent::{LatentGrid, Shape};
pub use masking::{ObjectMask, TokenMask};
pub use ndkernel::Matrix;
pub use pipeline::{percentile_sweep, remove_objects, Removal, RemovalConfig, RunReport};
pub use scheduler::{DiffusionSchedule, InversionTrace};
pub use toydenoiser::{build_denoiser, AttentionPacket, AttentionProcessor, Denoiser, ToyDenoiser};
