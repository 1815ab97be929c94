//! Latent diffusion core: denoiser, control branches, schedule, modality
//! dropout, text embedding, latent codec and guidance.

pub mod control;
pub mod dropout;
pub mod latent;
pub mod schedule;
pub mod text;
pub mod unet;

use candle_core::Tensor;

use crate::error::Result;

pub use control::{BranchKind, ControlBranch};
pub use dropout::{apply_modality_dropout, draw_dropout, DropDecision, DropRegime, DropoutPolicy};
pub use latent::{FixedCodec, LatentCodec};
pub use schedule::{ddim_loop, NoiseSchedule};
pub use text::{tokenize, TextBatch, TextEncoder};
pub use unet::{ControlResiduals, DenoiserConfig, UNet};

/// Classifier-free guidance `eps_u + s (eps_c - eps_u)`. A scale of exactly
/// one returns the conditional prediction untouched.
pub fn guide(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * scale)?)?)
}
