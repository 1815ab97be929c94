//! Mixed-view panorama synthesis: geometry, a synthetic city generator,
//! geospatial attention and a multi-conditioned latent diffusion model.

pub mod config;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod fusion;
pub mod geo;
pub mod geoattn;
pub mod imageops;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synthworld;
pub mod viz;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use candle_core;
