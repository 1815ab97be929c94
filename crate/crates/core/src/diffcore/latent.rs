//! Image/latent codecs.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::ops::resize_bilinear;

pub const DOWNSAMPLE: usize = 4;

/// Pluggable image <-> latent mapping. Images are `(B, 3, H, W)` in [-1, 1].
pub trait LatentCodec {
    fn latent_channels(&self) -> usize;
    fn encode(&self, image: &Tensor) -> Result<Tensor>;
    fn decode(&self, latent: &Tensor) -> Result<Tensor>;
    /// Nearest latent whose decoded colors lie in [-1, 1].
    fn clamp_latent(&self, latent: &Tensor) -> Result<Tensor>;
}

/// Fixed codec: 4x area downsampling, then a fixed orthonormal lift of the
/// three color channels into `C` latent channels (first three DCT-II basis
/// vectors). Decoding projects back and upsamples bilinearly.
#[derive(Debug, Clone)]
pub struct FixedCodec {
    channels: usize,
    /// `(C, 3)` with orthonormal columns.
    lift: Tensor,
}

impl FixedCodec {
    pub fn new(channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        if channels < 3 {
            return Err(Error::Config(format!("latent needs at least 3 channels, got {channels}")));
        }
        let c = channels as f64;
        let mut q = vec![0.0f64; channels * 3];
        for i in 0..channels {
            for k in 0..3 {
                let norm = if k == 0 { (1.0 / c).sqrt() } else { (2.0 / c).sqrt() };
                q[i * 3 + k] = norm * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / c).cos();
            }
        }
        Ok(FixedCodec {
            channels,
            lift: Tensor::from_vec(q, (channels, 3), device)?.to_dtype(dtype)?,
        })
    }

    pub fn lift(&self) -> &Tensor {
        &self.lift
    }

    fn mix(x: &Tensor, m: &Tensor) -> Result<Tensor> {
        let (o, i) = m.dims2()?;
        Ok(x.conv2d(&m.reshape((o, i, 1, 1))?, 0, 1, 1, 1)?)
    }
}

impl LatentCodec for FixedCodec {
    fn latent_channels(&self) -> usize {
        self.channels
    }

    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Shape(format!("cannot encode {c}x{h}x{w}; need 3 channels and sides divisible by 4")));
        }
        let pooled = image.avg_pool2d(DOWNSAMPLE)?;
        Self::mix(&pooled, &self.lift)
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = latent.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("latent has {c} channels, codec expects {}", self.channels)));
        }
        let rgb = Self::mix(latent, &self.lift.t()?.contiguous()?)?;
        resize_bilinear(&rgb, h * DOWNSAMPLE, w * DOWNSAMPLE)
    }

    // The lift is an isometry onto its column space, so the projection onto
    // the lifted color cube is a per-pixel clamp in color coordinates.
    fn clamp_latent(&self, latent: &Tensor) -> Result<Tensor> {
        let c = latent.dim(1)?;
        if c != self.channels {
            return Err(Error::Shape(format!("latent has {c} channels, codec expects {}", self.channels)));
        }
        let rgb = Self::mix(latent, &self.lift.t()?.contiguous()?)?.clamp(-1.0, 1.0)?;
        Self::mix(&rgb, &self.lift)
    }
}
