//! Latent denoiser: 12 encoder blocks, a middle block and 12 decoder blocks.
//! Decoder block `i` (1-based) reads the encoder output `f_{13-i}`.

use candle_core::{DType, Tensor, D};

use super::text::TextBatch;
use crate::config::UnetConfig;
use crate::error::{Error, Result};
use crate::nn::layers::ConvInit;
use crate::nn::{Conv2d, GroupNorm, Init, Linear};

pub const ENCODER_BLOCKS: usize = 12;
/// 1-based encoder blocks whose outputs receive condition injections.
pub const INJECTION_BLOCKS: [usize; 4] = [1, 4, 7, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Channels per resolution level.
    pub levels: [usize; 4],
    pub groups: usize,
    pub text_width: usize,
}

impl DenoiserConfig {
    pub fn from_config(u: &UnetConfig) -> Self {
        DenoiserConfig {
            latent_channels: u.latent_channels,
            levels: u.channel_mult.map(|m| m * u.base_channels),
            groups: u.norm_groups,
            text_width: u.text_width,
        }
    }

    pub fn time_dim(&self) -> usize {
        4 * self.levels[0]
    }

    /// Output channels of encoder block `i` (1-based).
    pub fn encoder_channels(&self, i: usize) -> usize {
        let l = self.levels;
        match i {
            1..=4 => l[0],
            5..=7 => l[1],
            8..=10 => l[2],
            _ => l[3],
        }
    }

    /// Downsampling factor of encoder block `i` output.
    pub fn encoder_scale(&self, i: usize) -> usize {
        match i {
            1..=3 => 1,
            4..=6 => 2,
            7..=9 => 4,
            _ => 8,
        }
    }

    /// Channels at the injection blocks.
    pub fn injection_channels(&self) -> [usize; 4] {
        INJECTION_BLOCKS.map(|i| self.encoder_channels(i))
    }

    pub fn decoder_channels(&self, i: usize) -> usize {
        self.levels[3 - (i - 1) / 3]
    }
}

/// Sinusoidal timestep features `(B, dim)`.
pub fn timestep_features(ts: &[f64], dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for k in 0..half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            v.push((t * f).cos());
        }
        for k in 0..half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            v.push((t * f).sin());
        }
        v.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct TimeEmbed {
    lin1: Linear,
    lin2: Linear,
    dim: usize,
}

impl TimeEmbed {
    pub fn new(init: &mut Init, dim: usize, out: usize) -> Result<Self> {
        Ok(TimeEmbed {
            lin1: Linear::new(&mut init.pp("lin1"), dim, out)?,
            lin2: Linear::new(&mut init.pp("lin2"), out, out)?,
            dim,
        })
    }

    pub fn forward(&self, ts: &[f64], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let f = timestep_features(ts, self.dim, dtype, device)?;
        self.lin2.forward(&self.lin1.forward(&f)?.silu()?)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(init: &mut Init, cin: usize, cout: usize, tdim: usize, groups: usize) -> Result<Self> {
        Ok(ResBlock {
            norm1: GroupNorm::new(&mut init.pp("norm1"), cin, groups)?,
            conv1: Conv2d::new(&mut init.pp("conv1"), cin, cout, 3, 1, ConvInit::Default)?,
            time: Linear::new(&mut init.pp("time"), tdim, cout)?,
            norm2: GroupNorm::new(&mut init.pp("norm2"), cout, groups)?,
            conv2: Conv2d::new(&mut init.pp("conv2"), cout, cout, 3, 1, ConvInit::Default)?,
            skip: if cin != cout {
                Some(Conv2d::new(&mut init.pp("skip"), cin, cout, 1, 1, ConvInit::Default)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + s)?)
    }
}

/// Single-head cross attention from image positions to text tokens.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl CrossAttention {
    pub fn new(init: &mut Init, channels: usize, text_width: usize, groups: usize) -> Result<Self> {
        Ok(CrossAttention {
            norm: GroupNorm::new(&mut init.pp("norm"), channels, groups)?,
            q: Linear::new(&mut init.pp("q"), channels, channels)?,
            k: Linear::new(&mut init.pp("k"), text_width, channels)?,
            v: Linear::new(&mut init.pp("v"), text_width, channels)?,
            out: Linear::new(&mut init.pp("out"), channels, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, text: &TextBatch) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let seq = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let q = self.q.forward(&seq)?;
        let k = self.k.forward(&text.embeddings)?;
        let v = self.v.forward(&text.embeddings)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (c as f64).sqrt())?;
        let scores = scores.broadcast_add(&text.bias)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let y = self.out.forward(&attn.matmul(&v)?)?;
        let y = y.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((x + y)?)
    }
}

#[derive(Debug, Clone)]
pub enum EncoderBlock {
    ConvIn(Conv2d),
    Res(ResBlock),
    Down(Conv2d),
}

/// Encoder half plus middle block plus time embedding; duplicated by every
/// control branch.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub time: TimeEmbed,
    blocks: Vec<EncoderBlock>,
    mid1: ResBlock,
    mid_attn: CrossAttention,
    mid2: ResBlock,
}

/// Encoder outputs `f_1..f_12` (index 0 is `f_1`) and the middle output.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub skips: Vec<Tensor>,
    pub middle: Tensor,
}

impl Encoder {
    pub fn new(init: &mut Init, cfg: &DenoiserConfig) -> Result<Self> {
        let l = cfg.levels;
        let td = cfg.time_dim();
        let g = cfg.groups;
        let mut blocks = Vec::with_capacity(ENCODER_BLOCKS);
        let mut cur = l[0];
        for i in 1..=ENCODER_BLOCKS {
            let mut p = init.pp(&format!("block{i}"));
            let b = match i {
                1 => EncoderBlock::ConvIn(Conv2d::new(&mut p, cfg.latent_channels, l[0], 3, 1, ConvInit::Default)?),
                4 | 7 | 10 => EncoderBlock::Down(Conv2d::new(&mut p, cur, cur, 3, 2, ConvInit::Default)?),
                _ => {
                    let out = cfg.encoder_channels(i);
                    let r = ResBlock::new(&mut p, cur, out, td, g)?;
                    cur = out;
                    EncoderBlock::Res(r)
                }
            };
            blocks.push(b);
        }
        Ok(Encoder {
            time: TimeEmbed::new(&mut init.pp("time"), l[0], td)?,
            blocks,
            mid1: ResBlock::new(&mut init.pp("mid1"), l[3], l[3], td, g)?,
            mid_attn: CrossAttention::new(&mut init.pp("mid_attn"), l[3], cfg.text_width, g)?,
            mid2: ResBlock::new(&mut init.pp("mid2"), l[3], l[3], td, g)?,
        })
    }

    /// `inject(i, z)` may rewrite the output of block `i` (1-based).
    pub fn forward<F>(&self, x: &Tensor, temb: &Tensor, text: &TextBatch, mut inject: F) -> Result<EncoderOutput>
    where
        F: FnMut(usize, Tensor) -> Result<Tensor>,
    {
        let mut skips = Vec::with_capacity(ENCODER_BLOCKS);
        let mut h = x.clone();
        for (k, b) in self.blocks.iter().enumerate() {
            h = match b {
                EncoderBlock::ConvIn(c) | EncoderBlock::Down(c) => c.forward(&h)?,
                EncoderBlock::Res(r) => r.forward(&h, temb)?,
            };
            h = inject(k + 1, h)?;
            skips.push(h.clone());
        }
        let m = self.mid1.forward(&h, temb)?;
        let m = self.mid_attn.forward(&m, text)?;
        let middle = self.mid2.forward(&m, temb)?;
        Ok(EncoderOutput { skips, middle })
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    blocks: Vec<ResBlock>,
    upsamplers: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    pub fn new(init: &mut Init, cfg: &DenoiserConfig) -> Result<Self> {
        let td = cfg.time_dim();
        let mut blocks = Vec::with_capacity(ENCODER_BLOCKS);
        let mut upsamplers = Vec::with_capacity(3);
        let mut prev = cfg.levels[3];
        for i in 1..=ENCODER_BLOCKS {
            let skip = cfg.encoder_channels(13 - i);
            let out = cfg.decoder_channels(i);
            blocks.push(ResBlock::new(&mut init.pp(&format!("block{i}")), prev + skip, out, td, cfg.groups)?);
            if i % 3 == 0 && i < ENCODER_BLOCKS {
                upsamplers.push(Conv2d::new(&mut init.pp(&format!("up{i}")), out, out, 3, 1, ConvInit::Default)?);
            }
            prev = out;
        }
        Ok(Decoder {
            blocks,
            upsamplers,
            norm_out: GroupNorm::new(&mut init.pp("norm_out"), cfg.levels[0], cfg.groups)?,
            conv_out: Conv2d::new(&mut init.pp("conv_out"), cfg.levels[0], cfg.latent_channels, 3, 1, ConvInit::Default)?,
        })
    }

    pub fn forward(&self, middle: &Tensor, skips: &[Tensor], temb: &Tensor) -> Result<Tensor> {
        if skips.len() != ENCODER_BLOCKS {
            return Err(Error::Shape(format!("decoder needs 12 skips, got {}", skips.len())));
        }
        let mut g = middle.clone();
        for (k, block) in self.blocks.iter().enumerate() {
            let i = k + 1;
            let x = Tensor::cat(&[&g, &skips[12 - i]], 1)?;
            g = block.forward(&x, temb)?;
            if i % 3 == 0 && i < ENCODER_BLOCKS {
                let (_, _, h, w) = g.dims4()?;
                g = self.upsamplers[i / 3 - 1].forward(&g.upsample_nearest2d(2 * h, 2 * w)?)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&g)?.silu()?)
    }
}

/// Residuals summed over control branches: one per skip and one for the
/// middle output.
#[derive(Debug, Clone)]
pub struct ControlResiduals {
    pub skips: Vec<Tensor>,
    pub middle: Tensor,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: DenoiserConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl UNet {
    pub fn new(init: &mut Init, cfg: &DenoiserConfig) -> Result<Self> {
        Ok(UNet {
            cfg: cfg.clone(),
            encoder: Encoder::new(&mut init.pp("enc"), cfg)?,
            decoder: Decoder::new(&mut init.pp("dec"), cfg)?,
        })
    }

    fn check_input(&self, x: &Tensor, ts: &[f64]) -> Result<()> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.cfg.latent_channels || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!(
                "latent must have {} channels and sides divisible by 8, got {c}x{h}x{w}",
                self.cfg.latent_channels
            )));
        }
        if ts.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", ts.len())));
        }
        Ok(())
    }

    /// Noise prediction. `control` adds residuals to every skip and to the
    /// middle output; `ablate_skip` (1-based) replaces one skip with zeros.
    pub fn forward_full(
        &self,
        x: &Tensor,
        ts: &[f64],
        text: &TextBatch,
        control: Option<&ControlResiduals>,
        ablate_skip: Option<usize>,
    ) -> Result<Tensor> {
        self.check_input(x, ts)?;
        let temb = self.encoder.time.forward(ts, x.dtype(), x.device())?;
        let mut enc = self.encoder.forward(x, &temb, text, |_, z| Ok(z))?;
        if let Some(c) = control {
            for (s, r) in enc.skips.iter_mut().zip(&c.skips) {
                *s = (&*s + r)?;
            }
            enc.middle = (&enc.middle + &c.middle)?;
        }
        if let Some(j) = ablate_skip {
            if !(1..=ENCODER_BLOCKS).contains(&j) {
                return Err(Error::Range(format!("skip {j} outside 1..=12")));
            }
            enc.skips[j - 1] = enc.skips[j - 1].zeros_like()?;
        }
        self.decoder.forward(&enc.middle, &enc.skips, &temb)
    }

    pub fn forward(&self, x: &Tensor, ts: &[f64], text: &TextBatch) -> Result<Tensor> {
        self.forward_full(x, ts, text, None, None)
    }
}
