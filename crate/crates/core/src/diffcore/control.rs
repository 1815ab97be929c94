//! Per-condition control branches: a trainable copy of the denoiser encoder
//! and middle block whose outputs reach the decoder through zero-initialized
//! 1x1 convolutions.

use candle_core::Tensor;

use super::text::TextBatch;
use super::unet::{ControlResiduals, DenoiserConfig, Encoder, ENCODER_BLOCKS, INJECTION_BLOCKS};
use crate::error::{Error, Result};
use crate::fusion::FusionBranch;
use crate::nn::layers::ConvInit;
use crate::nn::ops::scale_items;
use crate::nn::{Conv2d, Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Seg,
    Sat,
    Pano(usize),
}

impl BranchKind {
    pub fn name(&self) -> String {
        match self {
            BranchKind::Seg => "seg".into(),
            BranchKind::Sat => "sat".into(),
            BranchKind::Pano(k) => format!("pano_{}", k + 1),
        }
    }

    /// Branch order used everywhere: seg, sat, pano_1..pano_k.
    pub fn all(k: usize) -> Vec<BranchKind> {
        let mut v = vec![BranchKind::Seg, BranchKind::Sat];
        v.extend((0..k).map(BranchKind::Pano));
        v
    }
}

#[derive(Debug, Clone)]
pub struct ControlBranch {
    pub kind: BranchKind,
    pub encoder: Encoder,
    pub fusion: FusionBranch,
    zero_skips: Vec<Conv2d>,
    zero_middle: Conv2d,
}

impl ControlBranch {
    /// Builds the branch under `ctrl.<name>` and copies the base encoder
    /// weights found under `base_prefix` (e.g. `unet.enc`).
    pub fn new(init: &mut Init, kind: BranchKind, cfg: &DenoiserConfig, cond_channels: usize) -> Result<Self> {
        let mut p = init.pp(&kind.name());
        let encoder = Encoder::new(&mut p.pp("enc"), cfg)?;
        let fusion = FusionBranch::new(&mut p.pp("fusion"), cond_channels, &cfg.injection_channels())?;
        let zero_skips = (1..=ENCODER_BLOCKS)
            .map(|i| {
                let c = cfg.encoder_channels(i);
                Conv2d::new(&mut p.pp(&format!("zero{i}")), c, c, 1, 1, ConvInit::Zero)
            })
            .collect::<Result<Vec<_>>>()?;
        let zero_middle = Conv2d::new(&mut p.pp("zero_mid"), cfg.levels[3], cfg.levels[3], 1, 1, ConvInit::Zero)?;
        Ok(ControlBranch {
            kind,
            encoder,
            fusion,
            zero_skips,
            zero_middle,
        })
    }

    /// Copies the base encoder weights into this branch's encoder.
    pub fn copy_from_base(store: &ParamStore, base_prefix: &str, branch_prefix: &str) -> Result<usize> {
        store.copy_prefix(&format!("{base_prefix}."), &format!("{branch_prefix}.enc."))
    }

    /// Residuals of this branch for latent `x` given its injection bundle.
    /// `keep` (shape B, values 0/1) zeroes the bundle of dropped items.
    pub fn forward(
        &self,
        x: &Tensor,
        ts: &[f64],
        text: &TextBatch,
        bundle: &[Tensor],
        keep: Option<&Tensor>,
    ) -> Result<ControlResiduals> {
        if bundle.len() != INJECTION_BLOCKS.len() {
            return Err(Error::Shape(format!("bundle needs 4 levels, got {}", bundle.len())));
        }
        let bundle: Vec<Tensor> = match keep {
            Some(k) => bundle.iter().map(|t| scale_items(t, k)).collect::<Result<_>>()?,
            None => bundle.to_vec(),
        };
        let temb = self.encoder.time.forward(ts, x.dtype(), x.device())?;
        let fdn = &self.fusion.fdn;
        let out = self.encoder.forward(x, &temb, text, |i, z| {
            match INJECTION_BLOCKS.iter().position(|&b| b == i) {
                Some(r) => {
                    let f = fdn[r].forward(&z, &bundle[r])?;
                    Ok((z + f)?)
                }
                None => Ok(z),
            }
        })?;
        let skips = out
            .skips
            .iter()
            .zip(&self.zero_skips)
            .map(|(s, z)| z.forward(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(ControlResiduals {
            skips,
            middle: self.zero_middle.forward(&out.middle)?,
        })
    }
}

/// Sums residuals of several branches.
pub fn sum_residuals(parts: Vec<ControlResiduals>) -> Result<Option<ControlResiduals>> {
    let mut iter = parts.into_iter();
    let Some(mut acc) = iter.next() else { return Ok(None) };
    for p in iter {
        for (a, b) in acc.skips.iter_mut().zip(&p.skips) {
            *a = (&*a + b)?;
        }
        acc.middle = (&acc.middle + &p.middle)?;
    }
    Ok(Some(acc))
}
