//! Latent-space fusion of conditions with attention masks, multi-scale
//! extraction and feature denormalization into the copied encoder.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::layers::ConvInit;
use crate::nn::ops::instance_norm;
use crate::nn::{Conv2d, Init};

pub const NORM_EPS: f64 = 1e-5;

/// Condition image to latent-resolution features: stride 2, 2, 1 convs.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    convs: Vec<Conv2d>,
}

impl ConditionEncoder {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        let mut convs = Vec::with_capacity(3);
        let mut cin = 3;
        for (i, stride) in [2, 2, 1].into_iter().enumerate() {
            convs.push(Conv2d::new(&mut init.pp(&format!("conv{i}")), cin, channels, 3, stride, ConvInit::ZeroBias)?);
            cin = channels;
        }
        Ok(ConditionEncoder { convs })
    }

    /// `(B, 3, H, W)` to `(B, C, H/4, W/4)`.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = img.dims4()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("condition image must be 3xHxW with H, W divisible by 4, got {c}x{h}x{w}")));
        }
        let mut x = img.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i + 1 < self.convs.len() {
                x = x.silu()?;
            }
        }
        Ok(x)
    }
}

/// `(1 + M) ⊙ F` with `M` of shape `(B, 1, h, w)` broadcast over channels.
pub fn hadamard_fuse(features: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = features.dims4()?;
    if mask.dims() != [b, 1, h, w] {
        return Err(Error::Shape(format!(
            "mask {:?} does not broadcast over features {:?}",
            mask.dims(),
            features.dims()
        )));
    }
    let flat = mask.flatten_all()?.to_dtype(DType::F64)?;
    let lo = flat.min(0)?.to_scalar::<f64>()?;
    let hi = flat.max(0)?.to_scalar::<f64>()?;
    if lo < -1e-6 || hi > 1.0 + 1e-6 {
        return Err(Error::Range(format!("attention mask outside [0, 1]: [{lo}, {hi}]")));
    }
    Ok(features.broadcast_mul(&(mask + 1.0)?)?)
}

/// Per injection level: a zero-initialized 1x1 conv, then `level` stride-2
/// bias-free convs with SiLU.
#[derive(Debug, Clone)]
pub struct MultiscaleExtractor {
    levels: Vec<(Conv2d, Vec<Conv2d>)>,
}

impl MultiscaleExtractor {
    pub fn new(init: &mut Init, cin: usize, level_channels: &[usize]) -> Result<Self> {
        let mut levels = Vec::with_capacity(level_channels.len());
        for (r, &ch) in level_channels.iter().enumerate() {
            let mut lp = init.pp(&format!("level{r}"));
            let zero = Conv2d::new(&mut lp.pp("zero"), cin, ch, 1, 1, ConvInit::Zero)?;
            let down = (0..r)
                .map(|k| Conv2d::new(&mut lp.pp(&format!("down{k}")), ch, ch, 3, 2, ConvInit::NoBias))
                .collect::<Result<Vec<_>>>()?;
            levels.push((zero, down));
        }
        Ok(MultiscaleExtractor { levels })
    }

    /// Concatenates the fused conditions on channels and returns one map per
    /// level, each half the size of the previous.
    pub fn forward(&self, fused: &[Tensor]) -> Result<Vec<Tensor>> {
        if fused.is_empty() {
            return Err(Error::EmptyInput("no fused conditions".into()));
        }
        let x = Tensor::cat(fused, 1)?;
        self.levels
            .iter()
            .map(|(zero, down)| {
                let mut y = zero.forward(&x)?;
                for d in down {
                    y = d.forward(&y)?.silu()?;
                }
                Ok(y)
            })
            .collect()
    }
}

/// Feature denormalization: `norm(Z) · (1 + γ(b)) + β(b)`.
#[derive(Debug, Clone)]
pub struct Fdn {
    pub conv_gamma: Conv2d,
    pub conv_beta: Conv2d,
}

impl Fdn {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Fdn {
            conv_gamma: Conv2d::new(&mut init.pp("gamma"), channels, channels, 3, 1, ConvInit::ZeroBias)?,
            conv_beta: Conv2d::new(&mut init.pp("beta"), channels, channels, 3, 1, ConvInit::ZeroBias)?,
        })
    }

    pub fn forward(&self, z: &Tensor, bundle: &Tensor) -> Result<Tensor> {
        if z.dims() != bundle.dims() {
            return Err(Error::Shape(format!(
                "noise features {:?} and condition features {:?} are not aligned",
                z.dims(),
                bundle.dims()
            )));
        }
        let g = self.conv_gamma.forward(bundle)?;
        let b = self.conv_beta.forward(bundle)?;
        fdn_combine(z, &g, &b)
    }
}

/// `norm(Z) · (1 + g) + b` for given modulation maps.
pub fn fdn_combine(z: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    Ok((instance_norm(z, NORM_EPS)? * (gamma + 1.0)?)?.add(beta)?)
}

/// Per-branch fusion stack: condition encoder, multi-scale extractor and one
/// FDN per injection level.
#[derive(Debug, Clone)]
pub struct FusionBranch {
    pub to_latent: ConditionEncoder,
    pub extractor: MultiscaleExtractor,
    pub fdn: Vec<Fdn>,
}

impl FusionBranch {
    pub fn new(init: &mut Init, cond_channels: usize, level_channels: &[usize]) -> Result<Self> {
        Ok(FusionBranch {
            to_latent: ConditionEncoder::new(&mut init.pp("to_latent"), cond_channels)?,
            extractor: MultiscaleExtractor::new(&mut init.pp("extract"), cond_channels, level_channels)?,
            fdn: level_channels
                .iter()
                .enumerate()
                .map(|(r, &c)| Fdn::new(&mut init.pp(&format!("fdn{r}")), c))
                .collect::<Result<_>>()?,
        })
    }

    /// Injection bundle for one condition image and its latent mask
    /// (`None` skips the Hadamard step).
    pub fn bundle(&self, image: &Tensor, mask: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let f = self.to_latent.forward(image)?;
        let fused = match mask {
            Some(m) => hadamard_fuse(&f, m)?,
            None => f,
        };
        self.extractor.forward(&[fused])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;

    fn init_branch() -> (ParamStore, FusionBranch) {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = crate::rng::substream(0, "fusion");
        let b = FusionBranch::new(&mut Init::new(&mut store, &mut rng), 8, &[8, 8, 16, 16]).unwrap();
        (store, b)
    }

    #[test]
    fn mask_laws() {
        let f = Tensor::rand(-1f64, 1., (2, 3, 4, 5), &Device::Cpu).unwrap();
        let zero = Tensor::zeros((2, 1, 4, 5), DType::F64, &Device::Cpu).unwrap();
        let one = Tensor::ones((2, 1, 4, 5), DType::F64, &Device::Cpu).unwrap();
        let fv = f.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h0 = hadamard_fuse(&f, &zero).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h1 = hadamard_fuse(&f, &one).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(h0, fv);
        assert_eq!(h1, fv.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
        let bad = (one * 1.5).unwrap();
        assert!(matches!(hadamard_fuse(&f, &bad), Err(Error::Range(_))));
    }

    #[test]
    fn bundle_is_zero_at_init_with_halving_sizes() {
        let (_, b) = init_branch();
        let img = Tensor::rand(-1f64, 1., (1, 3, 32, 128), &Device::Cpu).unwrap();
        let levels = b.bundle(&img, None).unwrap();
        assert_eq!(levels.len(), 4);
        let dims: Vec<_> = levels.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![1, 8, 8, 32], vec![1, 8, 4, 16], vec![1, 16, 2, 8], vec![1, 16, 1, 4]]);
        for t in levels {
            assert!(t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_image_gives_zero_latent() {
        let (_, b) = init_branch();
        let img = Tensor::zeros((1, 3, 8, 16), DType::F64, &Device::Cpu).unwrap();
        let f = b.to_latent.forward(&img).unwrap();
        assert_eq!(f.dims(), [1, 8, 2, 4]);
        assert!(f.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fdn_at_init_is_plain_norm() {
        let (_, b) = init_branch();
        let z = Tensor::rand(-2f64, 3., (2, 8, 4, 6), &Device::Cpu).unwrap();
        let zero = z.zeros_like().unwrap();
        let out = b.fdn[0].forward(&z, &zero).unwrap();
        let norm = instance_norm(&z, NORM_EPS).unwrap();
        let d = (out - norm).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
        assert!(b.fdn[0].forward(&z, &z.narrow(1, 0, 4).unwrap()).is_err());
    }
}
