//! Geospatial attention: per-panorama local attention maps, attention-weighted
//! descriptors, and a global saliency map over the overhead image.

use candle_core::{Tensor, D};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geo::{
    compass_bearing, distance_feature_scaled, pixel_ray_field, target_relative_orientation,
    GeoLocation,
};
use crate::nn::layers::ConvInit;
use crate::nn::ops::{resize_bilinear, spatial_softmax};
use crate::nn::{BatchNorm1, Conv2d, Init, Linear};

/// Channels in the attention input grid.
pub const INPUT_CHANNELS: usize = 8;
/// Extra per-descriptor geometry values: scaled distance, sin and cos bearing.
pub const GEOMETRY_CHANNELS: usize = 3;

/// Small strided CNN: three stride-2 stages, one stride-1 stage, then a
/// 1x1 projection with ReLU.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    stages: Vec<Conv2d>,
    proj: Conv2d,
}

impl ImageEncoder {
    pub const STRIDE: usize = 8;

    pub fn new(init: &mut Init, hidden: usize, out: usize) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, stride) in [2, 2, 2, 1].into_iter().enumerate() {
            stages.push(Conv2d::new(&mut init.pp(&format!("stage{i}")), cin, hidden, 3, stride, ConvInit::Default)?);
            cin = hidden;
        }
        let proj = Conv2d::new(&mut init.pp("proj"), hidden, out, 1, 1, ConvInit::Default)?;
        Ok(ImageEncoder { stages, proj })
    }

    pub fn proj(&self) -> &Conv2d {
        &self.proj
    }

    /// Feature map `(B, C, H/8, W/8)`.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = img.dims4()?;
        if c != 3 || h % Self::STRIDE != 0 || w % Self::STRIDE != 0 {
            return Err(Error::Shape(format!(
                "encoder expects 3 channels and sides divisible by 8, got {c}x{h}x{w}"
            )));
        }
        let mut x = img.clone();
        for s in &self.stages {
            x = s.forward(&x)?.silu()?;
        }
        Ok(self.proj.forward(&x)?.relu()?)
    }
}

/// Channel-wise max and mean of a feature map: `(B, 2, h, w)`.
pub fn pool_channels(features: &Tensor) -> Result<Tensor> {
    let mx = features.max_keepdim(1)?;
    let mean = features.mean_keepdim(1)?;
    Ok(Tensor::cat(&[&mx, &mean], 1)?)
}

/// Encodes and pools; returns `(features, pooled)`.
pub fn encode_pooled(encoder: &ImageEncoder, img: &Tensor) -> Result<(Tensor, Tensor)> {
    let f = encoder.forward(img)?;
    let p = pool_channels(&f)?;
    Ok((f, p))
}

/// Concatenates panorama pooled (2), satellite pooled (2), distance (1) and
/// target-relative orientation (3) maps, in that order.
pub fn build_attention_input(pano2: &Tensor, sat2: &Tensor, dist1: &Tensor, orient3: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = pano2.dims4()?;
    for (t, c, what) in [(pano2, 2, "panorama"), (sat2, 2, "satellite"), (dist1, 1, "distance"), (orient3, 3, "orientation")] {
        if t.dims() != [b, c, h, w] {
            return Err(Error::Shape(format!(
                "{what} map has shape {:?}, expected {:?}",
                t.dims(),
                [b, c, h, w]
            )));
        }
    }
    Ok(Tensor::cat(&[pano2, sat2, dist1, orient3], 1)?)
}

/// `value[b, c] = Σ_{h,w} F[b,c,h,w] · A[b,0,h,w]`.
pub fn attention_descriptor(features: &Tensor, attn: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = features.dims4()?;
    if attn.dims() != [b, 1, h, w] {
        return Err(Error::Shape(format!(
            "attention map {:?} does not match features {:?}",
            attn.dims(),
            features.dims()
        )));
    }
    Ok(features.broadcast_mul(attn)?.sum((2, 3))?)
}

/// Geometry maps for one panorama: distance `(1, h, w)` and orientation
/// `(3, h, w)`, flattened channel-first.
pub fn geometry_maps(pano: GeoLocation, target: GeoLocation, h: usize, w: usize, distance_scale: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let dist = distance_feature_scaled(pano, target, h, w, distance_scale);
    let bearing = match compass_bearing(pano, target) {
        Ok(b) => b,
        Err(Error::CoincidentPoints) => 0.0,
        Err(e) => return Err(e),
    };
    let orient = target_relative_orientation(&pixel_ray_field(h, w)?, bearing).to_channels_first();
    Ok((dist, orient))
}

/// `[distance / scale, sin b, cos b]` with `b` the bearing from target to
/// panorama.
pub fn relative_geometry(pano: GeoLocation, target: GeoLocation, distance_scale: f64) -> [f64; 3] {
    let d = crate::geo::haversine_distance(pano, target) / distance_scale;
    let b = compass_bearing(target, pano).unwrap_or(0.0).to_radians();
    [d, b.sin(), b.cos()]
}

#[derive(Debug, Clone)]
pub struct GeoAttention {
    pub pano_encoder: ImageEncoder,
    pub sat_encoder: ImageEncoder,
    conv3: Conv2d,
    conv5: Conv2d,
    mix: Conv2d,
    global_fc: Linear,
    bn: BatchNorm1,
    grid: usize,
    overhead: usize,
}

impl GeoAttention {
    pub fn new(init: &mut Init, cfg: &RunConfig) -> Result<Self> {
        let a = &cfg.attention;
        Ok(GeoAttention {
            pano_encoder: ImageEncoder::new(&mut init.pp("pano_enc"), a.encoder_channels, a.feature_channels)?,
            sat_encoder: ImageEncoder::new(&mut init.pp("sat_enc"), a.encoder_channels, a.feature_channels)?,
            conv3: Conv2d::new(&mut init.pp("local.conv3"), INPUT_CHANNELS, a.branch_channels, 3, 1, ConvInit::Default)?,
            conv5: Conv2d::new(&mut init.pp("local.conv5"), INPUT_CHANNELS, a.branch_channels, 5, 1, ConvInit::Default)?,
            mix: Conv2d::new(&mut init.pp("local.mix"), 2 * a.branch_channels, 1, 1, 1, ConvInit::Default)?,
            global_fc: Linear::new(
                &mut init.pp("global.fc"),
                a.feature_channels + GEOMETRY_CHANNELS,
                a.global_grid * a.global_grid,
            )?,
            bn: BatchNorm1::new(&mut init.pp("global.bn"), a.bn_momentum, a.bn_eps)?,
            grid: a.global_grid,
            overhead: cfg.render.overhead_size,
        })
    }

    /// Local attention logits and map, both `(B, 1, h, w)`.
    pub fn local_attention(&self, input8: &Tensor) -> Result<Tensor> {
        if input8.dim(1)? != INPUT_CHANNELS {
            return Err(Error::Shape(format!("attention input needs 8 channels, got {}", input8.dim(1)?)));
        }
        let a = self.conv3.forward(input8)?;
        let b = self.conv5.forward(input8)?;
        let logits = self.mix.forward(&Tensor::cat(&[&a, &b], 1)?)?;
        spatial_softmax(&logits)
    }

    /// Global map `(B, 1, S, S)` in (0, 1). `desc` is `(B, N, C)`, `geom`
    /// `(B, N, 3)`, `mask` `(B, N)` with 1 for real panoramas. Items whose
    /// mask is all zero pool to a zero vector; callers that need a strict
    /// check use [`GeoAttention::global_attention`].
    pub fn global_attention_pooled(&self, desc: &Tensor, geom: &Tensor, mask: &Tensor, train: bool) -> Result<Tensor> {
        let (b, n, _) = desc.dims3()?;
        if geom.dims() != [b, n, GEOMETRY_CHANNELS] || mask.dims() != [b, n] {
            return Err(Error::Shape(format!(
                "descriptor {:?}, geometry {:?} and mask {:?} disagree",
                desc.dims(),
                geom.dims(),
                mask.dims()
            )));
        }
        let feats = Tensor::cat(&[desc, geom], 2)?;
        let m = mask.unsqueeze(2)?;
        let count = mask.sum_keepdim(1)?.maximum(1.0)?;
        let pooled = feats.broadcast_mul(&m)?.sum(1)?.broadcast_div(&count)?;
        let grid = self
            .global_fc
            .forward(&pooled)?
            .reshape((b, 1, self.grid, self.grid))?;
        let up = resize_bilinear(&grid, self.overhead, self.overhead)?;
        Ok(candle_nn::ops::sigmoid(&self.bn.forward(&up, train)?)?)
    }

    pub fn global_attention(&self, desc: &Tensor, geom: &Tensor, mask: &Tensor, train: bool) -> Result<Tensor> {
        let counts = mask.sum(1)?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        if counts.iter().any(|&c| c <= 0.0) {
            return Err(Error::EmptyInput("every descriptor is masked".into()));
        }
        self.global_attention_pooled(desc, geom, mask, train)
    }
}

/// Per-item spatial sum of a `(B, 1, h, w)` map.
pub fn map_sums(map: &Tensor) -> Result<Vec<f64>> {
    Ok(map.sum((1, 2, 3))?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}

/// Bilinear upsampling of local maps to `(out_h, out_w)`.
pub fn upsample_map(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    resize_bilinear(map, out_h, out_w)
}

/// Index of the maximum over the last dimension for a 1-D tensor.
pub fn argmax_last(t: &Tensor) -> Result<u32> {
    Ok(t.argmax(D::Minus1)?.to_scalar::<u32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn model(dtype: DType) -> (ParamStore, GeoAttention, RunConfig) {
        let cfg = RunConfig::tiny();
        let mut store = ParamStore::new(dtype);
        let mut rng = crate::rng::substream(0, "attn");
        let m = GeoAttention::new(&mut Init::new(&mut store, &mut rng), &cfg).unwrap();
        (store, m, cfg)
    }

    #[test]
    fn pooled_shape_is_one_eighth() {
        let (_, m, cfg) = model(DType::F32);
        let (h, w) = (cfg.render.pano_height, cfg.render.pano_width);
        let img = Tensor::zeros((1, 3, h, w), DType::F32, &Device::Cpu).unwrap();
        let (_, p) = encode_pooled(&m.pano_encoder, &img).unwrap();
        assert_eq!(p.dims(), [1, 2, h / 8, w / 8]);
    }

    #[test]
    fn zero_projection_gives_zero_pool() {
        let (store, m, _) = model(DType::F32);
        for name in ["pano_enc.proj.weight", "pano_enc.proj.bias"] {
            let v = store.param(name).unwrap();
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let img = Tensor::zeros((1, 3, 16, 32), DType::F32, &Device::Cpu).unwrap();
        let (_, p) = encode_pooled(&m.pano_encoder, &img).unwrap();
        assert!(p.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_input_slices_back() {
        let dev = Device::Cpu;
        let p = Tensor::rand(0f32, 1., (2, 2, 3, 4), &dev).unwrap();
        let s = Tensor::rand(0f32, 1., (2, 2, 3, 4), &dev).unwrap();
        let d = Tensor::ones((2, 1, 3, 4), DType::F32, &dev).unwrap();
        let o = Tensor::rand(0f32, 1., (2, 3, 3, 4), &dev).unwrap();
        let x = build_attention_input(&p, &s, &d, &o).unwrap();
        assert_eq!(x.dim(1).unwrap(), INPUT_CHANNELS);
        let back = x.narrow(1, 0, 2).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            p.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert!(build_attention_input(&p, &s, &d, &s).is_err());
    }

    #[test]
    fn zero_parameters_give_uniform_local_map() {
        let (store, m, _) = model(DType::F64);
        for (name, v) in store.params() {
            if name.starts_with("local.") {
                v.set(&v.zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::rand(-1f64, 1., (1, 8, 4, 16), &Device::Cpu).unwrap();
        let a = m.local_attention(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(a.iter().all(|v| (v - 1.0 / 64.0).abs() < 1e-15));
    }

    #[test]
    fn one_hot_attention_selects_a_position() {
        let dev = Device::Cpu;
        let f = Tensor::rand(-1f64, 1., (1, 3, 2, 5), &dev).unwrap();
        let mut a = vec![0.0f64; 10];
        a[7] = 1.0;
        let a = Tensor::from_vec(a, (1, 1, 2, 5), &dev).unwrap();
        let d = attention_descriptor(&f, &a).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let fv = f.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for c in 0..3 {
            assert_eq!(d[c], fv[c * 10 + 7]);
        }
    }

    #[test]
    fn global_map_shape_and_range() {
        let (_, m, cfg) = model(DType::F32);
        let dev = Device::Cpu;
        let c = cfg.attention.feature_channels;
        let desc = Tensor::rand(0f32, 1., (2, 3, c), &dev).unwrap();
        let geom = Tensor::rand(-1f32, 1., (2, 3, 3), &dev).unwrap();
        let mask = Tensor::ones((2, 3), DType::F32, &dev).unwrap();
        let g = m.global_attention(&desc, &geom, &mask, false).unwrap();
        let s = cfg.render.overhead_size;
        assert_eq!(g.dims(), [2, 1, s, s]);
        assert!(g.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v > 0.0 && v < 1.0));
        let zero = Tensor::zeros((2, 3), DType::F32, &dev).unwrap();
        assert!(matches!(m.global_attention(&desc, &geom, &zero, false), Err(Error::EmptyInput(_))));
    }
}
