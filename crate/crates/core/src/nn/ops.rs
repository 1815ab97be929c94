//! Differentiable tensor helpers not provided directly by candle.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::imageops::bilinear_matrix;

/// Parameter-free group normalization of an NCHW tensor.
pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!("{c} channels not divisible into {groups} groups")));
    }
    let g = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(D::Minus1)?;
    let centered = g.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

/// Per-channel spatial normalization without affine parameters.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.dim(1)?;
    group_norm(x, c, eps)
}

fn interp(n_in: usize, n_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(bilinear_matrix(n_in, n_out), (n_out, n_in), device)?.to_dtype(dtype)?)
}

/// Half-pixel bilinear resize of an NCHW tensor, written as two matrix
/// products so that it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rh = interp(h, out_h, x.dtype(), x.device())?;
    let rwt = interp(w, out_w, x.dtype(), x.device())?.t()?;
    let flat = x.reshape((b * c, h, w))?;
    let y = rh.broadcast_matmul(&flat)?.broadcast_matmul(&rwt)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// Every `stride`-th slice of length `n` along `dim`, starting at `start`.
fn take_strided(x: &Tensor, dim: usize, start: usize, n: usize, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.narrow(dim, start, n)?);
    }
    let len = x.dim(dim)?;
    let need = start + n * stride;
    let x = if need > len {
        x.pad_with_zeros(dim, 0, need - len)?
    } else {
        x.clone()
    };
    let y = x.narrow(dim, start, n * stride)?;
    let mut shape = y.dims().to_vec();
    shape[dim] = n;
    shape.insert(dim + 1, stride);
    Ok(y.reshape(shape)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
}

/// Square-kernel convolution as im2col and a matrix product. The backward
/// pass then only needs matmuls and copies, which is much faster on CPU
/// than candle's transposed convolution.
pub fn conv2d(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 || stride == 0 {
        return Err(Error::Shape(format!("conv weight {:?} does not fit input {:?}", weight.dims(), x.dims())));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::Shape(format!("input {h}x{w} smaller than kernel {k}")));
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    if k == 1 && padding == 0 && stride == 1 {
        let y = weight.reshape((o, c))?.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
        return Ok(y.reshape((b, o, h, w))?);
    }
    let xp = if padding > 0 {
        x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?
    } else {
        x.clone()
    };
    let mut cols = Vec::with_capacity(k * k);
    for i in 0..k {
        let rows = take_strided(&xp, 2, i, ho, stride)?;
        for j in 0..k {
            cols.push(take_strided(&rows, 3, j, wo, stride)?);
        }
    }
    let cols = Tensor::stack(&cols, 2)?.reshape((b, c * k * k, ho * wo))?;
    let y = weight.reshape((o, c * k * k))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((b, o, ho, wo))?)
}

/// Softmax over all spatial positions of each (batch, channel) map.
pub fn spatial_softmax(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    Ok(candle_nn::ops::softmax(&flat, D::Minus1)?.reshape((b, c, h, w))?)
}

/// Multiplies each batch item by a per-item scalar from `mask` (shape B).
pub fn scale_items(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, x.rank() - 1));
    Ok(x.broadcast_mul(&mask.reshape(shape)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_candle() {
        let dev = Device::Cpu;
        for (c, o, h, w, k, stride) in [(3, 5, 7, 9, 3, 1), (4, 2, 8, 8, 3, 2), (2, 3, 6, 10, 5, 1), (3, 4, 5, 5, 1, 1), (2, 2, 9, 7, 3, 2)] {
            let x = Tensor::randn(0f64, 1.0, (2, c, h, w), &dev).unwrap();
            let wt = Tensor::randn(0f64, 1.0, (o, c, k, k), &dev).unwrap();
            let want = x.conv2d(&wt, k / 2, stride, 1, 1).unwrap();
            let got = conv2d(&x, &wt, k / 2, stride).unwrap();
            assert_eq!(got.dims(), want.dims());
            let d = (got - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-12, "{c} {o} {h} {w} {k} {stride}: {d}");
        }
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Tensor::full(2.5f64, (1, 2, 3, 5), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 7, 11).unwrap();
        for v in y.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_zero_mean_unit_var() {
        let v: Vec<f64> = (0..2 * 4 * 3 * 3).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect();
        let x = Tensor::from_vec(v, (2, 4, 3, 3), &Device::Cpu).unwrap();
        let y = group_norm(&x, 2, 0.0).unwrap().reshape((2, 2, 18)).unwrap();
        let m = y.mean_keepdim(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let s = y.sqr().unwrap().mean_keepdim(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn spatial_softmax_sums_to_one() {
        let v: Vec<f32> = (0..24).map(|i| i as f32 * 0.3).collect();
        let x = Tensor::from_vec(v, (2, 1, 3, 4), &Device::Cpu).unwrap();
        let s = spatial_softmax(&x).unwrap().sum((2, 3)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }
}
