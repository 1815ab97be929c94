use candle_core::{Tensor, Var};

use super::ops::{conv2d, group_norm};
use super::{Init, InitKind};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvInit {
    /// Fan-in uniform weights and bias.
    Default,
    /// Fan-in uniform weights, zero bias.
    ZeroBias,
    /// Fan-in uniform weights, no bias.
    NoBias,
    /// All-zero weights and bias.
    Zero,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        mode: ConvInit,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let wkind = if mode == ConvInit::Zero {
            InitKind::Zeros
        } else {
            InitKind::fan_in(fan_in)
        };
        let weight = init.param("weight", &[cout, cin, kernel, kernel], wkind)?;
        let bias = match mode {
            ConvInit::NoBias => None,
            ConvInit::Default => Some(init.param("bias", &[cout], InitKind::fan_in(fan_in))?),
            ConvInit::ZeroBias | ConvInit::Zero => Some(init.param("bias", &[cout], InitKind::Zeros)?),
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.padding, self.stride)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(init: &mut Init, din: usize, dout: usize) -> Result<Self> {
        Ok(Linear {
            weight: init.param("weight", &[dout, din], InitKind::fan_in(din))?,
            bias: init.param("bias", &[dout], InitKind::fan_in(din))?,
        })
    }

    /// Applies to the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, channels: usize, groups: usize) -> Result<Self> {
        Ok(GroupNorm {
            groups,
            weight: init.param("weight", &[channels], InitKind::Ones)?,
            bias: init.param("bias", &[channels], InitKind::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let y = group_norm(x, self.groups, Self::EPS)?;
        Ok(y
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Batch normalization over a single channel with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm1 {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm1 {
    pub fn new(init: &mut Init, momentum: f64, eps: f64) -> Result<Self> {
        Ok(BatchNorm1 {
            weight: init.param("weight", &[1], InitKind::Ones)?,
            bias: init.param("bias", &[1], InitKind::Zeros)?,
            running_mean: init.buffer("running_mean", &[1], 0.0)?,
            running_var: init.buffer("running_var", &[1], 1.0)?,
            momentum,
            eps,
        })
    }

    /// `train` uses batch statistics and updates the running ones.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (mean, var) = if train {
            let n = x.elem_count();
            let mean = x.mean_all()?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_all()?;
            let m = self.momentum;
            let unbiased = (var.detach() * (n as f64 / (n.max(2) - 1) as f64))?;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().reshape(1)? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.reshape(1)? * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean.reshape(1)?, var.reshape(1)?)
        } else {
            (
                self.running_mean.as_tensor().detach(),
                self.running_var.as_tensor().detach(),
            )
        };
        let scale = (self.weight.clone() / (var + self.eps)?.sqrt()?)?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&scale)?.broadcast_add(&self.bias)?;
        Ok(y)
    }
}
