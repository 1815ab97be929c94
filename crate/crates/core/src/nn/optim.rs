//! AdamW with host-side moment buffers so that its state can be checkpointed.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use super::ParamStore;
use crate::dataio::{HostData, HostTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub params: AdamWParams,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(params: AdamWParams) -> Self {
        AdamW {
            params,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One decoupled-weight-decay Adam update of every parameter that has a
    /// gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.step as i32);
        let bc2 = 1.0 - p.beta2.powi(self.step as i32);
        for (name, var) in store.params() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let mut theta = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
                v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                theta[i] = theta[i] * (1.0 - p.lr * p.weight_decay) - p.lr * mhat / (vhat.sqrt() + p.eps);
            }
            let t = Tensor::from_vec(theta, var.dims(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn export(&self) -> (BTreeMap<String, HostTensor>, BTreeMap<String, HostTensor>) {
        let conv = |map: &BTreeMap<String, Vec<f64>>| {
            map.iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        HostTensor {
                            shape: vec![v.len()],
                            data: HostData::F64(v.clone()),
                        },
                    )
                })
                .collect()
        };
        (conv(&self.m), conv(&self.v))
    }

    pub fn import(
        &mut self,
        step: u64,
        m: &BTreeMap<String, HostTensor>,
        v: &BTreeMap<String, HostTensor>,
    ) -> Result<()> {
        let conv = |map: &BTreeMap<String, HostTensor>| -> Result<BTreeMap<String, Vec<f64>>> {
            map.iter()
                .map(|(k, t)| match &t.data {
                    HostData::F64(d) => Ok((k.clone(), d.clone())),
                    HostData::F32(_) => Err(Error::Corrupt(format!("optimizer state {k} must be f64"))),
                })
                .collect()
        };
        self.m = conv(m)?;
        self.v = conv(v)?;
        self.step = step;
        Ok(())
    }
}
