//! Parameter storage, layers and optimizer on top of candle tensors.
//!
//! All parameters are created from seeded host-side draws so that a model is
//! a pure function of the run seed.

pub mod layers;
pub mod ops;
pub mod optim;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal, Uniform};

use crate::dataio::{HostData, HostTensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub use layers::{BatchNorm1, Conv2d, GroupNorm, Linear};
pub use optim::AdamW;

#[derive(Debug, Clone, Copy)]
pub enum InitKind {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

impl InitKind {
    /// Default fan-in scaled uniform init.
    pub fn fan_in(fan_in: usize) -> Self {
        InitKind::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            device: Device::Cpu,
            dtype,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    fn host_tensor(&self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Overwrites every parameter under `dst` with the same-named one under `src`.
    pub fn copy_prefix(&self, src: &str, dst: &str) -> Result<usize> {
        let mut n = 0;
        for (name, var) in self.params.range(dst.to_string()..) {
            let Some(rest) = name.strip_prefix(dst) else { break };
            let from = format!("{src}{rest}");
            let s = self
                .params
                .get(&from)
                .ok_or_else(|| Error::Shape(format!("no source parameter {from} for {name}")))?;
            var.set(s.as_tensor())?;
            n += 1;
        }
        Ok(n)
    }

    fn export(map: &BTreeMap<String, Var>) -> Result<BTreeMap<String, HostTensor>> {
        let mut out = BTreeMap::new();
        for (name, var) in map {
            let t = var.as_tensor().flatten_all()?;
            let data = match t.dtype() {
                DType::F64 => HostData::F64(t.to_vec1::<f64>()?),
                _ => HostData::F32(t.to_dtype(DType::F32)?.to_vec1::<f32>()?),
            };
            out.insert(
                name.clone(),
                HostTensor {
                    shape: var.dims().to_vec(),
                    data,
                },
            );
        }
        Ok(out)
    }

    pub fn export_params(&self) -> Result<BTreeMap<String, HostTensor>> {
        Self::export(&self.params)
    }

    pub fn export_buffers(&self) -> Result<BTreeMap<String, HostTensor>> {
        Self::export(&self.buffers)
    }

    fn import(map: &BTreeMap<String, Var>, src: &BTreeMap<String, HostTensor>, device: &Device, what: &str) -> Result<()> {
        if src.len() != map.len() {
            return Err(Error::Corrupt(format!(
                "{what}: checkpoint has {} tensors, model has {}",
                src.len(),
                map.len()
            )));
        }
        for (name, var) in map {
            let h = src
                .get(name)
                .ok_or_else(|| Error::Corrupt(format!("{what}: missing tensor {name}")))?;
            if h.shape != var.dims() {
                return Err(Error::Corrupt(format!(
                    "{what}: shape mismatch for {name}: {:?} vs {:?}",
                    h.shape,
                    var.dims()
                )));
            }
            let t = match &h.data {
                HostData::F32(v) => Tensor::from_vec(v.clone(), h.shape.as_slice(), device)?,
                HostData::F64(v) => Tensor::from_vec(v.clone(), h.shape.as_slice(), device)?,
            };
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn import_params(&self, src: &BTreeMap<String, HostTensor>) -> Result<()> {
        Self::import(&self.params, src, &self.device, "params")
    }

    pub fn import_buffers(&self, src: &BTreeMap<String, HostTensor>) -> Result<()> {
        Self::import(&self.buffers, src, &self.device, "buffers")
    }
}

/// Scoped parameter factory.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: &str) -> Init<'_> {
        Init {
            prefix: self.full(name),
            store: &mut *self.store,
            rng: &mut *self.rng,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn draw(&mut self, n: usize, kind: InitKind) -> Vec<f64> {
        match kind {
            InitKind::Zeros => vec![0.0; n],
            InitKind::Ones => vec![1.0; n],
            InitKind::Uniform(b) => {
                let d = Uniform::new_inclusive(-b, b).expect("valid bound");
                (0..n).map(|_| d.sample(self.rng)).collect()
            }
            InitKind::Normal(s) => {
                let d = Normal::new(0.0, s).expect("valid std");
                (0..n).map(|_| d.sample(self.rng)).collect()
            }
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], kind: InitKind) -> Result<Tensor> {
        let full = self.full(name);
        if self.store.params.contains_key(&full) {
            return Err(Error::Shape(format!("duplicate parameter {full}")));
        }
        let values = self.draw(shape.iter().product(), kind);
        let var = Var::from_tensor(&self.store.host_tensor(shape, values)?)?;
        let t = var.as_tensor().clone();
        self.store.params.insert(full, var);
        Ok(t)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let full = self.full(name);
        let values = vec![value; shape.iter().product()];
        let var = Var::from_tensor(&self.store.host_tensor(shape, values)?)?;
        self.store.buffers.insert(full, var.clone());
        Ok(var)
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut *self.rng
    }
}
