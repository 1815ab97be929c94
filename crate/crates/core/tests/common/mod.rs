#![allow(dead_code)]

use mvps_core::candle_core::{DType, Device, Tensor};
use mvps_core::config::RunConfig;
use mvps_core::dataio::{load_manifest, SampleRecord};
use mvps_core::imageops::ImageArray;
use mvps_core::nn::ParamStore;
use mvps_core::pipeline::{prepare_sample, PreparedSample};
use mvps_core::rng::{substream, Rng};
use mvps_core::synthworld::make_dataset;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub struct Data {
    pub dir: tempfile::TempDir,
    pub records: Vec<SampleRecord>,
    pub samples: Vec<PreparedSample>,
}

pub fn dataset(cfg: &RunConfig, scenes: usize, panos: usize, seed: u64) -> Data {
    let dir = tempfile::tempdir().unwrap();
    let set = make_dataset(scenes, panos, seed, dir.path(), cfg).unwrap();
    let records = load_manifest(&set.manifest_path).unwrap();
    let samples = records.iter().map(|r| prepare_sample(r, cfg).unwrap()).collect();
    Data { dir, records, samples }
}

pub fn randn(rng: &mut Rng, shape: &[usize], dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn scramble(img: &mut ImageArray, rng: &mut Rng) {
    for v in &mut img.data {
        *v = rng.random_range(-1.0f32..1.0);
    }
}

/// Replaces every condition and attention image with uniform noise.
pub fn randomize(sample: &PreparedSample, rng: &mut Rng) -> PreparedSample {
    let mut s = sample.clone();
    for i in 0..s.conditions.slots() {
        scramble(s.conditions.image_mut(i), rng);
    }
    scramble(&mut s.satellite, rng);
    for (img, _) in &mut s.attention_panos {
        scramble(img, rng);
    }
    s
}

/// Adds Gaussian noise to every parameter so that zero-initialized layers
/// become active.
pub fn perturb(store: &ParamStore, seed: u64, scale: f64) {
    let mut rng = substream(seed, "test/perturb");
    for var in store.params().values() {
        let noise = randn(&mut rng, var.dims(), var.dtype());
        let v = (var.as_tensor() + (noise * scale).unwrap()).unwrap();
        var.set(&v).unwrap();
    }
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    flat(a).iter().zip(flat(b)).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
