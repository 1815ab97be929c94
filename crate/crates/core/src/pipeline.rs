//! Full model: geospatial attention, per-condition fusion and control
//! branches around the latent denoiser, with training and sampling loops.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::config::RunConfig;
use crate::dataio::conditions::{load_pano_image, load_satellite, select_attention_set, SEG};
use crate::dataio::{select_conditions, Checkpoint, ConditionSet, SampleRecord};
use crate::diffcore::control::sum_residuals;
use crate::diffcore::{
    apply_modality_dropout, ddim_loop, guide, BranchKind, ControlBranch, ControlResiduals, DenoiserConfig,
    DropoutPolicy, FixedCodec, LatentCodec, NoiseSchedule, TextBatch, TextEncoder, UNet,
};
use crate::error::{Error, Result};
use crate::geo::{GeoLocation, OverheadFrame};
use crate::geoattn::{
    attention_descriptor, build_attention_input, encode_pooled, geometry_maps, relative_geometry, GeoAttention,
    ImageEncoder,
};
use crate::imageops::ImageArray;
use crate::nn::ops::resize_bilinear;
use crate::nn::optim::AdamWParams;
use crate::nn::{AdamW, Init, ParamStore};
use crate::rng::{indexed_substream, substream, Rng};

/// Everything loaded from disk for one target.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub target: GeoLocation,
    pub frame: OverheadFrame,
    pub conditions: ConditionSet,
    /// Overhead image at `overhead_size`.
    pub satellite: ImageArray,
    /// Nearest panoramas for attention, ascending distance.
    pub attention_panos: Vec<(ImageArray, GeoLocation)>,
    pub target_image: Option<ImageArray>,
}

/// Number of attention panoramas needed so that every condition panorama
/// also gets a local map.
pub fn attention_count(cfg: &RunConfig) -> usize {
    cfg.data.attention_set.max(cfg.data.conditions)
}

pub fn prepare_sample(record: &SampleRecord, cfg: &RunConfig) -> Result<PreparedSample> {
    let filter = cfg.data.resize_filter;
    let conditions = select_conditions(record, cfg.data.conditions, &cfg.render, filter, &cfg.data.prompt)?;
    let attention_panos = select_attention_set(record, attention_count(cfg))
        .into_iter()
        .map(|p| Ok((load_pano_image(&p.path, &cfg.render, filter)?, p.location)))
        .collect::<Result<Vec<_>>>()?;
    let target_image = if record.target_path.is_file() {
        Some(load_pano_image(&record.target_path, &cfg.render, filter)?)
    } else {
        None
    };
    Ok(PreparedSample {
        id: record.id.clone(),
        target: record.target,
        frame: record.frame,
        conditions,
        satellite: load_satellite(record, &cfg.render, filter)?,
        attention_panos,
        target_image,
    })
}

/// Re-targets a record at an arbitrary location inside its footprint.
pub fn prepare_at(record: &SampleRecord, location: GeoLocation, cfg: &RunConfig) -> Result<PreparedSample> {
    crate::geo::geo_to_overhead_pixel(location, &record.frame)?;
    let mut r = record.clone();
    r.target = location;
    r.seg_path = None;
    for p in &mut r.panoramas {
        p.distance = crate::geo::haversine_distance(p.location, location);
    }
    r.panoramas.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    let mut s = prepare_sample(&r, cfg)?;
    s.target_image = None;
    Ok(s)
}

fn stack(images: &[&ImageArray], dtype: DType, dev: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::EmptyInput("empty image batch".into()))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if im.shape() != (c, h, w) {
            return Err(Error::Shape(format!("ragged image batch: {:?} vs {:?}", im.shape(), (c, h, w))));
        }
        data.extend_from_slice(&im.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), dev)?.to_dtype(dtype)?)
}

fn host(v: Vec<f64>, shape: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(v, shape, dev)?.to_dtype(dtype)?)
}

/// Tensors for one forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    /// One `(B, 3, H, W)` tensor per condition slot.
    pub cond_images: Vec<Tensor>,
    /// One `(B,)` keep flag tensor per slot.
    pub keep: Vec<Tensor>,
    pub prompts: Vec<String>,
    pub attn_panos: Tensor,
    pub satellite: Tensor,
    pub dist: Tensor,
    pub orient: Tensor,
    pub geom: Tensor,
    /// `(B, A)`: panorama present.
    pub present: Tensor,
    /// `(B, A)`: present and within the global-attention set.
    pub global_mask: Tensor,
    pub has_any: Tensor,
    pub targets: Option<Tensor>,
}

/// Attention outputs for a batch.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    /// `(B * A, 1, h_f, w_f)`.
    pub local: Tensor,
    /// `(B, 1, S, S)`, zero for items without panoramas.
    pub global: Tensor,
    /// Per condition panorama, `(B, 1, H_l, W_l)`.
    pub pano_latent: Vec<Tensor>,
    /// `(B, 1, H_l, W_l)`: global map resized to `H_l x H_l` and tiled.
    pub sat_latent: Tensor,
}

pub struct MvpsModel {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub attention: GeoAttention,
    pub text: TextEncoder,
    pub unet: UNet,
    pub branches: Vec<ControlBranch>,
    pub codec: FixedCodec,
    pub schedule: NoiseSchedule,
}

impl MvpsModel {
    pub fn new(cfg: &RunConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let dcfg = DenoiserConfig::from_config(&cfg.unet);
        let seed = cfg.seed;
        let attention = GeoAttention::new(&mut Init::new(&mut store, &mut substream(seed, "init/attention")).pp("attn"), cfg)?;
        let text = TextEncoder::new(
            &mut Init::new(&mut store, &mut substream(seed, "init/text")).pp("text"),
            cfg.unet.text_vocab,
            cfg.unet.max_text_len,
            cfg.unet.text_width,
        )?;
        let unet = UNet::new(&mut Init::new(&mut store, &mut substream(seed, "init/unet")).pp("unet"), &dcfg)?;
        let mut branches = Vec::new();
        for kind in BranchKind::all(cfg.data.conditions) {
            let mut rng = substream(seed, &format!("init/ctrl/{}", kind.name()));
            let b = ControlBranch::new(&mut Init::new(&mut store, &mut rng).pp("ctrl"), kind, &dcfg, cfg.fusion.cond_channels)?;
            ControlBranch::copy_from_base(&store, "unet.enc", &format!("ctrl.{}", kind.name()))?;
            branches.push(b);
        }
        let codec = FixedCodec::new(cfg.unet.latent_channels, dtype, store.device())?;
        Ok(MvpsModel {
            cfg: cfg.clone(),
            schedule: NoiseSchedule::from_config(&cfg.schedule)?,
            store,
            attention,
            text,
            unet,
            branches,
            codec,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device().clone()
    }

    pub fn slots(&self) -> usize {
        self.branches.len()
    }

    /// Feature grid of the attention encoders.
    pub fn feature_hw(&self) -> (usize, usize) {
        (
            self.cfg.render.pano_height / ImageEncoder::STRIDE,
            self.cfg.render.pano_width / ImageEncoder::STRIDE,
        )
    }

    pub fn latent_hw(&self) -> (usize, usize) {
        self.cfg.latent_hw()
    }

    /// Builds a batch from samples and the (possibly dropped-out) condition
    /// sets to feed.
    pub fn build_batch(&self, items: &[(&PreparedSample, &ConditionSet)]) -> Result<Batch> {
        if items.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        let (dt, dev) = (self.dtype(), self.device());
        let slots = self.slots();
        let mut cond_images = Vec::with_capacity(slots);
        let mut keep = Vec::with_capacity(slots);
        for s in 0..slots {
            let imgs: Vec<&ImageArray> = items.iter().map(|(_, c)| c.image(s)).collect();
            cond_images.push(stack(&imgs, dt, &dev)?);
            let k: Vec<f64> = items.iter().map(|(_, c)| if c.drop_mask[s] { 0.0 } else { 1.0 }).collect();
            keep.push(host(k, &[items.len()], dt, &dev)?);
        }
        let a = attention_count(&self.cfg);
        let n_global = self.cfg.data.attention_set;
        let (hf, wf) = self.feature_hw();
        let (ph, pw) = (self.cfg.render.pano_height, self.cfg.render.pano_width);
        let zero_pano = ImageArray::zeros(3, ph, pw);
        let mut panos: Vec<&ImageArray> = Vec::with_capacity(items.len() * a);
        let (mut dist, mut orient, mut geom, mut present, mut gmask, mut any) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let scale = self.cfg.geo.distance_scale;
        for (s, _) in items {
            any.push(if s.attention_panos.is_empty() { 0.0 } else { 1.0 });
            for j in 0..a {
                match s.attention_panos.get(j) {
                    Some((img, loc)) => {
                        panos.push(img);
                        let (d, o) = geometry_maps(*loc, s.target, hf, wf, scale)?;
                        dist.extend(d);
                        orient.extend(o);
                        geom.extend(relative_geometry(*loc, s.target, scale));
                        present.push(1.0);
                        gmask.push(if j < n_global { 1.0 } else { 0.0 });
                    }
                    None => {
                        panos.push(&zero_pano);
                        dist.extend(std::iter::repeat_n(0.0, hf * wf));
                        orient.extend(std::iter::repeat_n(0.0, 3 * hf * wf));
                        geom.extend([0.0; 3]);
                        present.push(0.0);
                        gmask.push(0.0);
                    }
                }
            }
        }
        let b = items.len();
        let sats: Vec<&ImageArray> = items.iter().map(|(s, _)| &s.satellite).collect();
        let targets = if items.iter().all(|(s, _)| s.target_image.is_some()) {
            let t: Vec<&ImageArray> = items.iter().map(|(s, _)| s.target_image.as_ref().unwrap()).collect();
            Some(stack(&t, dt, &dev)?)
        } else {
            None
        };
        Ok(Batch {
            cond_images,
            keep,
            prompts: items.iter().map(|(_, c)| c.prompt.clone()).collect(),
            attn_panos: stack(&panos, dt, &dev)?,
            satellite: stack(&sats, dt, &dev)?,
            dist: host(dist, &[b * a, 1, hf, wf], dt, &dev)?,
            orient: host(orient, &[b * a, 3, hf, wf], dt, &dev)?,
            geom: host(geom, &[b, a, 3], dt, &dev)?,
            present: host(present, &[b, a], dt, &dev)?,
            global_mask: host(gmask, &[b, a], dt, &dev)?,
            has_any: host(any, &[b], dt, &dev)?,
            targets,
        })
    }

    pub fn attention_maps(&self, batch: &Batch, train: bool) -> Result<AttentionMaps> {
        let b = batch.satellite.dim(0)?;
        let a = attention_count(&self.cfg);
        let (hf, wf) = self.feature_hw();
        let (hl, wl) = self.latent_hw();
        let (_, sat_pool) = encode_pooled(&self.attention.sat_encoder, &batch.satellite)?;
        let sat_pool = resize_bilinear(&sat_pool, hf, wf)?;
        let idx: Vec<u32> = (0..b as u32).flat_map(|i| std::iter::repeat_n(i, a)).collect();
        let idx = Tensor::from_vec(idx, b * a, &self.device())?;
        let sat_rep = sat_pool.index_select(&idx, 0)?;
        let (pano_feat, pano_pool) = encode_pooled(&self.attention.pano_encoder, &batch.attn_panos)?;
        let input = build_attention_input(&pano_pool, &sat_rep, &batch.dist, &batch.orient)?;
        let local = self.attention.local_attention(&input)?;
        let desc = attention_descriptor(&pano_feat, &local)?;
        let c = desc.dim(1)?;
        let desc = desc.reshape((b, a, c))?;
        let global = self
            .attention
            .global_attention_pooled(&desc, &batch.geom, &batch.global_mask, train)?;
        let global = crate::nn::ops::scale_items(&global, &batch.has_any)?;

        let local_b = local.reshape((b, a, 1, hf, wf))?;
        let mut pano_latent = Vec::with_capacity(self.cfg.data.conditions);
        for k in 0..self.cfg.data.conditions {
            let m = local_b.narrow(1, k, 1)?.squeeze(1)?;
            let m = resize_bilinear(&m, hl, wl)?;
            let p = batch.present.narrow(1, k, 1)?.squeeze(1)?;
            pano_latent.push(crate::nn::ops::scale_items(&m, &p)?);
        }
        let g = resize_bilinear(&global, hl, hl)?;
        let reps = wl / hl;
        let sat_latent = Tensor::cat(&vec![&g; reps], 3)?;
        Ok(AttentionMaps {
            local,
            global,
            pano_latent,
            sat_latent,
        })
    }

    /// Injection bundles per branch.
    pub fn bundles(&self, batch: &Batch, maps: &AttentionMaps) -> Result<Vec<Vec<Tensor>>> {
        self.branches
            .iter()
            .enumerate()
            .map(|(s, br)| {
                let mask = match br.kind {
                    BranchKind::Seg => None,
                    BranchKind::Sat => Some(&maps.sat_latent),
                    BranchKind::Pano(k) => Some(&maps.pano_latent[k]),
                };
                br.fusion.bundle(&batch.cond_images[s], mask)
            })
            .collect()
    }

    pub fn residuals(&self, x: &Tensor, ts: &[f64], text: &TextBatch, bundles: &[Vec<Tensor>], keep: &[Tensor]) -> Result<ControlResiduals> {
        let parts = self
            .branches
            .iter()
            .enumerate()
            .map(|(s, br)| br.forward(x, ts, text, &bundles[s], Some(&keep[s])))
            .collect::<Result<Vec<_>>>()?;
        sum_residuals(parts)?.ok_or_else(|| Error::EmptyInput("no control branches".into()))
    }

    /// Noise prediction of the controlled denoiser.
    pub fn controlled_eps(&self, x: &Tensor, ts: &[f64], text: &TextBatch, bundles: &[Vec<Tensor>], keep: &[Tensor]) -> Result<Tensor> {
        let r = self.residuals(x, ts, text, bundles, keep)?;
        self.unet.forward_full(x, ts, text, Some(&r), None)
    }

    /// Noise prediction of the denoiser without control branches.
    pub fn base_eps(&self, x: &Tensor, ts: &[f64], text: &TextBatch) -> Result<Tensor> {
        self.unet.forward(x, ts, text)
    }

    pub fn encode_targets(&self, batch: &Batch) -> Result<Tensor> {
        let t = batch
            .targets
            .as_ref()
            .ok_or_else(|| Error::EmptyInput("batch has no target images".into()))?;
        Ok((self.codec.encode(t)? * self.cfg.unet.latent_scale)?)
    }

    fn gaussian(&self, rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        host(v, shape, self.dtype(), &self.device())
    }

    /// Noise-prediction MSE for explicit timesteps and noise.
    pub fn loss(&self, batch: &Batch, ts: &[usize], noise: &Tensor, train: bool) -> Result<Tensor> {
        let x0 = self.encode_targets(batch)?;
        let xt = self.schedule.add_noise(&x0, noise, ts)?;
        let maps = self.attention_maps(batch, train)?;
        let bundles = self.bundles(batch, &maps)?;
        let text = self.text.embed_batch(&batch.prompts)?;
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let eps = self.controlled_eps(&xt, &tf, &text, &bundles, &batch.keep)?;
        Ok((eps - noise)?.sqr()?.mean_all()?)
    }

    /// DDIM sampling. `cfg_scale = None` runs the conditional branch only.
    pub fn sample_latents(&self, samples: &[&PreparedSample], steps: usize, cfg_scale: Option<f64>, seed: u64) -> Result<Tensor> {
        let conds: Vec<ConditionSet> = samples
            .iter()
            .map(|s| {
                let mut c = s.conditions.clone();
                c.drop_slot(SEG);
                c
            })
            .collect();
        let items: Vec<(&PreparedSample, &ConditionSet)> = samples.iter().copied().zip(conds.iter()).collect();
        let batch = self.build_batch(&items)?;
        let maps = self.attention_maps(&batch, false)?;
        let bundles = self.bundles(&batch, &maps)?;
        let text_c = self.text.embed_batch(&batch.prompts)?;
        let text_u = self.text.embed_batch(&vec![String::new(); samples.len()])?;
        let (hl, wl) = self.latent_hw();
        let cl = self.cfg.unet.latent_channels;
        let mut xs = Vec::with_capacity(samples.len());
        for i in 0..samples.len() {
            xs.push(self.gaussian(&mut indexed_substream(seed, "sample/noise", i as u64), &[1, cl, hl, wl])?);
        }
        let x_t = Tensor::cat(&xs, 0)?;
        let scale = self.cfg.unet.latent_scale;
        // detached so a trainable model does not chain graphs across steps
        ddim_loop(&self.schedule, steps, x_t, |x, t| {
            let ts = vec![t as f64; samples.len()];
            let ec = self.controlled_eps(x, &ts, &text_c, &bundles, &batch.keep)?;
            let eps = match cfg_scale {
                None => ec,
                Some(s) => {
                    let eu = self.controlled_eps(x, &ts, &text_u, &bundles, &batch.keep)?;
                    guide(&ec, &eu, s)?
                }
            };
            let eps = eps.detach();
            if !self.cfg.sample.clip_denoised {
                return Ok(eps);
            }
            // re-derive eps from the projected clean estimate
            let ab = self.schedule.alpha_bar(t);
            let x0 = ((x - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
            let x0 = (self.codec.clamp_latent(&(x0 / scale)?)? * scale)?;
            Ok(((x - (x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
        })
    }

    pub fn decode_images(&self, latents: &Tensor) -> Result<Vec<image::RgbImage>> {
        let z = (latents / self.cfg.unet.latent_scale)?;
        let img = self.codec.decode(&z)?.to_dtype(DType::F32)?;
        let (b, c, h, w) = img.dims4()?;
        (0..b)
            .map(|i| {
                let data = img.get(i)?.flatten_all()?.to_vec1::<f32>()?;
                ImageArray {
                    channels: c,
                    height: h,
                    width: w,
                    data,
                }
                .to_rgb()
            })
            .collect()
    }

    pub fn sample(&self, samples: &[&PreparedSample], steps: usize, cfg_scale: f64, seed: u64) -> Result<Vec<image::RgbImage>> {
        let z = self.sample_latents(samples, steps, Some(cfg_scale), seed)?;
        self.decode_images(&z)
    }
}

/// Raw attention maps for one sample, for visualization.
#[derive(Debug, Clone)]
pub struct AttentionExport {
    /// Per present condition panorama: `(h_f, w_f, values)`.
    pub local: Vec<(usize, usize, Vec<f64>)>,
    pub global: (usize, Vec<f64>),
}

pub fn export_attention(model: &MvpsModel, sample: &PreparedSample) -> Result<AttentionExport> {
    let batch = model.build_batch(&[(sample, &sample.conditions)])?;
    let maps = model.attention_maps(&batch, false)?;
    let (hf, wf) = model.feature_hw();
    let a = attention_count(&model.cfg);
    let n = sample.attention_panos.len().min(model.cfg.data.conditions);
    let local = maps.local.to_dtype(DType::F64)?.reshape((a, hf * wf))?;
    let local = (0..n)
        .map(|k| Ok((hf, wf, local.get(k)?.to_vec1::<f64>()?)))
        .collect::<Result<Vec<_>>>()?;
    let s = model.cfg.render.overhead_size;
    let global = maps.global.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(AttentionExport {
        local,
        global: (s, global),
    })
}

/// Named intermediate tensors for debugging: latent masks and bundles.
pub fn debug_features(model: &MvpsModel, sample: &PreparedSample) -> Result<Vec<(String, Tensor)>> {
    let batch = model.build_batch(&[(sample, &sample.conditions)])?;
    let maps = model.attention_maps(&batch, false)?;
    let bundles = model.bundles(&batch, &maps)?;
    let mut out = vec![("sat_mask".to_string(), maps.sat_latent.clone())];
    for (k, m) in maps.pano_latent.iter().enumerate() {
        out.push((format!("pano_{}_mask", k + 1), m.clone()));
    }
    for (br, levels) in model.branches.iter().zip(&bundles) {
        for (r, t) in levels.iter().enumerate() {
            out.push((format!("{}_level{r}", br.kind.name()), t.clone()));
        }
    }
    Ok(out)
}

/// Fixed timesteps and noise for comparable loss measurements.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub ts: Vec<Vec<usize>>,
    pub noise: Vec<Tensor>,
}

impl EvalSet {
    /// `rounds` batches over `n` samples with evenly spread timesteps.
    pub fn new(model: &MvpsModel, n: usize, rounds: usize, seed: u64) -> Result<Self> {
        let t_max = model.schedule.steps();
        let mut rng = substream(seed, "eval");
        let (hl, wl) = model.latent_hw();
        let cl = model.cfg.unet.latent_channels;
        let mut ts = Vec::with_capacity(rounds);
        let mut noise = Vec::with_capacity(rounds);
        let total = n * rounds;
        for r in 0..rounds {
            ts.push(
                (0..n)
                    .map(|i| 1 + ((r * n + i) * (t_max - 1)) / total.max(1))
                    .collect(),
            );
            noise.push(model.gaussian(&mut rng, &[n, cl, hl, wl])?);
        }
        Ok(EvalSet { ts, noise })
    }
}

pub struct Trainer {
    pub model: MvpsModel,
    pub opt: AdamW,
    pub step: u64,
    pub rngs: BTreeMap<String, Rng>,
    policy: DropoutPolicy,
}

const RNG_STREAMS: [&str; 4] = ["train/dropout", "train/noise", "train/timestep", "train/order"];

impl Trainer {
    pub fn new(cfg: &RunConfig, dtype: DType) -> Result<Self> {
        let model = MvpsModel::new(cfg, dtype)?;
        let t = &cfg.train;
        let rngs = RNG_STREAMS.iter().map(|n| (n.to_string(), substream(cfg.seed, n))).collect();
        Ok(Trainer {
            model,
            opt: AdamW::new(AdamWParams {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                weight_decay: t.weight_decay,
            }),
            step: 0,
            rngs,
            policy: DropoutPolicy::from_config(&cfg.dropout)?,
        })
    }

    fn rng(&mut self, name: &str) -> &mut Rng {
        self.rngs.get_mut(name).expect("known stream")
    }

    /// Picks `batch_size` sample indices for the current step.
    pub fn batch_indices(&mut self, n: usize) -> Vec<usize> {
        let bs = self.model.cfg.train.batch_size.min(n).max(1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(self.rng("train/order"));
        idx.truncate(bs);
        idx.sort_unstable();
        idx
    }

    /// One optimizer step on the given samples; returns the loss.
    pub fn train_step(&mut self, samples: &[&PreparedSample]) -> Result<f64> {
        let batch_id = self.step;
        let conds: Vec<ConditionSet> = if self.model.cfg.train.modality_dropout {
            let policy = self.policy;
            samples
                .iter()
                .map(|s| apply_modality_dropout(&s.conditions, &policy, self.rng("train/dropout")).0)
                .collect()
        } else {
            samples.iter().map(|s| s.conditions.clone()).collect()
        };
        let t_max = self.model.schedule.steps();
        let ts: Vec<usize> = {
            let r = self.rng("train/timestep");
            samples.iter().map(|_| rand::Rng::random_range(r, 1..t_max)).collect()
        };
        let (hl, wl) = self.model.latent_hw();
        let cl = self.model.cfg.unet.latent_channels;
        let mut noise_rng = self.rngs.remove("train/noise").expect("noise stream");
        let noise = self.model.gaussian(&mut noise_rng, &[samples.len(), cl, hl, wl]);
        self.rngs.insert("train/noise".into(), noise_rng);
        let noise = noise?;

        let items: Vec<(&PreparedSample, &ConditionSet)> = samples.iter().copied().zip(conds.iter()).collect();
        let batch = self.model.build_batch(&items)?;
        let loss = self.model.loss(&batch, &ts, &noise, true)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { batch_id });
        }
        let grads = loss.backward()?;
        self.opt.params.lr = self.model.cfg.train.lr_at(self.step);
        self.opt.step(&self.model.store, &grads)?;
        self.step += 1;
        Ok(value)
    }

    /// Mean loss over a fixed evaluation set with all conditions kept.
    pub fn eval_loss(&self, samples: &[&PreparedSample], set: &EvalSet) -> Result<f64> {
        let items: Vec<(&PreparedSample, &ConditionSet)> = samples.iter().map(|s| (*s, &s.conditions)).collect();
        let batch = self.model.build_batch(&items)?;
        let mut total = 0.0;
        for (ts, noise) in set.ts.iter().zip(&set.noise) {
            let l = self.model.loss(&batch, ts, noise, false)?;
            total += l.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(total / set.ts.len() as f64)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        tensors.insert("param".to_string(), self.model.store.export_params()?);
        tensors.insert("buffer".to_string(), self.model.store.export_buffers()?);
        let (m, v) = self.opt.export();
        tensors.insert("adam_m".to_string(), m);
        tensors.insert("adam_v".to_string(), v);
        Ok(Checkpoint {
            config: self.model.cfg.clone(),
            step: self.step,
            rng: self.rngs.clone(),
            opt_step: self.opt.step,
            tensors,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let mut t = Trainer::new(&ck.config, dtype)?;
        let empty = BTreeMap::new();
        let group = |g: &str| ck.tensors.get(g).unwrap_or(&empty);
        t.model.store.import_params(group("param"))?;
        t.model.store.import_buffers(group("buffer"))?;
        t.opt.import(ck.opt_step, group("adam_m"), group("adam_v"))?;
        for name in RNG_STREAMS {
            if let Some(r) = ck.rng.get(name) {
                t.rngs.insert(name.to_string(), r.clone());
            }
        }
        t.step = ck.step;
        Ok(t)
    }
}

/// Loads a model for inference from a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<MvpsModel> {
    Ok(Trainer::from_checkpoint(ck, DType::F32)?.model)
}
