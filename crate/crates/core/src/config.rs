//! Run configuration: every tunable knob in one serializable tree.
//!
//! [`RunConfig::default`] mirrors the full-size layout (256×1024 panoramas,
//! 64×256 latents, 64 base channels). [`RunConfig::tiny`] shrinks every size
//! so training and sampling run on a single CPU core in minutes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

pub const DEFAULT_PROMPT: &str = "A high-resolution street-view panorama";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub geo: GeoConfig,
    pub world: WorldConfig,
    pub render: RenderConfig,
    pub data: DataConfig,
    pub attention: AttentionConfig,
    pub fusion: FusionConfig,
    pub unet: UnetConfig,
    pub schedule: ScheduleConfig,
    pub dropout: DropoutConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoConfig {
    /// Meters are divided by this before entering the attention network.
    pub distance_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Side of the square scene footprint in meters.
    pub extent: f64,
    pub street_spacing: f64,
    pub street_width: f64,
    pub building_count: usize,
    pub building_size_min: f64,
    pub building_size_max: f64,
    pub building_height_min: f64,
    pub building_height_max: f64,
    pub landmark_count: usize,
    pub landmark_size: f64,
    pub landmark_height: f64,
    pub placement_retries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub pano_height: usize,
    pub pano_width: usize,
    pub overhead_size: usize,
    pub gsd: f64,
    pub camera_height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeFilter {
    Bilinear,
    Area,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Panorama condition slots fed to the diffusion model.
    pub conditions: usize,
    /// Nearby panoramas used for global attention.
    pub attention_set: usize,
    pub resize_filter: ResizeFilter,
    pub prompt: String,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    /// Width of the CNN encoder stages.
    pub encoder_channels: usize,
    /// Channels of the encoder's final projection (descriptor length).
    pub feature_channels: usize,
    /// Output channels of each of the 3×3 and 5×5 convolutions.
    pub branch_channels: usize,
    /// Side of the learned global grid before upsampling.
    pub global_grid: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Channels of the latent condition features.
    pub cond_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    pub latent_channels: usize,
    /// Multiplier from codec latents to diffusion space, chosen so the
    /// latents of synthetic panoramas have roughly unit variance.
    pub latent_scale: f64,
    pub base_channels: usize,
    pub channel_mult: [usize; 4],
    pub norm_groups: usize,
    pub text_width: usize,
    pub text_vocab: usize,
    pub max_text_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    pub p_keep_all: f64,
    pub p_drop_all: f64,
    pub p_each: f64,
    pub p_text_empty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub checkpoint_every: usize,
    pub modality_dropout: bool,
    pub lr_schedule: LrSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to zero at `steps`.
    Cosine,
}

impl TrainConfig {
    /// Learning rate for the update taken at `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let f = (step as f64 / self.steps.max(1) as f64).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * f).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Project each step's clean-latent estimate onto latents that decode to
    /// colors in [-1, 1].
    pub clip_denoised: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            geo: GeoConfig {
                distance_scale: crate::geo::DEFAULT_DISTANCE_SCALE,
            },
            world: WorldConfig {
                origin_lat: 40.65,
                origin_lon: -73.95,
                extent: 160.0,
                street_spacing: 40.0,
                street_width: 8.0,
                building_count: 24,
                building_size_min: 6.0,
                building_size_max: 14.0,
                building_height_min: 6.0,
                building_height_max: 24.0,
                landmark_count: 3,
                landmark_size: 1.5,
                landmark_height: 40.0,
                placement_retries: 5000,
            },
            render: RenderConfig {
                pano_height: 256,
                pano_width: 1024,
                overhead_size: 256,
                gsd: 0.3,
                camera_height: 2.5,
            },
            data: DataConfig {
                conditions: 2,
                attention_set: 20,
                resize_filter: ResizeFilter::Bilinear,
                prompt: DEFAULT_PROMPT.to_string(),
                val_fraction: 0.1,
                test_fraction: 0.1,
            },
            attention: AttentionConfig {
                encoder_channels: 64,
                feature_channels: 64,
                branch_channels: 16,
                global_grid: 32,
                bn_momentum: 0.1,
                bn_eps: 1e-5,
            },
            fusion: FusionConfig { cond_channels: 128 },
            unet: UnetConfig {
                latent_channels: 4,
                latent_scale: 2.5,
                base_channels: 64,
                channel_mult: [1, 2, 3, 4],
                norm_groups: 32,
                text_width: 128,
                text_vocab: 4096,
                max_text_len: 16,
            },
            schedule: ScheduleConfig {
                train_timesteps: 1000,
                beta_start: 0.00085,
                beta_end: 0.012,
            },
            dropout: DropoutConfig {
                p_keep_all: 0.3,
                p_drop_all: 0.1,
                p_each: 0.5,
                p_text_empty: 0.5,
            },
            train: TrainConfig {
                lr: 2e-5,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 1e-2,
                batch_size: 16,
                steps: 10_000,
                checkpoint_every: 1000,
                modality_dropout: true,
                lr_schedule: LrSchedule::Constant,
            },
            sample: SampleConfig {
                steps: 50,
                cfg_scale: 7.5,
                clip_denoised: true,
            },
        }
    }
}

impl RunConfig {
    /// Small-footprint configuration with the same topology.
    pub fn tiny() -> Self {
        let mut c = RunConfig::default();
        c.world.extent = 96.0;
        c.world.street_spacing = 32.0;
        c.world.building_count = 10;
        c.world.placement_retries = 5000;
        c.render = RenderConfig {
            pano_height: 32,
            pano_width: 128,
            overhead_size: 32,
            gsd: 2.4,
            camera_height: 2.5,
        };
        c.data.attention_set = 4;
        c.attention = AttentionConfig {
            encoder_channels: 8,
            feature_channels: 8,
            branch_channels: 4,
            global_grid: 8,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        };
        c.fusion.cond_channels = 8;
        c.unet = UnetConfig {
            latent_channels: 4,
            latent_scale: 2.5,
            base_channels: 16,
            channel_mult: [1, 2, 2, 2],
            norm_groups: 4,
            text_width: 16,
            text_vocab: 256,
            max_text_len: 8,
        };
        c.train.lr = 4e-3;
        c.train.lr_schedule = LrSchedule::Cosine;
        c.train.weight_decay = 0.0;
        c.train.batch_size = 4;
        c.train.steps = 2000;
        c.train.checkpoint_every = 500;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "full" => Ok(RunConfig::default()),
            "tiny" => Ok(RunConfig::tiny()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected 'default' or 'tiny')"
            ))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Latent spatial size (image / 4).
    pub fn latent_hw(&self) -> (usize, usize) {
        (self.render.pano_height / 4, self.render.pano_width / 4)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        let r = &self.render;
        if r.pano_width != 4 * r.pano_height {
            return bad(format!(
                "panorama width must be 4x height, got {}x{}",
                r.pano_height, r.pano_width
            ));
        }
        // latent = /4, three further halvings in the denoiser, stride-8 attention encoder
        if r.pano_height % 32 != 0 {
            return bad(format!("pano_height must be a multiple of 32, got {}", r.pano_height));
        }
        if r.overhead_size % 8 != 0 || r.overhead_size == 0 {
            return bad(format!("overhead_size must be a positive multiple of 8, got {}", r.overhead_size));
        }
        if !(r.gsd > 0.0) || !(r.camera_height > 0.0) {
            return bad("gsd and camera_height must be positive".into());
        }
        if r.gsd * r.overhead_size as f64 > self.world.extent {
            return bad(format!(
                "overhead footprint {} m exceeds scene extent {} m",
                r.gsd * r.overhead_size as f64,
                self.world.extent
            ));
        }
        if self.data.conditions == 0 {
            return bad("data.conditions must be >= 1".into());
        }
        if self.data.attention_set < self.data.conditions {
            return bad("data.attention_set must be >= data.conditions".into());
        }
        let u = &self.unet;
        if u.latent_channels < 3 {
            return bad("unet.latent_channels must be >= 3".into());
        }
        if !(u.latent_scale.is_finite() && u.latent_scale > 0.0) {
            return bad(format!("unet.latent_scale must be positive, got {}", u.latent_scale));
        }
        for m in u.channel_mult {
            let ch = u.base_channels * m;
            if ch == 0 || ch % u.norm_groups != 0 {
                return bad(format!("channel count {ch} not divisible by norm_groups {}", u.norm_groups));
            }
        }
        if self.fusion.cond_channels == 0 || self.attention.feature_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        let s = &self.schedule;
        if s.train_timesteps < 2 || !(0.0 < s.beta_start && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return bad("invalid noise schedule".into());
        }
        let d = &self.dropout;
        let probs = [d.p_keep_all, d.p_drop_all, d.p_each, d.p_text_empty];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || d.p_keep_all + d.p_drop_all > 1.0 {
            return bad("invalid dropout probabilities".into());
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return bad("train.batch_size and train.lr must be positive".into());
        }
        if self.sample.steps == 0 {
            return bad("sample.steps must be >= 1".into());
        }
        Ok(())
    }
}
