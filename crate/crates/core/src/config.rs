//! Model, training and evaluation settings, loaded from TOML.
//!
//! Every section and key is optional; missing keys take the full-size
//! defaults. Unknown keys are rejected.
//!
//! ```toml
//! [encoder]
//! embed_dim = 96
//! depths = [2, 2, 6, 2]
//! heads = [3, 6, 12, 24]
//! window = 7
//! prior_mode = "UK_FG_BG_MEMORY"   # NONE | GAP | UK | UK_FG_BG | UK_FG_BG_MEMORY
//!
//! [decoder]
//! widths = [256, 128, 64, 32, 16]
//! blocks = [2, 3, 3, 2, 2]
//! neck_blocks = 1
//!
//! [train]
//! lr = 4e-4
//! batch_size = 2
//! crop = 64
//!
//! [eval]
//! grad_sigma = 1.4
//! conn_step = 0.1
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior_attention::PriorMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub prior_mode: PriorMode,
    pub input_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 96,
            depths: [2, 2, 6, 2],
            heads: [3, 6, 12, 24],
            window: 7,
            prior_mode: PriorMode::UkFgBgMemory,
            input_channels: 6,
        }
    }
}

impl EncoderConfig {
    pub fn dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 6 {
            return Err(Error::Config(format!("input_channels must be 6 (RGB + 3 trimap planes), got {}", self.input_channels)));
        }
        if self.embed_dim == 0 || self.window == 0 {
            return Err(Error::Config("embed_dim and window must be positive".into()));
        }
        for s in 0..4 {
            if self.depths[s] == 0 {
                return Err(Error::Config(format!("stage {} has zero depth", s + 1)));
            }
            if self.heads[s] == 0 || self.dim(s) % self.heads[s] != 0 {
                return Err(Error::Config(format!("stage {}: {} heads do not divide dim {}", s + 1, self.heads[s], self.dim(s))));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Channel width per upsampling level, coarsest first (1/16 … 1/1).
    pub widths: [usize; 5],
    /// Residual blocks per level.
    pub blocks: [usize; 5],
    /// Residual blocks on the 1/32 bottleneck.
    pub neck_blocks: usize,
    /// Gate band: g = 1 iff `eps < α < 1 − eps`. Zero is the literal rule.
    pub prm_eps: f64,
    /// Force α to 1 on trimap FG and 0 on trimap BG at inference.
    pub clamp_to_trimap: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { widths: [256, 128, 64, 32, 16], blocks: [2, 3, 3, 2, 2], neck_blocks: 1, prm_eps: 0.0, clamp_to_trimap: true }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.prm_eps) {
            return Err(Error::Config(format!("prm_eps must lie in [0, 0.5), got {}", self.prm_eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation drawn uniformly from ±`rotation_deg`.
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    /// Foreground color jitter strength (per-channel gain and offset).
    pub jitter: f64,
    /// Foreground crops center on a random unknown pixel and background crops
    /// sit at a random offset; `false` takes center crops of both.
    pub random_crop: bool,
    pub trimap_lo: f32,
    pub trimap_hi: f32,
    pub radius_min: usize,
    pub radius_max: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 30.0,
            scale_min: 0.8,
            scale_max: 1.25,
            flip_prob: 0.5,
            jitter: 0.1,
            random_crop: true,
            trimap_lo: 0.0,
            trimap_hi: 1.0,
            radius_min: 5,
            radius_max: 15,
        }
    }
}

impl AugmentConfig {
    /// No geometric or color change, center crop.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            flip_prob: 0.0,
            jitter: 0.0,
            random_crop: false,
            ..AugmentConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub steps: usize,
    pub seed: u64,
    /// Number of synthetic base images drawn from.
    pub pool_size: usize,
    /// Side of generated synthetic images before augmentation.
    pub synth_size: usize,
    pub w_l1: f64,
    pub w_comp: f64,
    pub w_lap: f64,
    /// Weight of each intermediate fused alpha in the total loss.
    pub aux_weight: f64,
    pub lap_levels: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 2,
            crop: 64,
            steps: 1000,
            seed: 0,
            pool_size: 16,
            synth_size: 96,
            w_l1: 1.0,
            w_comp: 1.0,
            w_lap: 1.0,
            aux_weight: 0.5,
            lap_levels: 5,
            log_every: 10,
            checkpoint_every: 500,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % 32 != 0 {
            return Err(Error::Config(format!("crop must be a positive multiple of 32, got {}", self.crop)));
        }
        if self.batch_size == 0 || self.pool_size == 0 || self.lap_levels == 0 {
            return Err(Error::Config("batch_size, pool_size and lap_levels must be positive".into()));
        }
        if [self.w_l1, self.w_comp, self.w_lap, self.aux_weight, self.lr].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights and lr must be non-negative".into()));
        }
        let a = &self.augment;
        if a.radius_min > a.radius_max || a.scale_min <= 0.0 || a.scale_min > a.scale_max {
            return Err(Error::Config("augment ranges are inverted".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub grad_sigma: f64,
    pub conn_step: f64,
    /// Synthetic evaluation pool size and seed offset.
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { grad_sigma: 1.4, conn_step: 0.1, samples: 8, seed: 10_000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// Full-size model: Tiny encoder and the default decoder.
    pub fn tiny() -> Self {
        Config::default()
    }

    /// Test-scale model: embed 8, depths 1,1,2,1, window 4, 64 px crops.
    pub fn toy() -> Self {
        Config {
            encoder: EncoderConfig { embed_dim: 8, depths: [1, 1, 2, 1], heads: [1, 2, 2, 4], window: 4, ..EncoderConfig::default() },
            decoder: DecoderConfig { widths: [16; 5], blocks: [1; 5], neck_blocks: 0, ..DecoderConfig::default() },
            train: TrainConfig {
                lr: 2e-3,
                crop: 64,
                synth_size: 80,
                augment: AugmentConfig { radius_min: 1, radius_max: 4, ..AugmentConfig::default() },
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Config::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [Config::tiny(), Config::toy()] {
            cfg.validate().unwrap();
            assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = Config::from_toml("[encoder]\nprior_mode = \"NONE\"\nembed_dim = 48\nheads = [3, 6, 12, 24]\n").unwrap();
        assert_eq!(cfg.encoder.prior_mode, PriorMode::None);
        assert_eq!(cfg.encoder.embed_dim, 48);
        assert_eq!(cfg.decoder, DecoderConfig::default());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Config::from_toml("[encoder]\nbogus = 1\n").is_err());
        assert!(Config::from_toml("[encoder]\nheads = [5, 6, 12, 24]\n").is_err());
        assert!(Config::from_toml("[encoder]\ninput_channels = 3\n").is_err());
        assert!(Config::from_toml("[train]\ncrop = 48\n").is_err());
        assert!(Config::from_toml("[encoder]\nprior_mode = \"SOMETIMES\"\n").is_err());
    }
}
