//! Run configuration: model geometry, training phases, inference, data.
//!
//! A config fully determines a run given a seed. Presets: `toy` is the
//! default end-to-end scale, `smoke` is the fast CI scale, `micro` is the
//! unit-test scale.

use crate::error::{Result, SeasError};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixStrategy {
    /// Abnormal and normal samples share every optimizer step.
    Mixed,
    /// First half of the steps abnormal-only, second half normal-only.
    AbnormalThenNormal,
    /// First half normal-only, second half abnormal-only.
    NormalThenAbnormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MrmVariant {
    /// Parallel 1x1 projection only.
    A,
    /// One conv block plus the parallel projection.
    B,
    /// Two chained conv blocks plus the parallel projection.
    C,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaeFeatureSource {
    Decoder,
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub latent_channels: usize,
    /// Latent spatial side; always image_size / 4.
    pub latent_size: usize,
    /// VAE stage widths from image resolution inward.
    pub vae_widths: Vec<usize>,
    /// U-Net widths per level, finest first. Level i runs at latent_size >> i.
    pub unet_widths: Vec<usize>,
    pub attn_heads: usize,
    pub attn_dim: usize,
    /// Token embedding width (conditioning channel count).
    pub cond_dim: usize,
    /// Padded prompt length.
    pub z_len: usize,
    pub norm_groups: usize,
    pub schedule_steps: usize,
    pub time_dim: usize,
    pub temb_dim: usize,
}

impl ModelConfig {
    pub fn n_levels(&self) -> usize {
        self.unet_widths.len()
    }

    /// Spatial side of attention layer l (1-based).
    pub fn attn_resolution(&self, layer: usize) -> usize {
        self.latent_size >> (layer - 1)
    }

    /// Spatial side of decoder tap k (1-based); tap 1 is the coarsest.
    pub fn decoder_tap_resolution(&self, tap: usize) -> usize {
        self.latent_size >> (self.n_levels() - tap)
    }

    pub fn decoder_tap_channels(&self, tap: usize) -> usize {
        // tap k leaves the up-block that runs at level (n_levels - k)
        self.unet_widths[self.n_levels() - tap]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 8 != 0 {
            return Err(SeasError::Config(format!("image_size {} must be divisible by 8", self.image_size)));
        }
        if self.latent_size * 4 != self.image_size {
            return Err(SeasError::Config(format!(
                "latent_size {} must be image_size/4 = {}",
                self.latent_size,
                self.image_size / 4
            )));
        }
        let levels = self.n_levels();
        if levels < 2 {
            return Err(SeasError::Config("u-net needs at least 2 levels".into()));
        }
        if self.latent_size >> (levels - 1) < 1 {
            return Err(SeasError::Config(format!(
                "latent {} too small for {} levels",
                self.latent_size, levels
            )));
        }
        if self.attn_dim % self.attn_heads != 0 {
            return Err(SeasError::Config(format!(
                "attn_dim {} not divisible by heads {}",
                self.attn_dim, self.attn_heads
            )));
        }
        if self.vae_widths.len() != 3 {
            return Err(SeasError::Config("vae needs exactly 3 stage widths".into()));
        }
        for &w in self.unet_widths.iter().chain(self.vae_widths.iter()) {
            if w % self.norm_groups != 0 {
                return Err(SeasError::Config(format!(
                    "width {} not divisible by norm groups {}",
                    w, self.norm_groups
                )));
            }
        }
        if self.schedule_steps < 2 {
            return Err(SeasError::Config("schedule too short".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Anomaly type names, one per defect family to stamp.
    pub anomaly_types: Vec<String>,
    /// Normal images in the corpus.
    pub normal_count: usize,
    /// Abnormal image/mask pairs per anomaly type.
    pub abnormal_per_type: usize,
    /// Held-out normal images (reconstruction checks, KID reference).
    pub holdout_normal: usize,
}

impl DataConfig {
    pub fn n_types(&self) -> usize {
        self.anomaly_types.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Weight of the latent magnitude penalty.
    pub latent_reg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenTrainConfig {
    pub steps_per_anomaly_type: usize,
    /// Overrides steps_per_anomaly_type * n_types when set.
    pub total_steps: Option<usize>,
    pub batch_abnormal: usize,
    pub batch_normal: usize,
    pub lr_unet: f64,
    pub lr_embeddings: f64,
    pub weight_decay: f64,
    /// Attention layers (1-based) the alignment terms act on.
    pub alignment_layers: Vec<usize>,
    /// Anomaly tokens per type.
    pub n_anomaly_tokens: usize,
    /// Normal (object) tokens.
    pub n_normal_tokens: usize,
    pub mix: MixStrategy,
    /// Normal-image diffusion term on/off.
    pub enable_na: bool,
    /// Second alignment term (object attention suppressed inside the mask).
    pub enable_st: bool,
    /// Replace the suppression term with object-attention alignment to the
    /// mask complement.
    pub at_variant: bool,
    /// Freeze the inserted tokens at their random initialization.
    pub frozen_tokens: bool,
    pub weight_da1: f64,
    pub weight_da2: f64,
    pub weight_df: f64,
    pub weight_ob: f64,
    pub weight_at: f64,
}

impl GenTrainConfig {
    pub fn total_steps(&self, n_types: usize) -> usize {
        self.total_steps.unwrap_or(self.steps_per_anomaly_type * n_types)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmpTrainConfig {
    pub steps_per_anomaly_type: usize,
    pub total_steps: Option<usize>,
    pub batch_abnormal: usize,
    pub batch_normal: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Decoder taps (1-based, coarsest first) fused into the coarse feature.
    pub coarse_features: Vec<usize>,
    /// Channel budget for the finest selected tap; coarser taps double it.
    pub coarse_base_channels: usize,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    /// Output channels of the three refinement stages.
    pub mrm_widths: Vec<usize>,
    pub mrm_variant: MrmVariant,
    pub vae_feature_source: VaeFeatureSource,
    /// Schedule steps the teacher features are taken at.
    pub noise_levels: Vec<usize>,
    pub focal_gamma: f64,
    /// Class weight on the anomalous channel; None disables weighting.
    pub focal_alpha: Option<f64>,
    /// Train on normal images with all-zero masks as well.
    pub use_normal_images: bool,
}

impl RmpTrainConfig {
    pub fn total_steps(&self, n_types: usize) -> usize {
        self.total_steps.unwrap_or(self.steps_per_anomaly_type * n_types)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub sampler_steps: usize,
    /// Fraction of the schedule to noise the normal init to, in (0, 1].
    pub noise_strength: f64,
    /// Refined mask = mean over this many final steps.
    pub mask_average_steps: usize,
    /// Binarization threshold on the averaged anomaly score.
    pub tau: f64,
    /// Images generated per requested mode and type.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub vae_train: VaeTrainConfig,
    pub gen_train: GenTrainConfig,
    pub rmp_train: RmpTrainConfig,
    pub infer: InferConfig,
}

impl RunConfig {
    /// Full-size toy preset: the default end-to-end configuration.
    pub fn toy() -> Self {
        RunConfig {
            seed: 17,
            model: ModelConfig {
                image_size: 64,
                image_channels: 3,
                latent_channels: 4,
                latent_size: 16,
                vae_widths: vec![24, 48, 64],
                unet_widths: vec![64, 128, 128, 128],
                attn_heads: 2,
                attn_dim: 64,
                cond_dim: 64,
                z_len: 16,
                norm_groups: 8,
                schedule_steps: 1000,
                time_dim: 64,
                temb_dim: 128,
            },
            data: DataConfig {
                anomaly_types: vec!["scratch".into(), "blob".into()],
                normal_count: 16,
                abnormal_per_type: 4,
                holdout_normal: 8,
            },
            vae_train: VaeTrainConfig {
                steps: 600,
                lr: 1e-3,
                batch: 4,
                latent_reg: 1e-4,
            },
            gen_train: GenTrainConfig {
                steps_per_anomaly_type: 800,
                total_steps: None,
                batch_abnormal: 2,
                batch_normal: 2,
                lr_unet: 1e-4,
                lr_embeddings: 1e-3,
                weight_decay: 1e-2,
                alignment_layers: vec![2, 3],
                n_anomaly_tokens: 4,
                n_normal_tokens: 1,
                mix: MixStrategy::Mixed,
                enable_na: true,
                enable_st: true,
                at_variant: false,
                frozen_tokens: false,
                weight_da1: 1.0,
                weight_da2: 1.0,
                weight_df: 1.0,
                weight_ob: 1.0,
                weight_at: 1.0,
            },
            rmp_train: RmpTrainConfig {
                steps_per_anomaly_type: 800,
                total_steps: None,
                batch_abnormal: 2,
                batch_normal: 2,
                lr: 1e-3,
                weight_decay: 1e-2,
                coarse_features: vec![2, 3],
                coarse_base_channels: 16,
                fusion_layers: 4,
                fusion_heads: 2,
                mrm_widths: vec![48, 32, 24],
                mrm_variant: MrmVariant::C,
                vae_feature_source: VaeFeatureSource::Decoder,
                noise_levels: vec![120, 80, 40],
                focal_gamma: 2.0,
                focal_alpha: Some(0.75),
                use_normal_images: true,
            },
            infer: InferConfig {
                sampler_steps: 25,
                noise_strength: 1.0,
                mask_average_steps: 3,
                tau: 0.2,
                count: 100,
            },
        }
    }

    /// Fast CI preset: 200 training steps per phase on a narrower model and
    /// a smaller corpus.
    pub fn smoke() -> Self {
        let mut c = RunConfig::toy();
        c.model.vae_widths = vec![16, 24, 32];
        c.model.unet_widths = vec![32, 64, 64, 64];
        c.model.attn_dim = 32;
        c.model.cond_dim = 32;
        c.data.normal_count = 8;
        c.data.abnormal_per_type = 2;
        c.data.holdout_normal = 4;
        c.vae_train.steps = 150;
        c.gen_train.total_steps = Some(200);
        c.rmp_train.total_steps = Some(200);
        c.rmp_train.coarse_base_channels = 8;
        c.rmp_train.mrm_widths = vec![24, 16, 8];
        c.infer.count = 8;
        c
    }

    /// Unit-test preset: 16x16 images, 4x4 latents, two U-Net levels.
    pub fn micro() -> Self {
        let mut c = RunConfig::toy();
        c.model.image_size = 16;
        c.model.latent_size = 4;
        c.model.vae_widths = vec![8, 8, 16];
        c.model.unet_widths = vec![8, 16];
        c.model.attn_dim = 8;
        c.model.cond_dim = 8;
        c.model.norm_groups = 4;
        c.model.time_dim = 8;
        c.model.temb_dim = 16;
        c.data.normal_count = 4;
        c.data.abnormal_per_type = 2;
        c.data.holdout_normal = 2;
        c.vae_train.steps = 10;
        c.gen_train.total_steps = Some(10);
        c.gen_train.alignment_layers = vec![1, 2];
        c.rmp_train.total_steps = Some(10);
        c.rmp_train.coarse_features = vec![1, 2];
        c.rmp_train.coarse_base_channels = 4;
        c.rmp_train.fusion_layers = 1;
        c.rmp_train.fusion_heads = 2;
        c.rmp_train.mrm_widths = vec![8, 8, 8];
        c.rmp_train.noise_levels = vec![120, 80, 40];
        c.infer.count = 2;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let levels = self.model.n_levels();
        if self.data.anomaly_types.is_empty() {
            return Err(SeasError::Config("need at least one anomaly type".into()));
        }
        if self.data.normal_count == 0 || self.data.abnormal_per_type == 0 {
            return Err(SeasError::Config("corpus counts must be positive".into()));
        }
        if self.gen_train.alignment_layers.is_empty() {
            return Err(SeasError::Config("need at least one alignment layer".into()));
        }
        for &l in &self.gen_train.alignment_layers {
            if l < 1 || l > levels {
                return Err(SeasError::Config(format!("alignment layer {} out of 1..={}", l, levels)));
            }
        }
        if self.gen_train.n_anomaly_tokens == 0 || self.gen_train.n_normal_tokens == 0 {
            return Err(SeasError::Config("token counts must be positive".into()));
        }
        if self.gen_train.at_variant && self.gen_train.enable_st {
            return Err(SeasError::Config(
                "at_variant replaces the suppression term; disable enable_st".into(),
            ));
        }
        // prompt must fit the padded length
        let n = self.gen_train.n_anomaly_tokens;
        let np = self.gen_train.n_normal_tokens;
        let with_commas = 1 + np + 1 + 2 * n - 1;
        let without = 1 + np + 1 + n;
        if with_commas.min(without) > self.model.z_len {
            return Err(SeasError::Config(format!(
                "prompt with {} object and {} anomaly tokens does not fit z_len {}",
                np, n, self.model.z_len
            )));
        }
        if self.rmp_train.coarse_features.is_empty() {
            return Err(SeasError::Config("need at least one coarse feature tap".into()));
        }
        for &f in &self.rmp_train.coarse_features {
            if f < 1 || f > levels {
                return Err(SeasError::Config(format!("decoder tap {} out of 1..={}", f, levels)));
            }
        }
        if self.rmp_train.mrm_widths.len() != 3 {
            return Err(SeasError::Config("exactly three refinement stages required".into()));
        }
        if self.rmp_train.noise_levels.is_empty() {
            return Err(SeasError::Config("rmp needs at least one noise level".into()));
        }
        for &t in &self.rmp_train.noise_levels {
            if t == 0 || t >= self.model.schedule_steps {
                return Err(SeasError::Config(format!("rmp noise level {} out of schedule", t)));
            }
        }
        if self.infer.sampler_steps < self.infer.mask_average_steps {
            return Err(SeasError::Config(format!(
                "sampler_steps {} < mask_average_steps {}",
                self.infer.sampler_steps, self.infer.mask_average_steps
            )));
        }
        if !(self.infer.noise_strength > 0.0 && self.infer.noise_strength <= 1.0) {
            return Err(SeasError::Config(format!(
                "noise_strength {} outside (0, 1]",
                self.infer.noise_strength
            )));
        }
        if !(0.0..=1.0).contains(&self.infer.tau) {
            return Err(SeasError::Config(format!("tau {} outside [0, 1]", self.infer.tau)));
        }
        if self.infer.count == 0 {
            return Err(SeasError::Config("generation count must be positive".into()));
        }
        if let Some(a) = self.rmp_train.focal_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(SeasError::Config(format!("focal_alpha {} outside [0, 1]", a)));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(s).map_err(|e| SeasError::Parse {
            line: e.span().map(|sp| s[..sp.start].lines().count()).unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    /// Stable hash of the canonical TOML form.
    pub fn hash(&self) -> String {
        crate::util::sha256_hex(self.to_toml().as_bytes())
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(RunConfig::toy()),
            "smoke" => Ok(RunConfig::smoke()),
            "micro" => Ok(RunConfig::micro()),
            other => Err(SeasError::Config(format!(
                "unknown preset {}; expected toy, smoke, or micro",
                other
            ))),
        }
    }
}

fn merge_toml(dst: &mut toml::Value, src: toml::Value) {
    match (dst, src) {
        (toml::Value::Table(d), toml::Value::Table(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge_toml(slot, v),
                    _ => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// Parse a declarative run config: an optional `preset` key picks the base
/// (default toy), every other key overrides that base field-by-field.
pub fn load_config_text(text: &str) -> Result<RunConfig> {
    let parsed: toml::Value = text.parse().map_err(|e: toml::de::Error| SeasError::Parse {
        line: e.span().map(|sp| text[..sp.start].lines().count()).unwrap_or(0),
        msg: e.message().to_string(),
    })?;
    let mut table = match parsed {
        toml::Value::Table(t) => t,
        _ => return Err(SeasError::Parse { line: 0, msg: "config root must be a table".into() }),
    };
    let base = match table.remove("preset") {
        None => RunConfig::toy(),
        Some(toml::Value::String(name)) => RunConfig::preset(&name)?,
        Some(other) => {
            return Err(SeasError::Parse {
                line: 0,
                msg: format!("preset must be a string, got {}", other.type_str()),
            })
        }
    };
    let mut merged = toml::Value::try_from(&base)
        .map_err(|e| SeasError::Validation(format!("preset serialize: {}", e)))?;
    merge_toml(&mut merged, toml::Value::Table(table));
    let cfg: RunConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| SeasError::Parse { line: 0, msg: e.message().to_string() })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_file(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SeasError::MissingArtifact(format!("{}: {}", path.display(), e)))?;
    load_config_text(&text)
}
