//! Flat key/value training configuration.
//!
//! Every key has a default, so a config file only lists what it changes.
//! Files are TOML; `key=value` overrides use TOML value syntax, with bare
//! words accepted as strings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::DiscriminatorArch;
use crate::bridge::{BridgeLossConfig, BridgeMode, BridgeVariant, EdgeNetArch};
use crate::contrastive::ContrastiveConfig;
use crate::data::{AugmentConfig, SyntheticSpec};
use crate::edges::{CANNY_HIGH, CANNY_LOW};
use crate::encoder::{BackboneArch, EncoderConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// When non-zero, stop after this many steps instead of `epochs`.
    pub max_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub ema_m: f64,
    pub temperature: f64,
    pub exclude_own_cached: bool,
    pub cap_max: usize,

    pub alpha_cont: f64,
    pub alpha_bridge: f64,
    pub alpha_adv: f64,

    pub use_bridge: BridgeMode,
    pub bridge_variant: BridgeVariant,
    pub use_adversary: bool,
    pub multi_queue: bool,

    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub canny_low: f32,
    pub canny_high: f32,
    /// Frozen edge network for `hed_fixed` and the `l2_hed` variant.
    pub hed_weights: String,
    /// Mapper initialization for `learned`.
    pub mapper_init: String,
    /// Canny distillation steps used when a needed edge network file is absent.
    pub edge_distill_steps: usize,
    pub edge_distill_lr: f64,
    pub mapper_widths: Vec<usize>,
    pub mapper_convs: Vec<usize>,

    pub backbone: String,
    pub backbone_widths: Vec<usize>,
    pub stem_stride: usize,
    pub norm_groups: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub adv_hidden: Vec<usize>,
    pub adv_slope: f64,
    /// Discriminator learning rate as a multiple of the schedule's.
    pub adv_lr_scale: f64,

    pub image_size: usize,
    /// Dataset root; empty means the built-in synthetic corpus.
    pub data_root: String,
    pub synth_domains: usize,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_seed: u64,
    /// Domains used for training; empty means all.
    pub train_domains: Vec<String>,

    pub aug_crop_min: f64,
    pub aug_crop_max: f64,
    pub aug_flip_p: f64,
    pub aug_jitter_p: f64,
    pub aug_grayscale_p: f64,
    pub aug_blur_p: f64,

    pub checkpoint_every: usize,
    pub workers: usize,
    pub prefetch: usize,

    /// Full-scale switches; unsupported in this build and must stay off.
    pub imagenet_pretrain: bool,
    pub transductive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        Self {
            seed: 0,
            epochs: 10,
            max_steps: 0,
            batch_size: 32,
            base_lr: 0.03,
            final_lr: 0.002,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            ema_m: 0.999,
            temperature: 0.2,
            exclude_own_cached: true,
            cap_max: 4096,
            alpha_cont: 1.0,
            alpha_bridge: 1.0,
            alpha_adv: 1.0,
            use_bridge: BridgeMode::Learned,
            bridge_variant: BridgeVariant::L1CannyBlurStretch,
            use_adversary: true,
            multi_queue: true,
            blur_kernel: 5,
            blur_sigma: 0.15,
            canny_low: CANNY_LOW,
            canny_high: CANNY_HIGH,
            hed_weights: String::new(),
            mapper_init: String::new(),
            edge_distill_steps: 150,
            edge_distill_lr: 0.05,
            mapper_widths: EdgeNetArch::desk().widths,
            mapper_convs: EdgeNetArch::desk().convs_per_stage,
            backbone: "resnet".into(),
            backbone_widths: vec![16, 32, 64, 128],
            stem_stride: 2,
            norm_groups: 8,
            proj_hidden: 128,
            proj_dim: 128,
            adv_hidden: vec![1024, 512, 256],
            adv_slope: 0.2,
            adv_lr_scale: 0.1,
            image_size: 64,
            data_root: String::new(),
            synth_domains: 4,
            synth_classes: 7,
            synth_per_class: 50,
            synth_seed: 0,
            train_domains: Vec::new(),
            aug_crop_min: aug.crop_scale.0,
            aug_crop_max: aug.crop_scale.1,
            aug_flip_p: aug.flip_p,
            aug_jitter_p: aug.jitter_p,
            aug_grayscale_p: aug.grayscale_p,
            aug_blur_p: aug.blur_p,
            checkpoint_every: 0,
            workers: 1,
            prefetch: 2,
            imagenet_pretrain: false,
            transductive: false,
        }
    }
}

/// Parses one `--set` value: TOML syntax first, bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides on top of this config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let k = k.trim();
            let mut v = parse_value(v.trim());
            // Integers given for float keys are fine; TOML alone would reject them.
            if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (table.get(k), &v) {
                v = toml::Value::Float(*i as f64);
            }
            table.insert(k.to_string(), v);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.ema_m) {
            return bad(format!("ema_m must lie in [0, 1], got {}", self.ema_m));
        }
        for (name, a) in [("alpha_cont", self.alpha_cont), ("alpha_bridge", self.alpha_bridge), ("alpha_adv", self.alpha_adv)] {
            if !a.is_finite() || a < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {a}"));
            }
        }
        if !self.adv_lr_scale.is_finite() || self.adv_lr_scale < 0.0 {
            return bad(format!("adv_lr_scale must be finite and non-negative, got {}", self.adv_lr_scale));
        }
        if self.cap_max == 0 {
            return bad("cap_max must be positive".into());
        }
        if self.mapper_widths.len() != self.mapper_convs.len() || self.mapper_widths.is_empty() {
            return bad("mapper_widths and mapper_convs must be non-empty and equally long".into());
        }
        if self.backbone_widths.is_empty() {
            return bad("backbone_widths must be non-empty".into());
        }
        if !matches!(self.backbone.as_str(), "resnet" | "conv") {
            return bad(format!("backbone must be resnet or conv, got `{}`", self.backbone));
        }
        if self.imagenet_pretrain || self.transductive {
            return bad("imagenet_pretrain and transductive are full-scale switches not supported here".into());
        }
        if self.canny_low < 0.0 || self.canny_low >= self.canny_high {
            return bad("canny thresholds need 0 <= low < high".into());
        }
        if self.blur_kernel % 2 == 0 {
            return Err(Error::EvenKernel(self.blur_kernel));
        }
        Ok(())
    }

    /// The L_Ω weight actually applied: zero when nothing is learned.
    pub fn effective_alpha_bridge(&self) -> f64 {
        if self.use_bridge.is_learned() {
            self.alpha_bridge
        } else {
            0.0
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            crop_scale: (self.aug_crop_min, self.aug_crop_max),
            flip_p: self.aug_flip_p,
            jitter_p: self.aug_jitter_p,
            grayscale_p: self.aug_grayscale_p,
            blur_p: self.aug_blur_p,
            ..AugmentConfig::default()
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            exclude_own_cached: self.exclude_own_cached,
        }
    }

    pub fn bridge_loss(&self) -> BridgeLossConfig {
        BridgeLossConfig {
            variant: self.bridge_variant,
            blur_kernel: self.blur_kernel,
            blur_sigma: self.blur_sigma,
            canny_low: self.canny_low,
            canny_high: self.canny_high,
        }
    }

    pub fn mapper_arch(&self) -> EdgeNetArch {
        EdgeNetArch {
            widths: self.mapper_widths.clone(),
            convs_per_stage: self.mapper_convs.clone(),
        }
    }

    pub fn backbone_arch(&self) -> BackboneArch {
        match self.backbone.as_str() {
            "conv" => BackboneArch::Conv {
                widths: self.backbone_widths.clone(),
                groups: self.norm_groups,
            },
            _ => BackboneArch::Resnet {
                widths: self.backbone_widths.clone(),
                stem_stride: self.stem_stride,
                groups: self.norm_groups,
            },
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        let backbone = self.backbone_arch();
        EncoderConfig {
            proj_hidden: if self.proj_hidden == 0 { backbone.feature_dim() } else { self.proj_hidden },
            proj_dim: self.proj_dim,
            proj_bias: true,
            backbone,
        }
    }

    pub fn discriminator(&self, n_domains: usize) -> DiscriminatorArch {
        DiscriminatorArch {
            input: self.backbone_arch().feature_dim(),
            hidden: self.adv_hidden.clone(),
            n_domains,
            slope: self.adv_slope,
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_domains: self.synth_domains,
            n_classes: self.synth_classes,
            per_class: self.synth_per_class,
            image_size: self.image_size,
            seed: self.synth_seed,
        }
    }
}

/// Cosine decay from `lr0` at step 0 to `lr1` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr1: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr1 + 0.5 * (lr0 - lr1) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.03, 0.002), 0.03);
        assert!((cosine_lr(100, 100, 0.03, 0.002) - 0.002).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.03, 0.002) - 0.016).abs() < 1e-15);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml()).unwrap(), c);
        assert_eq!(TrainConfig::from_toml_str("").unwrap(), c);
    }

    #[test]
    fn overrides_parse_types() {
        let c = TrainConfig::default()
            .with_overrides(&[
                "use_bridge=canny_fixed".into(),
                "multi_queue=false".into(),
                "base_lr=1".into(),
                "train_domains=[\"photo\",\"clipart\"]".into(),
            ])
            .unwrap();
        assert_eq!(c.use_bridge, BridgeMode::CannyFixed);
        assert!(!c.multi_queue);
        assert_eq!(c.base_lr, 1.0);
        assert_eq!(c.train_domains, vec!["photo", "clipart"]);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(TrainConfig::from_toml_str("no_such_key = 1"), Err(Error::Config(_))));
        assert!(TrainConfig::default().with_overrides(&["bogus=3".into()]).is_err());
    }

    #[test]
    fn bridge_weight_forced_off_without_learned_mapper() {
        let c = TrainConfig {
            use_bridge: BridgeMode::None,
            ..Default::default()
        };
        assert_eq!(c.effective_alpha_bridge(), 0.0);
    }
}
