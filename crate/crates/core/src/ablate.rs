//! Ablation arms: named single-switch variations of a base configuration.
//! Every arm produces a config that validates; the sweep runner retrains only
//! the phases whose config section an arm touches.

use crate::config::{MixStrategy, MrmVariant, RunConfig, VaeFeatureSource};
use crate::error::{Result, SeasError};

pub struct Arm {
    pub name: &'static str,
    pub description: &'static str,
    apply: fn(&mut RunConfig),
}

/// The full sweep, baseline first.
pub fn arms() -> Vec<Arm> {
    vec![
        Arm { name: "baseline", description: "unmodified configuration", apply: |_| {} },
        Arm {
            name: "with_tp",
            description: "frozen generic token embeddings instead of learned ones",
            apply: |c| c.gen_train.frozen_tokens = true,
        },
        Arm {
            name: "no_mixed",
            description: "abnormal-only phase followed by normal-only phase",
            apply: |c| c.gen_train.mix = MixStrategy::AbnormalThenNormal,
        },
        Arm {
            name: "strategy_abnormal_normal",
            description: "two-phase schedule, abnormal first",
            apply: |c| c.gen_train.mix = MixStrategy::AbnormalThenNormal,
        },
        Arm {
            name: "strategy_normal_abnormal",
            description: "two-phase schedule, normal first",
            apply: |c| c.gen_train.mix = MixStrategy::NormalThenAbnormal,
        },
        Arm {
            name: "no_na",
            description: "normal-image diffusion term disabled",
            apply: |c| c.gen_train.enable_na = false,
        },
        Arm {
            name: "no_st",
            description: "object-attention suppression term disabled",
            apply: |c| c.gen_train.enable_st = false,
        },
        Arm {
            name: "at_variant",
            description: "object attention aligned to the mask complement",
            apply: |c| {
                c.gen_train.at_variant = true;
                c.gen_train.enable_st = false;
            },
        },
        Arm { name: "n_anomaly_1", description: "one anomaly token per type", apply: |c| c.gen_train.n_anomaly_tokens = 1 },
        Arm { name: "n_anomaly_4", description: "four anomaly tokens per type", apply: |c| c.gen_train.n_anomaly_tokens = 4 },
        Arm { name: "n_anomaly_8", description: "eight anomaly tokens per type", apply: |c| c.gen_train.n_anomaly_tokens = 8 },
        Arm { name: "n_normal_1", description: "one object token", apply: |c| c.gen_train.n_normal_tokens = 1 },
        Arm { name: "n_normal_4", description: "four object tokens", apply: |c| c.gen_train.n_normal_tokens = 4 },
        Arm {
            name: "align_123",
            description: "alignment on attention layers 1-3",
            apply: |c| c.gen_train.alignment_layers = vec![1, 2, 3],
        },
        Arm {
            name: "align_234",
            description: "alignment on attention layers 2-4",
            apply: |c| c.gen_train.alignment_layers = vec![2, 3, 4],
        },
        Arm {
            name: "align_23",
            description: "alignment on attention layers 2-3",
            apply: |c| c.gen_train.alignment_layers = vec![2, 3],
        },
        Arm {
            name: "features_123",
            description: "coarse features from decoder taps 1-3",
            apply: |c| c.rmp_train.coarse_features = vec![1, 2, 3],
        },
        Arm {
            name: "features_234",
            description: "coarse features from decoder taps 2-4",
            apply: |c| c.rmp_train.coarse_features = vec![2, 3, 4],
        },
        Arm {
            name: "features_23",
            description: "coarse features from decoder taps 2-3",
            apply: |c| c.rmp_train.coarse_features = vec![2, 3],
        },
        Arm {
            name: "vae_encoder",
            description: "gating features from the autoencoder encoder",
            apply: |c| c.rmp_train.vae_feature_source = VaeFeatureSource::Encoder,
        },
        Arm {
            name: "vae_decoder",
            description: "gating features from the autoencoder decoder",
            apply: |c| c.rmp_train.vae_feature_source = VaeFeatureSource::Decoder,
        },
        Arm { name: "mrm_a", description: "refinement stage variant a", apply: |c| c.rmp_train.mrm_variant = MrmVariant::A },
        Arm { name: "mrm_b", description: "refinement stage variant b", apply: |c| c.rmp_train.mrm_variant = MrmVariant::B },
        Arm { name: "mrm_c", description: "refinement stage variant c", apply: |c| c.rmp_train.mrm_variant = MrmVariant::C },
        Arm { name: "tau_10", description: "mask threshold 0.1", apply: |c| c.infer.tau = 0.1 },
        Arm { name: "tau_20", description: "mask threshold 0.2", apply: |c| c.infer.tau = 0.2 },
        Arm { name: "tau_30", description: "mask threshold 0.3", apply: |c| c.infer.tau = 0.3 },
        Arm { name: "tau_40", description: "mask threshold 0.4", apply: |c| c.infer.tau = 0.4 },
        Arm { name: "tau_50", description: "mask threshold 0.5", apply: |c| c.infer.tau = 0.5 },
    ]
}

pub fn arm_names() -> Vec<&'static str> {
    arms().iter().map(|a| a.name).collect()
}

/// Base config with one named arm applied, validated.
pub fn apply_arm(base: &RunConfig, name: &str) -> Result<RunConfig> {
    let arm = arms()
        .into_iter()
        .find(|a| a.name == name)
        .ok_or_else(|| SeasError::Config(format!("unknown ablation arm {}", name)))?;
    let mut cfg = base.clone();
    (arm.apply)(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}
