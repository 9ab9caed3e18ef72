//! Flat JSON run configuration: one namespace covering model, training,
//! data, and run plumbing. Unknown keys are rejected and a written config
//! parses back to the identical struct.

use std::path::Path;

use serde::{Deserialize, Serialize};

use lens_core::backbone::{AdapterInit, Method, ModelConfig};
use lens_core::train::{OptimizerKind, ScheduleShape, TrainConfig};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

fn d_schema() -> u32 { SCHEMA_VERSION }
fn d_method() -> String { "lora".into() }
fn d_image_size() -> usize { 16 }
fn d_patch_size() -> usize { 4 }
fn d_channels() -> usize { 1 }
fn d_embed_dim() -> usize { 64 }
fn d_depth() -> usize { 2 }
fn d_num_heads() -> usize { 4 }
fn d_mlp_ratio() -> usize { 4 }
fn d_num_classes() -> usize { 5 }
fn d_members() -> usize { 8 }
fn d_rank() -> usize { 4 }
fn d_adapter_init() -> String { "xavier_uniform".into() }
fn d_adapter_gain() -> f64 { 10.0 }
fn d_adapter_std() -> f64 { 0.02 }
fn d_dropout_rate() -> f64 { 0.2 }
fn d_mc_samples() -> usize { 16 }
fn d_epistemic_dim() -> usize { 10 }
fn d_prior_scale() -> f64 { 1.0 }
fn d_epochs() -> usize { 30 }
fn d_batch_size() -> usize { 32 }
fn d_base_lr() -> f64 { 1e-4 }
fn d_warmup_steps() -> usize { 100 }
fn d_optimizer() -> String { "adamw".into() }
fn d_beta1() -> f64 { 0.9 }
fn d_beta2() -> f64 { 0.999 }
fn d_eps() -> f64 { 1e-8 }
fn d_weight_decay() -> f64 { 0.01 }
fn d_momentum() -> f64 { 0.9 }
fn d_schedule() -> String { "cosine".into() }
fn d_decay_factor() -> f64 { 0.94 }
fn d_decay_every_epochs() -> usize { 4 }
fn d_clip_max_norm() -> Option<f64> { Some(1.0) }
fn d_burn_in() -> usize { 15 }
fn d_shuffle() -> bool { true }
fn d_out_dir() -> String { "out".into() }
fn d_temperature() -> f64 { 1.0 }

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_schema")]
    pub schema_version: u32,

    #[serde(default = "d_method")]
    pub method: String,
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_patch_size")]
    pub patch_size: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_num_heads")]
    pub num_heads: usize,
    #[serde(default = "d_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "d_num_classes")]
    pub num_classes: usize,
    #[serde(default = "d_members")]
    pub members: usize,
    #[serde(default = "d_rank")]
    pub rank: usize,
    #[serde(default = "d_adapter_init")]
    pub adapter_init: String,
    #[serde(default = "d_adapter_gain")]
    pub adapter_gain: f64,
    #[serde(default = "d_adapter_std")]
    pub adapter_std: f64,
    #[serde(default = "d_dropout_rate")]
    pub dropout_rate: f64,
    #[serde(default = "d_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "d_epistemic_dim")]
    pub epistemic_dim: usize,
    #[serde(default = "d_prior_scale")]
    pub prior_scale: f64,
    #[serde(default)]
    pub backbone_trainable: Option<bool>,

    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_warmup_steps")]
    pub warmup_steps: usize,
    #[serde(default = "d_optimizer")]
    pub optimizer: String,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_schedule")]
    pub schedule: String,
    #[serde(default = "d_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "d_decay_every_epochs")]
    pub decay_every_epochs: usize,
    #[serde(default = "d_clip_max_norm")]
    pub clip_max_norm: Option<f64>,
    #[serde(default)]
    pub class_beta: Option<f64>,
    #[serde(default = "d_burn_in")]
    pub burn_in: usize,
    #[serde(default = "d_shuffle")]
    pub shuffle: bool,

    /// Path to the training split in LDS1 format.
    #[serde(default)]
    pub train_data: String,

    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_out_dir")]
    pub out_dir: String,
    /// Worker threads for member-parallel sections; 0 keeps the default.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults populate every field")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(CliError::usage(format!(
                "config schema_version {} unsupported, expected {SCHEMA_VERSION}",
                config.schema_version
            )));
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn parse_method(&self) -> Result<Method, CliError> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == self.method)
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                CliError::usage(format!(
                    "unknown method '{}', expected one of {}",
                    self.method,
                    known.join(", ")
                ))
            })
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let method = self.parse_method()?;
        let adapter_init = match self.adapter_init.as_str() {
            "xavier_uniform" => AdapterInit::XavierUniform { gain: self.adapter_gain },
            "gaussian" => AdapterInit::Gaussian { std: self.adapter_std },
            other => {
                return Err(CliError::usage(format!(
                    "unknown adapter_init '{other}', expected xavier_uniform or gaussian"
                )))
            }
        };
        let config = ModelConfig {
            method,
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            embed_dim: self.embed_dim,
            depth: self.depth,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
            num_classes: self.num_classes,
            members: self.members,
            rank: self.rank,
            adapter_init,
            dropout_rate: self.dropout_rate,
            mc_samples: self.mc_samples,
            epistemic_dim: self.epistemic_dim,
            prior_scale: self.prior_scale,
            backbone_trainable: self.backbone_trainable,
        };
        config.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let optimizer = match self.optimizer.as_str() {
            "adamw" => OptimizerKind::AdamW {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            "sgd" => OptimizerKind::Sgd { momentum: self.momentum },
            other => {
                return Err(CliError::usage(format!(
                    "unknown optimizer '{other}', expected adamw or sgd"
                )))
            }
        };
        let schedule = match self.schedule.as_str() {
            "cosine" => ScheduleShape::WarmupCosine,
            "exponential" => ScheduleShape::WarmupExponential {
                factor: self.decay_factor,
                every_epochs: self.decay_every_epochs,
            },
            other => {
                return Err(CliError::usage(format!(
                    "unknown schedule '{other}', expected cosine or exponential"
                )))
            }
        };
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            optimizer,
            schedule,
            clip_max_norm: self.clip_max_norm,
            class_beta: self.class_beta,
            burn_in: self.burn_in,
            shuffle: self.shuffle,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let config: RunConfig = serde_json::from_str(r#"{"epochs": 0}"#).unwrap();
        assert_eq!(config.epochs, 0);
        assert_eq!(config.method, "lora");
        assert_eq!(config.members, 8);
        assert_eq!(config.schema_version, SCHEMA_VERSION);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"epochz": 3}"#);
        assert!(err.is_err());
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut config = RunConfig::default();
        config.method = "epinet".into();
        config.seed = 42;
        config.class_beta = Some(0.999);
        let back: RunConfig = serde_json::from_str(&config.to_json()).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn conversions_reject_unknown_names() {
        let mut config = RunConfig::default();
        config.method = "bagging".into();
        assert!(config.parse_method().is_err());
        config.method = "lora".into();
        config.optimizer = "lbfgs".into();
        assert!(config.train_config().is_err());
        config.optimizer = "adamw".into();
        config.adapter_init = "orthogonal".into();
        assert!(config.model_config().is_err());
    }

    #[test]
    fn model_config_carries_adapter_choice() {
        let mut config = RunConfig::default();
        config.adapter_init = "gaussian".into();
        config.adapter_std = 0.05;
        let mc = config.model_config().unwrap();
        assert_eq!(mc.adapter_init, AdapterInit::Gaussian { std: 0.05 });
    }
}
