//! Experiment configuration: one TOML file drives dataset generation,
//! training, attack, patching, and defense runs. Seeds propagate
//! deterministically from `master_seed`; re-running with the same file and
//! seed reproduces every output byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use driftlab::attack::{AlphaSchedule, AttackConfig, TriggerMode, Variant};
use driftlab::data::{DataConfig, ModelArch, TaskKind};
use driftlab::defense::DowncastFormat;
use driftlab::numerics::{BackendProfile, ProfileRegistry};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub profiles: ProfilesSection,
    pub attack: AttackSection,
    #[serde(default)]
    pub defense: DefenseSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub task: String,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub size: Option<usize>,
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub mid: Option<usize>,
    #[serde(default)]
    pub channels: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilesSection {
    #[serde(default)]
    pub custom: Vec<BackendProfile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub h1: String,
    pub h2: Vec<String>,
    #[serde(default = "default_beta")]
    pub beta: f32,
    #[serde(default = "default_gamma")]
    pub gamma: f32,
    pub lr: f32,
    #[serde(default = "default_steps")]
    pub steps_per_iter: usize,
    #[serde(default = "default_k_bits")]
    pub k_bits: usize,
    #[serde(default = "default_m")]
    pub m_perm: usize,
    #[serde(default = "default_m")]
    pub m_flip: usize,
    #[serde(default = "default_rho")]
    pub rho: f32,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    pub runs: usize,
    #[serde(default = "default_targets")]
    pub targets: usize,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default)]
    pub layer_mask: Option<Vec<usize>>,
    #[serde(default = "default_alpha_init")]
    pub alpha_init: f32,
    #[serde(default = "default_tau_high")]
    pub alpha_tau_high: f32,
    #[serde(default)]
    pub alpha_tau_low: f32,
}

fn default_beta() -> f32 {
    0.1
}
fn default_gamma() -> f32 {
    10_000.0
}
fn default_steps() -> usize {
    500
}
fn default_k_bits() -> usize {
    5
}
fn default_m() -> usize {
    128
}
fn default_rho() -> f32 {
    0.95
}
fn default_max_iters() -> usize {
    6
}
fn default_targets() -> usize {
    1
}
fn default_mode() -> String {
    "pairwise".into()
}
fn default_variant() -> String {
    "full".into()
}
fn default_alpha_init() -> f32 {
    1.0
}
fn default_tau_high() -> f32 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    #[serde(default = "default_input_ulps")]
    pub input_ulps: Vec<u32>,
    #[serde(default = "default_input_trials")]
    pub input_trials: usize,
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_downcast")]
    pub downcast: Vec<String>,
    #[serde(default = "default_finetune_steps")]
    pub finetune_steps: Vec<usize>,
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f32,
    #[serde(default = "default_finetune_momentum")]
    pub finetune_momentum: f32,
    #[serde(default = "default_finetune_batch")]
    pub finetune_batch: usize,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            input_ulps: default_input_ulps(),
            input_trials: default_input_trials(),
            batch_sizes: default_batch_sizes(),
            downcast: default_downcast(),
            finetune_steps: default_finetune_steps(),
            finetune_lr: default_finetune_lr(),
            finetune_momentum: default_finetune_momentum(),
            finetune_batch: default_finetune_batch(),
        }
    }
}

fn default_input_ulps() -> Vec<u32> {
    vec![1, 10, 100, 1_000, 10_000, 100_000]
}
fn default_input_trials() -> usize {
    20
}
fn default_batch_sizes() -> Vec<usize> {
    vec![1, 2, 4, 8]
}
fn default_downcast() -> Vec<String> {
    vec!["bf16".into(), "f16".into()]
}
fn default_finetune_steps() -> Vec<usize> {
    vec![0, 1, 2, 3]
}
fn default_finetune_lr() -> f32 {
    1e-4
}
fn default_finetune_momentum() -> f32 {
    0.9
}
fn default_finetune_batch() -> usize {
    64
}

/// A validated configuration with its source hash.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// First 12 hex digits of the SHA-256 of the config file bytes; stamped
    /// on every output row for provenance.
    pub hash: String,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: ExperimentConfig = toml::from_str(
        std::str::from_utf8(&bytes)
            .map_err(|e| CliError::Config(format!("{}: not utf-8: {e}", path.display())))?,
    )
    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let hash = hex_prefix(&hasher.finalize(), 12);
    let loaded = LoadedConfig { config, hash };
    loaded.validate()?;
    Ok(loaded)
}

fn hex_prefix(digest: &[u8], chars: usize) -> String {
    let mut out = String::with_capacity(chars);
    for byte in digest {
        for nibble in [byte >> 4, byte & 0xF] {
            if out.len() == chars {
                return out;
            }
            out.push(char::from_digit(nibble as u32, 16).unwrap());
        }
    }
    out
}

impl LoadedConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        self.registry()?;
        self.data_config()?;
        self.model_arch()?;
        self.attack_config(0)?;
        if c.attack.runs == 0 {
            return Err(CliError::Config("attack.runs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<ProfileRegistry, CliError> {
        let mut registry = ProfileRegistry::with_builtins();
        for profile in &self.config.profiles.custom {
            registry
                .insert(profile.clone())
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(registry)
    }

    pub fn data_config(&self) -> Result<DataConfig, CliError> {
        let d = &self.config.dataset;
        let task = match d.task.as_str() {
            "blobs" => TaskKind::Blobs {
                dim: d
                    .dim
                    .ok_or_else(|| CliError::Config("dataset.dim required for blobs".into()))?,
            },
            "textures" => TaskKind::Textures {
                size: d.size.unwrap_or(8),
            },
            other => {
                return Err(CliError::Config(format!(
                    "unknown dataset.task `{other}` (blobs | textures)"
                )))
            }
        };
        Ok(DataConfig {
            task,
            num_classes: d.num_classes,
            per_class_train: d.per_class_train,
            per_class_test: d.per_class_test,
            seed: d.seed,
        })
    }

    pub fn model_arch(&self) -> Result<ModelArch, CliError> {
        let m = &self.config.model;
        match m.arch.as_str() {
            "mlp" => Ok(ModelArch::Mlp {
                input_dim: self.config.dataset.dim.unwrap_or(16),
                hidden: m.hidden.unwrap_or(64),
                mid: m.mid.unwrap_or(64),
            }),
            "cnn" => Ok(ModelArch::Cnn {
                channels: m.channels.unwrap_or(4),
                hidden: m.hidden.unwrap_or(64),
                mid: m.mid.unwrap_or(64),
            }),
            other => Err(CliError::Config(format!(
                "unknown model.arch `{other}` (mlp | cnn)"
            ))),
        }
    }

    /// The attack configuration with profile names resolved, seeded from
    /// `master_seed` (or an override).
    pub fn attack_config(&self, seed: u64) -> Result<AttackConfig, CliError> {
        let a = &self.config.attack;
        let registry = self.registry()?;
        let resolve = |name: &str| -> Result<BackendProfile, CliError> {
            registry
                .resolve(name)
                .map(Clone::clone)
                .map_err(|e| CliError::Config(e.to_string()))
        };
        let mode = match a.mode.as_str() {
            "pairwise" => TriggerMode::Pairwise,
            "one-vs-rest" => TriggerMode::OneVsRest,
            other => {
                return Err(CliError::Config(format!(
                    "unknown attack.mode `{other}` (pairwise | one-vs-rest)"
                )))
            }
        };
        let variant = parse_variant(&a.variant)?;
        let mut config = AttackConfig::new(resolve(&a.h1)?, Vec::new());
        for name in &a.h2 {
            config.others.push(resolve(name)?);
        }
        config.alpha = AlphaSchedule {
            init: a.alpha_init,
            tau_high: a.alpha_tau_high,
            tau_low: a.alpha_tau_low,
            ..AlphaSchedule::default()
        };
        config.beta = a.beta;
        config.gamma = a.gamma;
        config.lr = a.lr;
        config.steps_per_iter = a.steps_per_iter;
        config.k_bits = a.k_bits;
        config.m_perm = a.m_perm;
        config.m_flip = a.m_flip;
        config.rho = a.rho;
        config.max_iters = a.max_iters;
        config.layer_mask = a.layer_mask.clone();
        config.mode = mode;
        config.variant = variant;
        config.seed = seed;
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn downcast_formats(&self) -> Result<Vec<DowncastFormat>, CliError> {
        self.config
            .defense
            .downcast
            .iter()
            .map(|name| match name.as_str() {
                "f16" => Ok(DowncastFormat::F16),
                "bf16" => Ok(DowncastFormat::Bf16),
                other => Err(CliError::Config(format!(
                    "unknown downcast format `{other}` (f16 | bf16)"
                ))),
            })
            .collect()
    }
}

pub fn parse_variant(name: &str) -> Result<Variant, CliError> {
    match name {
        "base" => Ok(Variant::Base),
        "perm" => Ok(Variant::Perm),
        "flip" => Ok(Variant::Flip),
        "full" => Ok(Variant::Full),
        other => Err(CliError::Config(format!(
            "unknown variant `{other}` (base | perm | flip | full)"
        ))),
    }
}
