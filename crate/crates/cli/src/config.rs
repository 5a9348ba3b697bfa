//! Experiment configuration: a TOML document with one section per concern.
//!
//! Every field except the top-level `seed` has a default, and unknown keys
//! are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use vqprompt::backbone::PretrainConfig;
use vqprompt::cil::CalibrationConfig;
use vqprompt::optim::AdamWConfig;
use vqprompt::{BackboneConfig, BenchmarkParams, LossWeights, PromptMode, TrainConfig};

/// Prompt mode as exposed on the command line. `vq-s` is `vq` without
/// classifier calibration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Vq,
    VqS,
    Soft,
    None,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [RunMode::Vq, RunMode::VqS, RunMode::Soft, RunMode::None];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Vq => "vq",
            RunMode::VqS => "vq-s",
            RunMode::Soft => "soft",
            RunMode::None => "none",
        }
    }

    pub fn prompt_mode(self) -> PromptMode {
        match self {
            RunMode::Vq | RunMode::VqS => PromptMode::Vq,
            RunMode::Soft => PromptMode::Soft,
            RunMode::None => PromptMode::None,
        }
    }

    /// Head-only training is the plain sequential baseline, so it is not
    /// calibrated either.
    pub fn calibrates(self) -> bool {
        matches!(self, RunMode::Vq | RunMode::Soft)
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunMode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .with_context(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub noise_scale: f64,
    pub pretrain_classes: usize,
    pub pretrain_samples_per_class: usize,
    /// Content tokens per sample.
    pub seq_len: usize,
    pub token_dim: usize,
    pub train_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let p = BenchmarkParams::default();
        Self {
            tasks: p.tasks,
            classes_per_task: p.classes_per_task,
            samples_per_class: p.samples_per_class,
            noise_scale: p.noise_scale,
            pretrain_classes: p.pretrain_classes,
            pretrain_samples_per_class: p.pretrain_samples_per_class,
            seq_len: p.seq_len,
            token_dim: p.token_dim,
            train_fraction: p.train_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub prompt_blocks: Vec<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_batch_size: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let p = PretrainConfig::default();
        Self {
            depth: b.depth,
            d_model: b.d_model,
            heads: b.heads,
            d_ff: b.d_ff,
            prompt_blocks: b.prompt_blocks,
            pretrain_epochs: p.epochs,
            pretrain_learning_rate: p.learning_rate,
            pretrain_batch_size: p.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub pool_size: usize,
    pub prompt_len: usize,
    pub temperature: f64,
    pub lambda_q: f64,
    pub lambda_c: f64,
}

impl Default for PromptSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            pool_size: t.pool_size,
            prompt_len: t.prompt_len,
            temperature: t.temperature,
            lambda_q: t.weights.lambda_q,
            lambda_c: t.weights.lambda_c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: RunMode,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub variance_floor: f64,
    pub calibration_epochs: usize,
    pub calibration_learning_rate: f64,
    pub calibration_batch_size: usize,
    pub pseudo_per_class: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: RunMode::Vq,
            learning_rate: t.learning_rate,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            weight_decay: t.optimizer.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            variance_floor: t.variance_floor,
            calibration_epochs: t.calibration.epochs,
            calibration_learning_rate: t.calibration.learning_rate,
            calibration_batch_size: t.calibration.batch_size,
            pseudo_per_class: t.calibration.per_class,
        }
    }
}

/// Grids walked by `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub lambda_q: Vec<f64>,
    pub lambda_c: Vec<f64>,
    pub pool_size: Vec<usize>,
    pub prompt_len: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            lambda_q: vec![0.0, 0.1, 0.4, 1.0],
            lambda_c: vec![0.0, 0.1, 0.4],
            pool_size: vec![4, 10, 30],
            prompt_len: vec![4, 8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            data: DataSection::default(),
            backbone: BackboneSection::default(),
            prompt: PromptSection::default(),
            train: TrainSection::default(),
            ablation: AblationSection::default(),
        }
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.message()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.backbone_config().validate()?;
        self.train_config().validate()?;
        if self.backbone.prompt_blocks.is_empty() && self.train.mode != RunMode::None {
            bail!("prompted modes need at least one prompt block");
        }
        Ok(())
    }

    pub fn benchmark_params(&self) -> BenchmarkParams {
        let d = &self.data;
        BenchmarkParams {
            seed: self.seed,
            tasks: d.tasks,
            classes_per_task: d.classes_per_task,
            samples_per_class: d.samples_per_class,
            noise_scale: d.noise_scale,
            pretrain_classes: d.pretrain_classes,
            pretrain_samples_per_class: d.pretrain_samples_per_class,
            seq_len: d.seq_len,
            token_dim: d.token_dim,
            train_fraction: d.train_fraction,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let b = &self.backbone;
        BackboneConfig {
            depth: b.depth,
            d_model: b.d_model,
            heads: b.heads,
            seq_len: self.data.seq_len + 1,
            d_ff: b.d_ff,
            token_dim: self.data.token_dim,
            prompt_blocks: b.prompt_blocks.clone(),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.backbone.pretrain_epochs,
            learning_rate: self.backbone.pretrain_learning_rate,
            batch_size: self.backbone.pretrain_batch_size,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let p = &self.prompt;
        TrainConfig {
            seed: self.seed,
            mode: t.mode.prompt_mode(),
            calibrate: t.mode.calibrates(),
            learning_rate: t.learning_rate,
            optimizer: AdamWConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                weight_decay: t.weight_decay,
                ..AdamWConfig::default()
            },
            epochs: t.epochs,
            batch_size: t.batch_size,
            pool_size: p.pool_size,
            prompt_len: p.prompt_len,
            temperature: p.temperature,
            weights: LossWeights {
                lambda_q: p.lambda_q,
                lambda_c: p.lambda_c,
            },
            variance_floor: t.variance_floor,
            calibration: CalibrationConfig {
                epochs: t.calibration_epochs,
                learning_rate: t.calibration_learning_rate,
                batch_size: t.calibration_batch_size,
                per_class: t.pseudo_per_class,
            },
        }
    }
}
