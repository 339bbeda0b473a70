//! JSON run configurations. Every document carries `"version": 1`.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, LoraConfig, Method};
use crate::data::{DataConfig, PoolConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Reads a versioned JSON document.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CONFIG_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Validation(format!("{}: unsupported version {v}", path.display())));
        }
        None => return Err(Error::Validation(format!("{}: missing `version`", path.display()))),
    }
    serde_json::from_value(value).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Supervised training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub method: Method,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub lora: LoraConfig,
    pub loss: LossConfig,
    pub optim: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Starting weights. Required for every method except `full_ft`, which
    /// trains from a fresh initialization when absent.
    pub base_checkpoint: Option<PathBuf>,
    /// Largest prompt offset from the mask point nearest the centroid.
    pub prompt_jitter: i64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            method: Method::SamDaDec,
            model: ModelConfig::default(),
            adapter: AdapterConfig::default(),
            lora: LoraConfig::default(),
            loss: LossConfig::default(),
            optim: AdamWConfig::default(),
            epochs: 10,
            batch_size: 4,
            seed: 0,
            base_checkpoint: None,
            prompt_jitter: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Validation(format!("train config version {} unsupported", self.version)));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be ≥ 1".into()));
        }
        if !(self.optim.lr >= 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::Validation(format!("lr {} must be finite and ≥ 0", self.optim.lr)));
        }
        if self.prompt_jitter < 0 {
            return Err(Error::Validation("prompt_jitter must be ≥ 0".into()));
        }
        if self.method != Method::FullFt && self.base_checkpoint.is_none() {
            return Err(Error::Validation(format!("method {} needs base_checkpoint", self.method)));
        }
        self.model.validate()?;
        self.adapter.validate()?;
        self.loss.validate()
    }
}

/// Per-sample test-time adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtdaConfig {
    pub version: u32,
    /// Which parameters adapt; adapter methods get a fresh zero-gated adapter.
    pub method: Method,
    pub adapter: AdapterConfig,
    pub lora: LoraConfig,
    pub domain: String,
    pub split: String,
    pub iterations: usize,
    pub lr: f64,
    pub lambda_entropy: f64,
    pub lambda_proximity: f64,
    pub lambda_contrastive: f64,
    pub confidence_percentile: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    pub temperature: f64,
    pub positive_offset: usize,
    pub negative_min_offset: usize,
    /// Cap on negatives per anchor, nearest qualifying slices first.
    pub max_negatives: usize,
    pub prompt_jitter: i64,
    pub seed: u64,
}

impl Default for TtdaConfig {
    fn default() -> Self {
        let l = LossConfig::default();
        TtdaConfig {
            version: CONFIG_VERSION,
            method: Method::SamDaDec,
            adapter: AdapterConfig::default(),
            lora: LoraConfig::default(),
            domain: "target".into(),
            split: "test".into(),
            iterations: 5,
            lr: 1e-3,
            lambda_entropy: l.lambda_entropy,
            lambda_proximity: l.lambda_proximity,
            lambda_contrastive: l.lambda_contrastive,
            confidence_percentile: l.entropy_confidence_percentile,
            focal_gamma: l.focal_gamma,
            dice_smooth: l.dice_smooth,
            temperature: l.contrastive_temperature,
            positive_offset: l.positive_offset,
            negative_min_offset: l.negative_min_offset,
            max_negatives: 4,
            prompt_jitter: 2,
            seed: 0,
        }
    }
}

impl TtdaConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            focal_gamma: self.focal_gamma,
            dice_smooth: self.dice_smooth,
            entropy_confidence_percentile: self.confidence_percentile,
            lambda_entropy: self.lambda_entropy,
            lambda_proximity: self.lambda_proximity,
            lambda_contrastive: self.lambda_contrastive,
            contrastive_temperature: self.temperature,
            positive_offset: self.positive_offset,
            negative_min_offset: self.negative_min_offset,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Validation(format!("ttda config version {} unsupported", self.version)));
        }
        if self.iterations == 0 {
            return Err(Error::Validation("iterations must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("lr {} must be finite and ≥ 0", self.lr)));
        }
        if self.max_negatives == 0 {
            return Err(Error::Validation("max_negatives must be ≥ 1".into()));
        }
        self.adapter.validate()?;
        self.loss_config().validate()
    }
}

/// The comparison and ablation experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Existing dataset; when absent one is generated from `data` under the
    /// output directory.
    pub data_dir: Option<PathBuf>,
    pub data: DataConfig,
    /// Template for every adaptation run; `method`, `seed` and
    /// `base_checkpoint` are filled in per run.
    pub train: TrainConfig,
    /// Pretraining pool for the shared base model. `None` trains the base on
    /// the source train split instead.
    pub pretrain: Option<PoolConfig>,
    /// Epochs for the shared base model trained from scratch.
    pub base_epochs: usize,
    pub base_lr: f64,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Prompt widths `D_a` for the size ablation.
    pub adapter_sizes: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            data_dir: None,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            pretrain: Some(PoolConfig::default()),
            base_epochs: 20,
            base_lr: 1e-3,
            seeds: vec![0, 1, 2, 3],
            methods: Method::ALL.to_vec(),
            adapter_sizes: vec![512, 1024, 2048],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Validation(format!("experiment config version {} unsupported", self.version)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Validation("at least one seed required".into()));
        }
        if self.adapter_sizes.iter().any(|&d| d == 0) {
            return Err(Error::Validation("adapter sizes must be positive".into()));
        }
        if self.data_dir.is_none() {
            self.data.validate()?;
        }
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        TrainConfig {
            base_checkpoint: Some(PathBuf::new()),
            ..self.train.clone()
        }
        .validate()
    }
}

/// Sidecar written next to every checkpoint so it can be rebuilt without the
/// run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub method: Method,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub lora: LoraConfig,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}
