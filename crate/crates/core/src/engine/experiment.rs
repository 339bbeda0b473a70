//! The method comparison and the ablation matrix.
//!
//! Every run adapts from one shared base model trained from scratch with
//! `full_ft`. By default the base sees a pretraining pool of the source
//! anatomy under many randomized devices, standing in for a foundation
//! model's broad corpus; with `pretrain: null` it trains on the source train
//! split instead. Runs then train on the source train split and are
//! evaluated on the source and target test splits.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, Method, Placement};
use crate::data::{generate_dataset, pool_samples, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::SamModel;

use super::config::{save_json, CheckpointMeta, ExperimentConfig, TrainConfig, CONFIG_VERSION};
use super::report::{emit_report, RunFragment, RunReport};
use super::train::{evaluate, meta_for, model_from_base, save_model, train_supervised, EvalResult};
use crate::optim::AdamWConfig;

pub const BASE_CHECKPOINT: &str = "base.sdck";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Size,
    Placement,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "size" => Ok(AblationAxis::Size),
            "placement" => Ok(AblationAxis::Placement),
            _ => Err(Error::Validation(format!("unknown ablation axis `{s}` (size|placement)"))),
        }
    }
}

/// One row of an experiment: a method with its adapter settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub method: Method,
    pub adapter: AdapterConfig,
}

/// Loaded splits used by every run of an experiment.
pub struct Splits {
    pub source_train: Vec<Sample>,
    pub source_val: Vec<Sample>,
    pub source_test: Vec<Sample>,
    pub target_test: Vec<Sample>,
    pub source_name: String,
    pub target_name: String,
}

impl Splits {
    pub fn load(ds: &Dataset) -> Result<Self> {
        Ok(Splits {
            source_train: ds.load_role("source", "train")?,
            source_val: ds.load_role("source", "val")?,
            source_test: ds.load_role("source", "test")?,
            target_test: ds.load_role("target", "test")?,
            source_name: ds.manifest.domain_by_role("source")?.config.name.clone(),
            target_name: ds.manifest.domain_by_role("target")?.config.name.clone(),
        })
    }
}

/// Opens `cfg.data_dir`, or generates the dataset under `out/data` when no
/// directory is configured (reusing it if already there).
pub fn prepare_data(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    if let Some(dir) = &cfg.data_dir {
        return Dataset::open(dir);
    }
    let dir = out.join("data");
    if !dir.join(crate::data::MANIFEST_FILE).exists() {
        generate_dataset(&cfg.data, &dir)?;
    }
    Dataset::open(&dir)
}

/// Configuration of the shared base run.
pub fn base_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        method: Method::FullFt,
        epochs: cfg.base_epochs,
        optim: AdamWConfig {
            lr: cfg.base_lr,
            ..cfg.train.optim
        },
        base_checkpoint: None,
        seed: cfg.train.model.seed,
        ..cfg.train.clone()
    }
}

/// Train and val samples of the base run: the pretraining pool when one is
/// configured, otherwise the source train and val splits.
pub fn base_samples(cfg: &ExperimentConfig, ds: &Dataset, splits: &Splits) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let Some(pool) = &cfg.pretrain else {
        return Ok((splits.source_train.clone(), splits.source_val.clone()));
    };
    let (tr, va) = pool.volume_ids();
    for d in &ds.manifest.domains {
        for (split, e) in &d.splits {
            if let Some(v) = e.volumes.iter().find(|v| tr.contains(&v.volume_id) || va.contains(&v.volume_id)) {
                return Err(Error::Validation(format!(
                    "pretraining pool volume {} collides with {}/{split}",
                    v.volume_id, d.config.name
                )));
            }
        }
    }
    let anatomy = &ds.manifest.domain_by_role("source")?.config;
    pool_samples(pool, anatomy, ds.manifest.image_size)
}

/// Trains the base model into `out/base.sdck`, or reuses the file when it is
/// already present.
pub fn prepare_base(cfg: &ExperimentConfig, ds: &Dataset, splits: &Splits, out: &Path) -> Result<PathBuf> {
    let path = out.join(BASE_CHECKPOINT);
    if path.exists() {
        return Ok(path);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let bc = base_config(cfg);
    let (train, val) = base_samples(cfg, ds, splits)?;
    let mut model = model_from_base(&bc.model, None, Method::FullFt, &bc.adapter, &bc.lora)?;
    let outcome = train_supervised(&mut model, &train, &val, &bc)?;
    let meta = CheckpointMeta {
        method: Method::FullFt,
        ..meta_for(&bc)
    };
    save_model(&model, &meta, &path)?;
    save_json(&out.join("base_train.json"), &outcome)?;
    Ok(path)
}

/// Trains and evaluates one (spec, seed) run from the base checkpoint.
pub fn run_one(
    cfg: &ExperimentConfig,
    splits: &Splits,
    base: &Path,
    spec: &RunSpec,
    seed: u64,
) -> Result<RunFragment> {
    Ok(train_run(cfg, splits, base, spec, seed)?.1)
}

/// [`run_one`], also returning the trained model.
pub fn train_run(
    cfg: &ExperimentConfig,
    splits: &Splits,
    base: &Path,
    spec: &RunSpec,
    seed: u64,
) -> Result<(SamModel<f32>, RunFragment)> {
    let tc = run_config(cfg, base, spec, seed);
    tc.validate()?;
    let mut model = model_from_base(&tc.model, Some(base), tc.method, &tc.adapter, &tc.lora)?;
    let outcome = train_supervised(&mut model, &splits.source_train, &splits.source_val, &tc)?;
    let mut domains = std::collections::BTreeMap::new();
    domains.insert(splits.source_name.clone(), evaluate(&model, &splits.source_test)?);
    domains.insert(splits.target_name.clone(), evaluate(&model, &splits.target_test)?);
    let fragment = RunFragment {
        version: CONFIG_VERSION,
        label: spec.label.clone(),
        method: spec.method,
        seed,
        trainable_params: model.store.param_count(true),
        total_params: model.store.param_count(false),
        train: Some(outcome),
        domains,
    };
    Ok((model, fragment))
}

/// Training configuration of one (spec, seed) run.
pub fn run_config(cfg: &ExperimentConfig, base: &Path, spec: &RunSpec, seed: u64) -> TrainConfig {
    TrainConfig {
        method: spec.method,
        adapter: AdapterConfig {
            seed,
            ..spec.adapter.clone()
        },
        lora: crate::adapter::LoraConfig {
            seed,
            ..cfg.train.lora.clone()
        },
        seed,
        base_checkpoint: Some(base.to_path_buf()),
        ..cfg.train.clone()
    }
}

/// Runs every spec for every seed, writes fragments under `out` and emits
/// the report. Fragments already on disk are reused.
pub fn run_matrix(cfg: &ExperimentConfig, specs: &[RunSpec], out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_json(&out.join("config.json"), cfg)?;
    let labels: Vec<&str> = specs.iter().map(|s| s.label.as_str()).collect();
    save_json(&out.join("order.json"), &labels)?;
    let ds = prepare_data(cfg, out)?;
    let splits = Splits::load(&ds)?;
    let base = prepare_base(cfg, &ds, &splits, out)?;
    for spec in specs {
        for &seed in &cfg.seeds {
            let probe = RunFragment {
                version: CONFIG_VERSION,
                label: spec.label.clone(),
                method: spec.method,
                seed,
                trainable_params: 0,
                total_params: 0,
                train: None,
                domains: Default::default(),
            };
            let path = out.join(super::report::FRAGMENT_DIR).join(probe.file_name());
            if path.exists() {
                continue;
            }
            run_one(cfg, &splits, &base, spec, seed)?.save(out)?;
        }
    }
    emit_report(out)
}

/// One row per configured method, `sam_da_dec` first so the t-tests compare
/// it against every other method.
pub fn comparison_specs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut methods = cfg.methods.clone();
    methods.sort_by_key(|&m| m != Method::SamDaDec);
    methods
        .into_iter()
        .map(|m| RunSpec {
            label: m.as_str().into(),
            method: m,
            adapter: cfg.train.adapter.clone(),
        })
        .collect()
}

pub fn ablation_specs(cfg: &ExperimentConfig, axis: AblationAxis) -> Vec<RunSpec> {
    match axis {
        AblationAxis::Size => cfg
            .adapter_sizes
            .iter()
            .map(|&d_a| RunSpec {
                label: format!("sam_da_dec d_a={d_a}"),
                method: Method::SamDaDec,
                adapter: AdapterConfig {
                    d_a,
                    ..cfg.train.adapter.clone()
                },
            })
            .collect(),
        AblationAxis::Placement => [(Method::SamDaDec, Placement::Decoder), (Method::SamDaEnc, Placement::Encoder)]
            .into_iter()
            .map(|(method, placement)| RunSpec {
                label: format!("{} ({})", method.as_str(), if placement == Placement::Decoder { "decoder" } else { "encoder" }),
                method,
                adapter: AdapterConfig {
                    placement,
                    ..cfg.train.adapter.clone()
                },
            })
            .collect(),
    }
}

pub fn run_comparison(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    run_matrix(cfg, &comparison_specs(cfg), out)
}

pub fn run_ablation(cfg: &ExperimentConfig, axis: AblationAxis, out: &Path) -> Result<RunReport> {
    run_matrix(cfg, &ablation_specs(cfg, axis), out)
}

/// Per-domain evaluation of an existing model, as written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub checkpoint: PathBuf,
    pub method: Method,
    pub domain: String,
    pub split: String,
    pub trainable_params: usize,
    pub total_params: usize,
    pub result: EvalResult,
}
