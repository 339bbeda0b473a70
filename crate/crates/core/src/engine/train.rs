use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{prepare_method, AdapterConfig, LoraConfig, Method};
use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{binarize, compute_iou, supervised_loss};
use crate::model::{ImageEmbedding, ModelConfig, PromptSet, SamModel};
use crate::optim::AdamW;
use crate::tensor::Tensor;

use super::config::{load_json, meta_path, save_json, CheckpointMeta, TrainConfig, CONFIG_VERSION};

/// Seed used for evaluation prompts, shared by every method so per-image
/// scores pair up across runs.
pub const EVAL_PROMPT_SEED: u64 = 0x0E7A1;

/// A positive point at the mask pixel nearest the mask centroid, moved by a
/// seeded offset of up to `jitter` pixels per axis when that lands inside the
/// mask. Empty masks get the image center.
pub fn sample_prompt(s: &Sample, seed: u64, jitter: i64) -> PromptSet {
    let n = s.size();
    let fg: Vec<(usize, usize)> = (0..n * n).filter(|&i| s.mask[i] != 0).map(|i| (i % n, i / n)).collect();
    if fg.is_empty() {
        let c = (n / 2) as f64;
        return PromptSet::positive(c, c);
    }
    let cx = fg.iter().map(|p| p.0 as f64).sum::<f64>() / fg.len() as f64;
    let cy = fg.iter().map(|p| p.1 as f64).sum::<f64>() / fg.len() as f64;
    let &(px, py) = fg
        .iter()
        .min_by(|a, b| {
            let da = (a.0 as f64 - cx).powi(2) + (a.1 as f64 - cy).powi(2);
            let db = (b.0 as f64 - cx).powi(2) + (b.1 as f64 - cy).powi(2);
            da.total_cmp(&db)
        })
        .expect("nonempty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((s.volume_id as u64) << 32) | s.slice_index as u64);
    let (dx, dy) = if jitter > 0 {
        (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter))
    } else {
        (0, 0)
    };
    let (x, y) = (px as i64 + dx, py as i64 + dy);
    let inside = x >= 0 && y >= 0 && (x as usize) < n && (y as usize) < n && s.mask[y as usize * n + x as usize] != 0;
    let (x, y) = if inside { (x as usize, y as usize) } else { (px, py) };
    PromptSet::positive(x as f64, y as f64)
}

/// Anything that maps an image and prompts to mask logits.
pub trait MaskPredictor {
    fn predict_logits(&self, s: &Sample, prompts: &PromptSet) -> Result<Tensor<f32>>;
}

impl MaskPredictor for SamModel<f32> {
    fn predict_logits(&self, s: &Sample, prompts: &PromptSet) -> Result<Tensor<f32>> {
        Ok(self.predict(&s.image, prompts)?.logits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ious: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalResult {
    pub fn from_ious(ious: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&ious);
        EvalResult { ious, mean, std }
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// IoU of the thresholded prediction for every sample, one prompt each.
pub fn evaluate(model: &dyn MaskPredictor, samples: &[Sample]) -> Result<EvalResult> {
    let ious = samples
        .iter()
        .map(|s| {
            let logits = model.predict_logits(s, &sample_prompt(s, EVAL_PROMPT_SEED, 2))?;
            compute_iou(&binarize(&logits), &s.mask_bool())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_ious(ious))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean supervised loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Validation IoU before training (index 0) and after every epoch.
    pub val_iou: Vec<f64>,
    /// Epoch whose weights were kept (0 = the starting weights).
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub steps: u64,
}

fn embed_all(model: &SamModel<f32>, samples: &[Sample]) -> Result<Vec<ImageEmbedding<f32>>> {
    samples.iter().map(|s| model.encode_image(&s.image)).collect()
}

fn eval_cached(model: &SamModel<f32>, samples: &[Sample], cache: Option<&[ImageEmbedding<f32>]>) -> Result<f64> {
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let prompts = sample_prompt(s, EVAL_PROMPT_SEED, 2);
        let pred = match cache {
            Some(c) => model.predict_from_embedding(&c[i], &prompts)?,
            None => model.predict(&s.image, &prompts)?,
        };
        total += compute_iou(&binarize(&pred.logits), &s.mask_bool())?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Values of every frozen parameter, for the post-run audit.
fn frozen_values(model: &SamModel<f32>) -> Vec<(String, Tensor<f32>)> {
    model
        .store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Fails with an integrity error if any frozen parameter moved.
pub fn audit_frozen(model: &SamModel<f32>, before: &[(String, Tensor<f32>)]) -> Result<()> {
    for (name, v) in before {
        let now = &model.store.by_name(name).expect("names are stable").value;
        let same = now.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::Integrity(format!("frozen parameter `{name}` changed during training")));
        }
    }
    Ok(())
}

/// AdamW over the supervised loss on `train`, keeping the weights with the
/// best validation IoU. The model must already carry its method's freeze
/// policy. Frozen parameters are audited afterwards.
pub fn train_supervised(
    model: &mut SamModel<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation("training needs nonempty train and val splits".into()));
    }
    let frozen = frozen_values(model);
    let cache_ok = model.encoder_frozen();
    let train_cache = if cache_ok { Some(embed_all(model, train)?) } else { None };
    let val_cache = if cache_ok { Some(embed_all(model, val)?) } else { None };
    let prompts: Vec<PromptSet> = train.iter().map(|s| sample_prompt(s, cfg.seed, cfg.prompt_jitter)).collect();
    let targets: Vec<Tensor<f32>> = train.iter().map(Sample::mask_tensor).collect();

    let mut opt = AdamW::new(cfg.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let v0 = eval_cached(model, val, val_cache.as_deref())?;
    let mut out = TrainOutcome {
        epoch_loss: Vec::new(),
        val_iou: vec![v0],
        best_epoch: 0,
        best_val_iou: v0,
        steps: 0,
    };
    let mut best = model.store.snapshot();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grads();
            for &i in batch {
                let grads = {
                    let mut tp = Tape::new(&model.store);
                    let o = match &train_cache {
                        Some(c) => model.decode_embedding(&mut tp, &c[i], &prompts[i])?,
                        None => model.forward(&mut tp, &train[i].image, &prompts[i])?,
                    };
                    let (loss, comps) = supervised_loss(&mut tp, &o, &targets[i], &cfg.loss)?;
                    loss_sum += comps.total;
                    tp.backward(loss)?
                };
                model.store.accumulate(&grads);
            }
            model.store.scale_grads(1.0 / batch.len() as f32);
            model.store.ensure_grads();
            opt.step(&mut model.store)?;
            out.steps += 1;
        }
        out.epoch_loss.push(loss_sum / train.len() as f64);
        let v = eval_cached(model, val, val_cache.as_deref())?;
        out.val_iou.push(v);
        if v > out.best_val_iou {
            out.best_val_iou = v;
            out.best_epoch = epoch;
            best = model.store.snapshot();
        }
    }
    for (name, value) in best {
        let id = model.store.id(&name).expect("names are stable");
        model.store.get_mut(id).value = value;
    }
    model.store.zero_grads();
    audit_frozen(model, &frozen)?;
    Ok(out)
}

/// Builds a model for `method` on top of the weights in `base`.
pub fn model_from_base(
    model_cfg: &ModelConfig,
    base: Option<&Path>,
    method: Method,
    adapter: &AdapterConfig,
    lora: &LoraConfig,
) -> Result<SamModel<f32>> {
    let mut model = SamModel::<f32>::new(model_cfg)?;
    if let Some(path) = base {
        Checkpoint::load(path)?.apply(&mut model.store)?;
    }
    prepare_method(&mut model, method, adapter, lora)?;
    Ok(model)
}

pub fn save_model(model: &SamModel<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    Checkpoint::from_store(&model.store, |_| true).save(path)?;
    save_json(&meta_path(path), meta)
}

pub fn meta_for(cfg: &TrainConfig) -> CheckpointMeta {
    CheckpointMeta {
        version: CONFIG_VERSION,
        method: cfg.method,
        model: cfg.model.clone(),
        adapter: cfg.adapter.clone(),
        lora: cfg.lora.clone(),
    }
}

/// Rebuilds a saved model. Without a sidecar the checkpoint is assumed to be
/// an unadapted default-shaped model.
pub fn load_model(path: &Path) -> Result<(SamModel<f32>, CheckpointMeta)> {
    let mp = meta_path(path);
    let meta = if mp.exists() {
        load_json::<CheckpointMeta>(&mp)?
    } else {
        CheckpointMeta {
            version: CONFIG_VERSION,
            method: Method::FullFt,
            model: ModelConfig::default(),
            adapter: AdapterConfig::default(),
            lora: LoraConfig::default(),
        }
    };
    let ck = Checkpoint::load(path)?;
    let mut model = SamModel::<f32>::new(&meta.model)?;
    prepare_method(&mut model, meta.method, &meta.adapter, &meta.lora)?;
    ck.apply(&mut model.store)?;
    Ok((model, meta))
}
