use serde::{Deserialize, Serialize};

use crate::adapter::{prepare_method, FreezePolicy, Method};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{
    binarize, binary_entropy_loss, compute_iou, confident_entropy, mean_pool, proximity_reg,
    slice_contrastive_loss,
};
use crate::model::{DecoderOutput, ImageEmbedding, PromptSet, SamModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;

use super::config::TtdaConfig;
use super::train::{mean_std, sample_prompt, EVAL_PROMPT_SEED};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtdaSample {
    pub volume_id: u32,
    pub slice_index: u32,
    pub iou_before: f64,
    pub iou_after: f64,
    /// Mean entropy of the confident pixels before the first update.
    pub entropy_before: f64,
    /// The same after the last update.
    pub entropy_after: f64,
    /// Objective value at each iteration.
    pub losses: Vec<f64>,
    pub used_contrastive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtdaReport {
    pub samples: Vec<TtdaSample>,
    pub mean_iou_before: f64,
    pub std_iou_before: f64,
    pub mean_iou_after: f64,
    pub std_iou_after: f64,
    /// Fraction of samples whose confident-pixel entropy went down.
    pub entropy_decreased_fraction: f64,
}

impl TtdaReport {
    fn from_samples(samples: Vec<TtdaSample>) -> Self {
        let before: Vec<f64> = samples.iter().map(|s| s.iou_before).collect();
        let after: Vec<f64> = samples.iter().map(|s| s.iou_after).collect();
        let (mb, sb) = mean_std(&before);
        let (ma, sa) = mean_std(&after);
        let dec = samples.iter().filter(|s| s.entropy_after < s.entropy_before).count();
        TtdaReport {
            entropy_decreased_fraction: dec as f64 / samples.len().max(1) as f64,
            samples,
            mean_iou_before: mb,
            std_iou_before: sb,
            mean_iou_after: ma,
            std_iou_after: sa,
        }
    }
}

struct Ctx<'a> {
    model: &'a SamModel<f32>,
    cache: Option<&'a [ImageEmbedding<f32>]>,
}

impl<'a> Ctx<'a> {
    fn forward(&self, tp: &mut Tape<f32>, i: usize, s: &Sample, p: &PromptSet) -> Result<DecoderOutput> {
        match self.cache {
            Some(c) => self.model.decode_embedding(tp, &c[i], p),
            None => self.model.forward(tp, &s.image, p),
        }
    }

    fn predict(&self, i: usize, s: &Sample, p: &PromptSet) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tp = Tape::new(&self.model.store);
        let o = self.forward(&mut tp, i, s, p)?;
        let pooled = mean_pool(&mut tp, o.dense)?;
        Ok((tp.value(o.logits).clone(), tp.value(pooled).clone()))
    }
}

/// Partner slices of sample `i` within its volume: one positive at
/// `positive_offset` (forward first) and the nearest negatives at least
/// `negative_min_offset` away.
fn partners(samples: &[Sample], i: usize, cfg: &TtdaConfig) -> Option<(usize, Vec<usize>)> {
    let me = &samples[i];
    let same: Vec<usize> = (0..samples.len()).filter(|&j| samples[j].volume_id == me.volume_id).collect();
    let at = |off: i64| {
        same.iter()
            .copied()
            .find(|&j| samples[j].slice_index as i64 == me.slice_index as i64 + off)
    };
    let po = cfg.positive_offset as i64;
    let pos = at(po).or_else(|| at(-po))?;
    let mut negs: Vec<(u32, usize)> = same
        .iter()
        .copied()
        .map(|j| (samples[j].slice_index.abs_diff(me.slice_index), j))
        .filter(|&(d, _)| d as usize >= cfg.negative_min_offset)
        .collect();
    negs.sort();
    negs.truncate(cfg.max_negatives);
    if negs.is_empty() {
        return None;
    }
    Some((pos, negs.into_iter().map(|(_, j)| j).collect()))
}

/// Adapts `model` to each sample independently and restores it afterwards.
///
/// The model must already carry the adapting method's freeze policy. Each
/// sample starts from the same weights; the restore is checked byte-exact
/// against the serialized starting point.
pub fn run_ttda(model: &mut SamModel<f32>, samples: &[Sample], cfg: &TtdaConfig) -> Result<TtdaReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("no samples to adapt on".into()));
    }
    let lc = cfg.loss_config();
    let start = Checkpoint::from_store(&model.store, |_| true);
    let start_bytes = start.encode();
    let cache: Option<Vec<ImageEmbedding<f32>>> = if model.encoder_frozen() {
        Some(samples.iter().map(|s| model.encode_image(&s.image)).collect::<Result<_>>()?)
    } else {
        None
    };
    let prompts: Vec<PromptSet> = samples.iter().map(|s| sample_prompt(s, EVAL_PROMPT_SEED, 2)).collect();

    // Partner embeddings come from the starting weights and stay detached.
    let mut initial: Vec<(Tensor<f32>, Tensor<f32>)> = Vec::with_capacity(samples.len());
    {
        let ctx = Ctx { model, cache: cache.as_deref() };
        for (i, s) in samples.iter().enumerate() {
            initial.push(ctx.predict(i, s, &prompts[i])?);
        }
    }
    let mut out = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let target = s.mask_bool();
        let snapshot = &initial[i].0;
        let iou_before = compute_iou(&binarize(snapshot), &target)?;
        let entropy_before = confident_entropy(snapshot, cfg.confidence_percentile)?;
        let partner = if cfg.lambda_contrastive > 0.0 { partners(samples, i, cfg) } else { None };

        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut losses = Vec::with_capacity(cfg.iterations);
        for _ in 0..cfg.iterations {
            let grads = {
                let ctx = Ctx { model, cache: cache.as_deref() };
                let mut tp = Tape::new(&model.store);
                let o = ctx.forward(&mut tp, i, s, &prompts[i])?;
                let e = binary_entropy_loss(&mut tp, o.logits, cfg.confidence_percentile)?;
                let p = proximity_reg(&mut tp, o.logits, snapshot, &lc)?;
                let e = tp.scale(e, cfg.lambda_entropy as f32);
                let p = tp.scale(p, cfg.lambda_proximity as f32);
                let mut loss = tp.add(e, p)?;
                if let Some((pos, negs)) = &partner {
                    let anchor = mean_pool(&mut tp, o.dense)?;
                    let pv = tp.constant(initial[*pos].1.clone());
                    let nv: Vec<Var> = negs.iter().map(|&j| tp.constant(initial[j].1.clone())).collect();
                    let c = slice_contrastive_loss(&mut tp, anchor, pv, &nv, cfg.temperature)?;
                    let c = tp.scale(c, cfg.lambda_contrastive as f32);
                    loss = tp.add(loss, c)?;
                }
                losses.push(tp.scalar(loss) as f64);
                tp.backward(loss)?
            };
            model.store.zero_grads();
            model.store.accumulate(&grads);
            model.store.ensure_grads();
            opt.step(&mut model.store)?;
        }
        let (after, _) = Ctx { model, cache: cache.as_deref() }.predict(i, s, &prompts[i])?;
        out.push(TtdaSample {
            volume_id: s.volume_id,
            slice_index: s.slice_index,
            iou_before,
            iou_after: compute_iou(&binarize(&after), &target)?,
            entropy_before,
            entropy_after: confident_entropy(&after, cfg.confidence_percentile)?,
            losses,
            used_contrastive: partner.is_some(),
        });

        start.apply(&mut model.store)?;
        model.store.zero_grads();
        if Checkpoint::from_store(&model.store, |_| true).encode() != start_bytes {
            return Err(Error::Integrity(format!(
                "weights differ from the starting checkpoint after sample {i}"
            )));
        }
    }
    Ok(TtdaReport::from_samples(out))
}

/// Gives `model` the trainable set `cfg.method` adapts: a fresh zero-gated
/// adapter or LoRA delta when the checkpoint has none, then the freeze
/// policy.
pub fn prepare_for_ttda(model: &mut SamModel<f32>, cfg: &TtdaConfig) -> Result<()> {
    let needs = match cfg.method {
        Method::SamDaDec => !model.has_decoder_adapters(),
        Method::SamDaEnc => !model.has_encoder_adapters(),
        Method::Lora => !model.has_lora(),
        Method::FullFt | Method::DecoderFt => false,
    };
    if needs {
        prepare_method(model, cfg.method, &cfg.adapter, &cfg.lora)
    } else {
        FreezePolicy::new(cfg.method).apply(&mut model.store);
        Ok(())
    }
}
