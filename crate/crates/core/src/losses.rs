//! Supervised and test-time objectives on mask logits, plus the IoU metric.
//!
//! All mask losses use the binary (sigmoid) formulation and take logits on a
//! tape with a constant `{0, 1}` target tensor.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::DecoderOutput;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub iou_loss_weight: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    /// Fraction of lowest-entropy pixels kept by the entropy objective.
    pub entropy_confidence_percentile: f64,
    pub lambda_entropy: f64,
    pub lambda_proximity: f64,
    pub lambda_contrastive: f64,
    pub contrastive_temperature: f64,
    /// Slice distance of the positive partner.
    pub positive_offset: usize,
    /// Minimum slice distance of negatives.
    pub negative_min_offset: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            dice_weight: 0.8,
            ce_weight: 0.2,
            iou_loss_weight: 1.0,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
            entropy_confidence_percentile: 0.7,
            lambda_entropy: 1.0,
            lambda_proximity: 1.0,
            lambda_contrastive: 0.1,
            contrastive_temperature: 0.1,
            positive_offset: 1,
            negative_min_offset: 5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("dice_weight", self.dice_weight),
            ("ce_weight", self.ce_weight),
            ("iou_loss_weight", self.iou_loss_weight),
            ("focal_gamma", self.focal_gamma),
            ("dice_smooth", self.dice_smooth),
            ("lambda_entropy", self.lambda_entropy),
            ("lambda_proximity", self.lambda_proximity),
            ("lambda_contrastive", self.lambda_contrastive),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Validation(format!("{name} = {w} must be finite and ≥ 0")));
            }
        }
        let q = self.entropy_confidence_percentile;
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Validation(format!("entropy_confidence_percentile {q} outside (0, 1]")));
        }
        if !(self.contrastive_temperature > 0.0) {
            return Err(Error::Validation("contrastive_temperature must be > 0".into()));
        }
        if self.positive_offset == 0 || self.negative_min_offset <= self.positive_offset {
            return Err(Error::Validation(format!(
                "need 0 < positive_offset ({}) < negative_min_offset ({})",
                self.positive_offset, self.negative_min_offset
            )));
        }
        Ok(())
    }
}

fn check_target<F: Float>(tp: &Tape<F>, logits: Var, target: &Tensor<F>, op: &'static str) -> Result<()> {
    if tp.shape(logits) != target.shape() {
        return Err(Error::dim(op, tp.shape(logits), target.shape()));
    }
    Ok(())
}

/// `1 − (2·Σ p·t + s) / (Σ p + Σ t + s)` with `p = σ(logits)`.
pub fn dice_loss<F: Float>(tp: &mut Tape<F>, logits: Var, target: &Tensor<F>, smooth: f64) -> Result<Var> {
    check_target(tp, logits, target, "dice_loss")?;
    let t_sum: f64 = target.data().iter().map(|v| v.f64()).sum();
    let p = tp.sigmoid(logits);
    let t = tp.constant(target.clone());
    let pt = tp.mul(p, t)?;
    let inter = tp.sum(pt);
    let num = tp.scale(inter, F::of(2.0));
    let num = tp.add_scalar(num, F::of(smooth));
    let p_sum = tp.sum(p);
    let den = tp.add_scalar(p_sum, F::of(t_sum + smooth));
    let r = tp.div(num, den)?;
    Ok(tp.one_minus(r))
}

/// Mean binary cross-entropy.
pub fn cross_entropy_loss<F: Float>(tp: &mut Tape<F>, logits: Var, target: &Tensor<F>) -> Result<Var> {
    focal_loss(tp, logits, target, 0.0)
}

/// Mean of `−(1 − p_t)^γ · log p_t`, `p_t` the probability of the target
/// class. `γ = 0` is the cross-entropy.
pub fn focal_loss<F: Float>(tp: &mut Tape<F>, logits: Var, target: &Tensor<F>, gamma: f64) -> Result<Var> {
    check_target(tp, logits, target, "focal_loss")?;
    if !(gamma >= 0.0) {
        return Err(Error::Validation(format!("focal gamma {gamma} must be ≥ 0")));
    }
    // z = ±logits so that p_t = σ(z) and 1 − p_t = σ(−z).
    let sign = target.map(|t| if t > F::of(0.5) { F::one() } else { -F::one() });
    let s = tp.constant(sign);
    let z = tp.mul(logits, s)?;
    let log_pt = tp.log_sigmoid(z);
    let per_pixel = if gamma == 0.0 {
        log_pt
    } else {
        let nz = tp.neg(z);
        let log_q = tp.log_sigmoid(nz);
        let lw = tp.scale(log_q, F::of(gamma));
        let w = tp.exp(lw);
        tp.mul(w, log_pt)?
    };
    let m = tp.mean(per_pixel);
    Ok(tp.neg(m))
}

/// Pixels with positive logit, i.e. probability above one half.
pub fn binarize<F: Float>(logits: &Tensor<F>) -> Vec<bool> {
    logits.data().iter().map(|&x| x > F::zero()).collect()
}

pub fn mask_from_tensor<F: Float>(t: &Tensor<F>) -> Vec<bool> {
    t.data().iter().map(|&x| x > F::of(0.5)).collect()
}

/// `|pred ∩ target| / |pred ∪ target|`, 1 when both are empty.
pub fn compute_iou(pred: &[bool], target: &[bool]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("compute_iou", &[pred.len()], &[target.len()]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.iter().zip(target) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `(iou_pred − IoU(binarize(logits), target))²` with the actual IoU held
/// constant.
pub fn iou_pred_loss<F: Float>(tp: &mut Tape<F>, iou_pred: Var, logits: Var, target: &Tensor<F>) -> Result<Var> {
    check_target(tp, logits, target, "iou_pred_loss")?;
    let actual = compute_iou(&binarize(tp.value(logits)), &mask_from_tensor(target))?;
    let d = tp.add_scalar(iou_pred, F::of(-actual));
    let sq = tp.square(d)?;
    Ok(tp.sum(sq))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub dice: f64,
    pub ce: f64,
    pub iou: f64,
    pub total: f64,
}

/// `dice_weight·dice + ce_weight·ce + iou_loss_weight·iou_pred_loss`.
pub fn supervised_loss<F: Float>(
    tp: &mut Tape<F>,
    out: &DecoderOutput,
    target: &Tensor<F>,
    cfg: &LossConfig,
) -> Result<(Var, LossComponents)> {
    let dice = dice_loss(tp, out.logits, target, cfg.dice_smooth)?;
    let ce = cross_entropy_loss(tp, out.logits, target)?;
    let iou = iou_pred_loss(tp, out.iou, out.logits, target)?;
    let a = tp.scale(dice, F::of(cfg.dice_weight));
    let b = tp.scale(ce, F::of(cfg.ce_weight));
    let c = tp.scale(iou, F::of(cfg.iou_loss_weight));
    let ab = tp.add(a, b)?;
    let total = tp.add(ab, c)?;
    let comps = LossComponents {
        dice: tp.scalar(dice).f64(),
        ce: tp.scalar(ce).f64(),
        iou: tp.scalar(iou).f64(),
        total: tp.scalar(total).f64(),
    };
    Ok((total, comps))
}

/// Binary entropy of `σ(x)` in nats, computed stably.
pub fn pixel_entropy(x: f64) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    let ls = |v: f64| v.min(0.0) - (-v.abs()).exp().ln_1p();
    let h = -(p * ls(x) + (1.0 - p) * ls(-x));
    h.clamp(0.0, std::f64::consts::LN_2)
}

/// Indices of the `⌈q·n⌉` lowest-entropy pixels, ties broken by index.
pub fn confident_pixels<F: Float>(logits: &Tensor<F>, q: f64) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Validation(format!("confidence percentile {q} outside (0, 1]")));
    }
    let n = logits.numel();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    let h: Vec<f64> = logits.data().iter().map(|x| pixel_entropy(x.f64())).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| h[a].total_cmp(&h[b]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Mean entropy over the confident pixels; the selection is fixed for this
/// evaluation and carries no gradient.
pub fn binary_entropy_loss<F: Float>(tp: &mut Tape<F>, logits: Var, q: f64) -> Result<Var> {
    let chosen = confident_pixels(tp.value(logits), q)?;
    let mut sel = Tensor::zeros(tp.shape(logits));
    for &i in &chosen {
        sel.data_mut()[i] = F::one();
    }
    let p = tp.sigmoid(logits);
    let lp = tp.log_sigmoid(logits);
    let nl = tp.neg(logits);
    let np = tp.sigmoid(nl);
    let lnp = tp.log_sigmoid(nl);
    let a = tp.mul(p, lp)?;
    let b = tp.mul(np, lnp)?;
    let h = tp.add(a, b)?;
    let m = tp.constant(sel);
    let hm = tp.mul(h, m)?;
    let s = tp.sum(hm);
    Ok(tp.scale(s, F::of(-1.0 / chosen.len() as f64)))
}

/// Mean entropy of the confident pixels of a fixed logit map.
pub fn confident_entropy<F: Float>(logits: &Tensor<F>, q: f64) -> Result<f64> {
    let chosen = confident_pixels(logits, q)?;
    let d = logits.data();
    Ok(chosen.iter().map(|&i| pixel_entropy(d[i].f64())).sum::<f64>() / chosen.len() as f64)
}

/// Focal plus dice loss against the snapshot binarized at probability 0.5.
pub fn proximity_reg<F: Float>(tp: &mut Tape<F>, logits: Var, snapshot: &Tensor<F>, cfg: &LossConfig) -> Result<Var> {
    check_target(tp, logits, snapshot, "proximity_reg")?;
    let pseudo = snapshot.map(|x| if x > F::zero() { F::one() } else { F::zero() });
    let f = focal_loss(tp, logits, &pseudo, cfg.focal_gamma)?;
    let d = dice_loss(tp, logits, &pseudo, cfg.dice_smooth)?;
    tp.add(f, d)
}

/// Column mean of an `[M × D]` embedding, `[1 × D]`.
pub fn mean_pool<F: Float>(tp: &mut Tape<F>, x: Var) -> Result<Var> {
    let m = tp.shape(x)[0];
    let ones = tp.constant(Tensor::full(&[1, m], F::of(1.0 / m as f64)));
    tp.matmul(ones, x)
}

fn l2_normalize<F: Float>(tp: &mut Tape<F>, x: Var) -> Result<Var> {
    let sq = tp.square(x)?;
    let n2 = tp.sum(sq);
    if tp.scalar(n2) == F::zero() {
        return Err(Error::Validation("cannot normalize a zero-norm embedding".into()));
    }
    let n = tp.sqrt(n2);
    tp.div(x, n)
}

/// InfoNCE over L2-normalized embeddings:
/// `−log(exp(a·p/τ) / (exp(a·p/τ) + Σ exp(a·nᵢ/τ)))`.
pub fn slice_contrastive_loss<F: Float>(
    tp: &mut Tape<F>,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    temperature: f64,
) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Validation("contrastive loss needs at least one negative".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Validation(format!("temperature {temperature} must be > 0")));
    }
    let a = l2_normalize(tp, anchor)?;
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    for &other in std::iter::once(&positive).chain(negatives) {
        if tp.shape(other) != tp.shape(a) {
            return Err(Error::dim("slice_contrastive_loss", tp.shape(a), tp.shape(other)));
        }
        let o = l2_normalize(tp, other)?;
        let prod = tp.mul(a, o)?;
        let s = tp.sum(prod);
        sims.push(tp.scale(s, F::of(1.0 / temperature)));
    }
    // Cosine similarities are bounded, so 1/τ bounds the exponent.
    let mut den = tp.exp(sims[0]);
    for &s in &sims[1..] {
        let e = tp.exp(s);
        den = tp.add(den, e)?;
    }
    let lse = tp.log(den);
    tp.sub(lse, sims[0])
}
