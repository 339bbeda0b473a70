use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::LoraDelta;
use crate::model::SamModel;
use crate::params::Init;
use crate::tensor::Float;

use super::{FreezePolicy, Method};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Deltas are scaled by `alpha / rank`; `None` means `2 · rank`.
    pub alpha: Option<f64>,
    pub targets: Vec<LoraTarget>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: None,
            targets: vec![LoraTarget::Query, LoraTarget::Value],
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha.unwrap_or(2.0 * self.rank as f64) / self.rank as f64
    }
}

/// Adds `scale · (x · down) · up` to each targeted projection of every
/// encoder block. `up` starts at zero so outputs are unchanged.
pub fn attach_lora<F: Float>(model: &mut SamModel<F>, cfg: &LoraConfig) -> Result<()> {
    if cfg.rank == 0 {
        return Err(Error::Validation("LoRA rank must be ≥ 1".into()));
    }
    if cfg.targets.is_empty() {
        return Err(Error::Validation("LoRA needs at least one target projection".into()));
    }
    if model.has_lora() {
        return Err(Error::Contract("LoRA deltas are already attached".into()));
    }
    let scale = cfg.scale();
    let mut targets = cfg.targets.clone();
    targets.sort_by_key(|t| *t as u8);
    targets.dedup();
    for block in &model.encoder.blocks {
        for lin in block.attn.linears() {
            if cfg.rank > lin.d_in.min(lin.d_out) {
                return Err(Error::Validation(format!(
                    "LoRA rank {} exceeds min dims of `{}` ({}×{})",
                    cfg.rank, lin.name, lin.d_in, lin.d_out
                )));
            }
        }
    }
    for block in &mut model.encoder.blocks {
        for &t in &targets {
            let lin = match t {
                LoraTarget::Query => &mut block.attn.q,
                LoraTarget::Key => &mut block.attn.k,
                LoraTarget::Value => &mut block.attn.v,
                LoraTarget::Output => &mut block.attn.o,
            };
            let base = format!("lora.{}", lin.name);
            lin.lora = Some(LoraDelta {
                down: model.store.register(&format!("{base}.down"), &[lin.d_in, cfg.rank], Init::FanIn)?,
                up: model.store.register(&format!("{base}.up"), &[cfg.rank, lin.d_out], Init::Zeros)?,
                rank: cfg.rank,
                scale,
            });
        }
    }
    model.initialize_new(cfg.seed);
    FreezePolicy::new(Method::Lora).apply(&mut model.store);
    Ok(())
}
