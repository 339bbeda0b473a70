use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Negative,
    Positive,
}

impl PointLabel {
    fn index(self) -> usize {
        match self {
            PointLabel::Negative => 0,
            PointLabel::Positive => 1,
        }
    }
}

/// Pixel coordinates, `x` along columns and `y` along rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub points: Vec<PointPrompt>,
}

impl PromptSet {
    pub fn positive(x: f64, y: f64) -> Self {
        PromptSet {
            points: vec![PointPrompt {
                x,
                y,
                label: PointLabel::Positive,
            }],
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Validation("prompt set has no points".into()));
        }
        let hi = image_size as f64;
        for p in &self.points {
            let inside = |v: f64| v.is_finite() && (0.0..hi).contains(&v);
            if !inside(p.x) || !inside(p.y) {
                return Err(Error::Validation(format!(
                    "point ({}, {}) outside the {image_size}×{image_size} image",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

/// Fixed sinusoidal encoding of a normalized `(u, v) ∈ [0,1]²` location:
/// `[sin(2πf·u) | cos(2πf·u) | sin(2πf·v) | cos(2πf·v)]` over `dim/4`
/// geometrically spaced frequencies from 0.5 to 8 cycles.
pub fn sinusoid(u: f64, v: f64, dim: usize) -> Vec<f64> {
    let nf = dim / 4;
    let freqs: Vec<f64> = (0..nf)
        .map(|i| {
            let t = if nf > 1 { i as f64 / (nf - 1) as f64 } else { 0.0 };
            0.5 * 16f64.powf(t)
        })
        .collect();
    let mut out = Vec::with_capacity(dim);
    for c in [u, v] {
        out.extend(freqs.iter().map(|f| (2.0 * PI * f * c).sin()));
        out.extend(freqs.iter().map(|f| (2.0 * PI * f * c).cos()));
    }
    out
}

/// Positional encoding of every patch center, `[M × D_t]` in grid order.
pub fn dense_positional_encoding<F: Float>(cfg: &ModelConfig) -> Tensor<F> {
    let g = cfg.grid();
    let mut data = Vec::with_capacity(g * g * cfg.dec_dim);
    for i in 0..g {
        for j in 0..g {
            let u = (j as f64 + 0.5) / g as f64;
            let v = (i as f64 + 0.5) / g as f64;
            data.extend(sinusoid(u, v, cfg.dec_dim).into_iter().map(F::of));
        }
    }
    Tensor::new(vec![g * g, cfg.dec_dim], data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub label_embed: ParamId,
    image_size: usize,
    dim: usize,
}

impl PromptEncoder {
    pub fn new<F: Float>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        Ok(PromptEncoder {
            label_embed: store.register("prompt.label_embed", &[2, cfg.dec_dim], Init::Normal(1.0))?,
            image_size: cfg.image_size,
            dim: cfg.dec_dim,
        })
    }

    /// Positional part of the prompt tokens, `[P × D_t]`.
    pub fn positional<F: Float>(&self, prompts: &PromptSet) -> Result<Tensor<F>> {
        prompts.validate(self.image_size)?;
        let s = self.image_size as f64;
        let data = prompts
            .points
            .iter()
            .flat_map(|p| sinusoid((p.x + 0.5) / s, (p.y + 0.5) / s, self.dim))
            .map(F::of)
            .collect();
        Tensor::new(vec![prompts.points.len(), self.dim], data)
    }

    /// One token per point: positional encoding plus the label embedding.
    pub fn forward<F: Float>(&self, tp: &mut Tape<F>, prompts: &PromptSet) -> Result<Var> {
        let pe = self.positional(prompts)?;
        let table = tp.param(self.label_embed);
        let rows = prompts
            .points
            .iter()
            .map(|p| tp.slice_rows(table, p.label.index(), 1))
            .collect::<Result<Vec<_>>>()?;
        let labels = if rows.len() == 1 { rows[0] } else { tp.concat_rows(&rows)? };
        let pe = tp.constant(pe);
        tp.add(pe, labels)
    }
}
