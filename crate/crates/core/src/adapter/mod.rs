//! Zero-gated prompt adapters, LoRA deltas and per-method freeze policies.
//!
//! An adapter layer holds learnable prompts `A` (`N × D_a`), a scalar gate
//! `g` and five linear maps. Given dense embeddings `T` (`M × D_t`):
//!
//! ```text
//! Q = W_q(T)   K = W_k(A)   V = W_v(A)
//! S = softmax(Q Kᵀ / √D_v) V
//! T' = W_t(T + g · W_o(S))
//! ```
//!
//! `g` starts at zero and `W_t` at the identity, so attaching an adapter does
//! not change the model's output until training moves the gate.

mod lora;
mod policy;

pub use lora::{attach_lora, LoraConfig, LoraTarget};
pub use policy::{method_param_counts, prepare_method, FreezePolicy, Method};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::layers::Linear;
use crate::model::{ModelConfig, SamModel};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Decoder,
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// Number of prompt vectors `N`.
    pub n_prompts: usize,
    /// Prompt width `D_a`.
    pub d_a: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub placement: Placement,
    /// How many trailing encoder blocks receive an adapter; `None` means
    /// `⌈5/6 · enc_depth⌉`.
    pub encoder_adapted_blocks: Option<usize>,
    /// Standard deviation of the prompt initialization.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for AdapterConfig {
    /// Sized for the default toy model (`D_t = 64`).
    fn default() -> Self {
        AdapterConfig {
            n_prompts: 2,
            d_a: 128,
            d_k: 64,
            d_v: 64,
            placement: Placement::Decoder,
            encoder_adapted_blocks: None,
            init_scale: 0.02,
            seed: 0,
        }
    }
}

impl AdapterConfig {
    /// Dimensions used with a full-size decoder: `N = 2`, `D_a = 512`,
    /// `D_k = D_v = 256`.
    pub fn full_scale() -> Self {
        AdapterConfig {
            d_a: 512,
            d_k: 256,
            d_v: 256,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_prompts == 0 || self.d_a == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(Error::Validation(format!(
                "adapter dimensions must be positive (N={}, D_a={}, D_k={}, D_v={})",
                self.n_prompts, self.d_a, self.d_k, self.d_v
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Validation(format!("init_scale {} must be ≥ 0", self.init_scale)));
        }
        Ok(())
    }

    pub fn adapted_encoder_blocks(&self, enc_depth: usize) -> Result<usize> {
        let n = self.encoder_adapted_blocks.unwrap_or((5 * enc_depth).div_ceil(6));
        if n > enc_depth {
            return Err(Error::Validation(format!(
                "encoder_adapted_blocks {n} exceeds enc_depth {enc_depth}"
            )));
        }
        Ok(n)
    }

    /// Width of the embeddings the adapter reads and writes, and the number
    /// of adapted layers, for this placement.
    pub fn target(&self, model: &ModelConfig) -> Result<(usize, usize)> {
        match self.placement {
            Placement::Decoder => Ok((model.dec_dim, model.dec_depth)),
            Placement::Encoder => Ok((model.enc_dim, self.adapted_encoder_blocks(model.enc_depth)?)),
        }
    }
}

/// Closed-form parameter count of one adapter layer over `d_t`-wide embeddings.
pub fn adapter_layer_param_count(cfg: &AdapterConfig, d_t: usize) -> usize {
    let (n, da, dk, dv) = (cfg.n_prompts, cfg.d_a, cfg.d_k, cfg.d_v);
    n * da + 1 + (d_t * dk + dk) + (da * dk + dk) + (da * dv + dv) + (dv * d_t + d_t) + (d_t * d_t + d_t)
}

/// Closed-form count of every adapter parameter `cfg` adds to `model`.
pub fn adapter_param_count(cfg: &AdapterConfig, model: &ModelConfig) -> Result<usize> {
    let (d_t, layers) = cfg.target(model)?;
    Ok(adapter_layer_param_count(cfg, d_t) * layers)
}

/// Registers `layers` adapter layers over `d_t`-wide embeddings in an empty
/// registry and counts what was registered.
pub fn registry_adapter_count(cfg: &AdapterConfig, d_t: usize, layers: usize) -> Result<usize> {
    let mut store = ParamStore::<f32>::new();
    for i in 0..layers {
        AdapterLayer::new(&mut store, &format!("adapter.count.{i}"), cfg, d_t)?;
    }
    Ok(store.param_count(false))
}

/// Parameters of one adapter layer.
#[derive(Clone, Debug)]
pub struct AdapterLayer {
    /// `A`, `[N × D_a]`.
    pub prompt: ParamId,
    /// `g`, a single element.
    pub gate: ParamId,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub t: Linear,
    pub d_v: usize,
}

impl AdapterLayer {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, cfg: &AdapterConfig, d_t: usize) -> Result<Self> {
        cfg.validate()?;
        let l = |s: &mut ParamStore<F>, part: &str, i, o| Linear::new(s, &format!("{name}.{part}"), i, o);
        Ok(AdapterLayer {
            prompt: store.register(&format!("{name}.prompt"), &[cfg.n_prompts, cfg.d_a], Init::Normal(cfg.init_scale))?,
            gate: store.register(&format!("{name}.gate"), &[1], Init::Zeros)?,
            q: l(store, "q", d_t, cfg.d_k)?,
            k: l(store, "k", cfg.d_a, cfg.d_k)?,
            v: l(store, "v", cfg.d_a, cfg.d_v)?,
            o: l(store, "o", cfg.d_v, d_t)?,
            t: Linear::with_init(store, &format!("{name}.t"), d_t, d_t, Init::Identity, Init::Zeros)?,
            d_v: cfg.d_v,
        })
    }

    /// `W_o(softmax(W_q(T) W_k(A)ᵀ / √D_v) W_v(A))`, `[M × D_t]`.
    pub fn attention<F: Float>(&self, tp: &mut Tape<F>, t: Var) -> Result<Var> {
        if tp.shape(t).len() != 2 || tp.shape(t)[1] != self.q.d_in {
            return Err(Error::dim("adapter_attention", tp.shape(t), &[0, self.q.d_in]));
        }
        let a = tp.param(self.prompt);
        let q = self.q.forward(tp, t)?;
        let k = self.k.forward(tp, a)?;
        let v = self.v.forward(tp, a)?;
        let s = tp.matmul_nt(q, k)?;
        let s = tp.scale(s, F::of(1.0 / (self.d_v as f64).sqrt()));
        let w = tp.softmax(s, 1)?;
        let s = tp.matmul(w, v)?;
        self.o.forward(tp, s)
    }

    /// `W_t(T + g · attention(T))`.
    pub fn apply<F: Float>(&self, tp: &mut Tape<F>, t: Var) -> Result<Var> {
        let s = self.attention(tp, t)?;
        let g = tp.param(self.gate);
        let gs = tp.mul(g, s)?;
        let x = tp.add(t, gs)?;
        self.t.forward(tp, x)
    }
}

/// Adds one adapter per two-way decoder layer, on the dense stream.
pub fn attach_decoder_adapter<F: Float>(model: &mut SamModel<F>, cfg: &AdapterConfig) -> Result<()> {
    if cfg.placement != Placement::Decoder {
        return Err(Error::Validation("attach_decoder_adapter needs placement = decoder".into()));
    }
    cfg.validate()?;
    if model.has_decoder_adapters() {
        return Err(Error::Contract("decoder adapters are already attached".into()));
    }
    let d_t = model.cfg.dec_dim;
    for (i, layer) in model.decoder.layers.iter_mut().enumerate() {
        layer.adapter = Some(AdapterLayer::new(&mut model.store, &format!("adapter.decoder.{i}"), cfg, d_t)?);
    }
    model.initialize_new(cfg.seed);
    FreezePolicy::new(Method::SamDaDec).apply(&mut model.store);
    Ok(())
}

/// Adds adapters to the last `encoder_adapted_blocks` encoder blocks, applied
/// to each block's output tokens.
pub fn attach_encoder_adapter<F: Float>(model: &mut SamModel<F>, cfg: &AdapterConfig) -> Result<()> {
    if cfg.placement != Placement::Encoder {
        return Err(Error::Validation("attach_encoder_adapter needs placement = encoder".into()));
    }
    cfg.validate()?;
    let depth = model.cfg.enc_depth;
    let n = cfg.adapted_encoder_blocks(depth)?;
    if model.has_encoder_adapters() {
        return Err(Error::Contract("encoder adapters are already attached".into()));
    }
    let d = model.cfg.enc_dim;
    for i in depth - n..depth {
        let block = &mut model.encoder.blocks[i];
        block.adapter = Some(AdapterLayer::new(&mut model.store, &format!("adapter.encoder.{i}"), cfg, d)?);
    }
    model.initialize_new(cfg.seed);
    FreezePolicy::new(Method::SamDaEnc).apply(&mut model.store);
    Ok(())
}
