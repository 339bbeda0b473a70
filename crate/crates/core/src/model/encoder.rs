use crate::adapter::AdapterLayer;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

use super::config::ModelConfig;
use super::layers::{Activation, Attention, LayerNorm, Linear, Mlp};

const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

/// Pre-norm transformer block with an optional adapter on its output.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub adapter: Option<AdapterLayer>,
}

impl EncoderBlock {
    fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(EncoderBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 4 * dim, dim, Activation::Gelu)?,
            adapter: None,
        })
    }

    pub fn forward<F: Float>(&self, tp: &mut Tape<F>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tp, x)?;
        let h = self.attn.forward(tp, h, h, h)?;
        let x = tp.add(x, h)?;
        let h = self.norm2.forward(tp, x)?;
        let h = self.mlp.forward(tp, h)?;
        let x = tp.add(x, h)?;
        match &self.adapter {
            Some(a) => a.apply(tp, x),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub neck: Linear,
    image_size: usize,
    patch_size: usize,
}

impl ImageEncoder {
    pub fn new<F: Float>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        let p2 = cfg.patch_size * cfg.patch_size;
        let blocks = (0..cfg.enc_depth)
            .map(|i| EncoderBlock::new(store, &format!("encoder.blocks.{i}"), cfg.enc_dim, cfg.enc_heads))
            .collect::<Result<_>>()?;
        Ok(ImageEncoder {
            patch_embed: Linear::new(store, "encoder.patch_embed", p2, cfg.enc_dim)?,
            pos_embed: store.register("encoder.pos_embed", &[cfg.num_patches(), cfg.enc_dim], Init::Normal(0.02))?,
            blocks,
            norm: LayerNorm::new(store, "encoder.norm", cfg.enc_dim)?,
            neck: Linear::new(store, "encoder.neck", cfg.enc_dim, cfg.dec_dim)?,
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
        })
    }

    /// Rearranges a normalized `[H×W]` image into `[M × p²]` patch rows,
    /// patches in row-major grid order.
    pub fn patchify<F: Float>(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let s = self.image_size;
        if image.shape() != [s, s] {
            return Err(Error::dim("encode_image", image.shape(), &[s, s]));
        }
        let p = self.patch_size;
        let g = s / p;
        let src = image.data();
        let (mean, std) = (F::of(PIXEL_MEAN), F::of(PIXEL_STD));
        let mut out = Vec::with_capacity(s * s);
        for gi in 0..g {
            for gj in 0..g {
                for a in 0..p {
                    let row = (gi * p + a) * s + gj * p;
                    out.extend(src[row..row + p].iter().map(|&x| (x - mean) / std));
                }
            }
        }
        Tensor::new(vec![g * g, p * p], out)
    }

    /// Patch tokens after embedding and positional encoding, before any block.
    pub fn embed_patches<F: Float>(&self, tp: &mut Tape<F>, image: &Tensor<F>) -> Result<Var> {
        let patches = tp.constant(self.patchify(image)?);
        let x = self.patch_embed.forward(tp, patches)?;
        let pos = tp.param(self.pos_embed);
        tp.add(x, pos)
    }

    /// `[M × D_t]` dense embedding.
    pub fn forward<F: Float>(&self, tp: &mut Tape<F>, image: &Tensor<F>) -> Result<Var> {
        let mut x = self.embed_patches(tp, image)?;
        for b in &self.blocks {
            x = b.forward(tp, x)?;
        }
        let x = self.norm.forward(tp, x)?;
        self.neck.forward(tp, x)
    }
}
