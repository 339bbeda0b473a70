use crate::adapter::AdapterLayer;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Float;

use super::config::ModelConfig;
use super::layers::{Activation, Attention, LayerNorm, Linear, Mlp};

/// Token and dense streams flowing through the two-way layers.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    /// `[2 + P × D_t]`: mask token, IoU token, prompt tokens.
    pub tokens: Var,
    /// `[M × D_t]` dense embeddings `T_ℓ`.
    pub dense: Var,
}

/// Post-norm two-way attention block. The dense output of the
/// image→token cross-attention is where an attached adapter rewrites `T_ℓ`.
#[derive(Clone, Debug)]
pub struct TwoWayLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_t2i: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
    pub cross_i2t: Attention,
    pub norm4: LayerNorm,
    pub adapter: Option<AdapterLayer>,
}

impl TwoWayLayer {
    fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(TwoWayLayer {
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            cross_t2i: Attention::new(store, &format!("{name}.cross_t2i"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 4 * dim, dim, Activation::Relu)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim)?,
            cross_i2t: Attention::new(store, &format!("{name}.cross_i2t"), dim, heads)?,
            norm4: LayerNorm::new(store, &format!("{name}.norm4"), dim)?,
            adapter: None,
        })
    }

    /// `token_pe` is added to token queries/keys, `dense_pe` to dense ones.
    pub fn forward<F: Float>(
        &self,
        tp: &mut Tape<F>,
        st: DecoderState,
        token_pe: Var,
        dense_pe: Var,
    ) -> Result<DecoderState> {
        let DecoderState { tokens, dense } = st;

        let q = tp.add(tokens, token_pe)?;
        let a = self.self_attn.forward(tp, q, q, tokens)?;
        let t = tp.add(tokens, a)?;
        let tokens = self.norm1.forward(tp, t)?;

        let q = tp.add(tokens, token_pe)?;
        let k = tp.add(dense, dense_pe)?;
        let a = self.cross_t2i.forward(tp, q, k, dense)?;
        let t = tp.add(tokens, a)?;
        let tokens = self.norm2.forward(tp, t)?;

        let m = self.mlp.forward(tp, tokens)?;
        let t = tp.add(tokens, m)?;
        let tokens = self.norm3.forward(tp, t)?;

        let q = tp.add(dense, dense_pe)?;
        let k = tp.add(tokens, token_pe)?;
        let a = self.cross_i2t.forward(tp, q, k, tokens)?;
        let d = tp.add(dense, a)?;
        let mut dense = self.norm4.forward(tp, d)?;

        if let Some(ad) = &self.adapter {
            dense = ad.apply(tp, dense)?;
        }
        Ok(DecoderState { tokens, dense })
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub mask_token: ParamId,
    pub iou_token: ParamId,
    pub layers: Vec<TwoWayLayer>,
    pub final_attn: Attention,
    pub final_norm: LayerNorm,
    /// One `c → 2c` projection per 2× upsampling stage.
    pub upsample: Vec<Linear>,
    pub hyper: Mlp,
    pub iou_head: Mlp,
    grid: usize,
}

/// Raw decoder outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `[S × S]` mask logits.
    pub logits: Var,
    /// `[1 × 1]` IoU prediction after the sigmoid.
    pub iou: Var,
    /// Final `[M × D_t]` dense embeddings.
    pub dense: Var,
}

impl MaskDecoder {
    pub fn new<F: Float>(store: &mut ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dec_dim;
        let layers = (0..cfg.dec_depth)
            .map(|i| TwoWayLayer::new(store, &format!("decoder.layers.{i}"), d, cfg.dec_heads))
            .collect::<Result<_>>()?;
        let mut upsample = Vec::new();
        let mut c = d;
        for i in 0..cfg.upsample_stages() {
            upsample.push(Linear::new(store, &format!("decoder.upsample.{i}"), c, 2 * c)?);
            c /= 2;
        }
        Ok(MaskDecoder {
            mask_token: store.register("decoder.mask_token", &[1, d], Init::Normal(1.0))?,
            iou_token: store.register("decoder.iou_token", &[1, d], Init::Normal(1.0))?,
            layers,
            final_attn: Attention::new(store, "decoder.final_attn", d, cfg.dec_heads)?,
            final_norm: LayerNorm::new(store, "decoder.final_norm", d)?,
            upsample,
            hyper: Mlp::new(store, "decoder.hyper", d, d, c, Activation::Relu)?,
            iou_head: Mlp::new(store, "decoder.iou_head", d, d, 1, Activation::Relu)?,
            grid: cfg.grid(),
        })
    }

    /// Runs the two-way layers, the mask head and the IoU head.
    ///
    /// `dense` is the `[M × D_t]` image embedding, `prompts` the `[P × D_t]`
    /// prompt tokens, `dense_pe` the constant positional encoding of the grid.
    pub fn forward<F: Float>(&self, tp: &mut Tape<F>, dense: Var, prompts: Var, dense_pe: Var) -> Result<DecoderOutput> {
        let mt = tp.param(self.mask_token);
        let it = tp.param(self.iou_token);
        let tokens = tp.concat_rows(&[mt, it, prompts])?;
        let token_pe = tokens;
        let mut st = DecoderState { tokens, dense };
        for layer in &self.layers {
            st = layer.forward(tp, st, token_pe, dense_pe)?;
        }

        let q = tp.add(st.tokens, token_pe)?;
        let k = tp.add(st.dense, dense_pe)?;
        let a = self.final_attn.forward(tp, q, k, st.dense)?;
        let t = tp.add(st.tokens, a)?;
        let tokens = self.final_norm.forward(tp, t)?;

        let mut feat = st.dense;
        let mut side = self.grid;
        for lin in &self.upsample {
            let h = lin.forward(tp, feat)?;
            let c2 = lin.d_out;
            let idx = pixel_shuffle_index(side, c2);
            side *= 2;
            let h = tp.gather(h, idx, &[side * side, c2 / 4])?;
            feat = tp.gelu(h);
        }

        let mask_tok = tp.slice_rows(tokens, 0, 1)?;
        let iou_tok = tp.slice_rows(tokens, 1, 1)?;
        let w = self.hyper.forward(tp, mask_tok)?;
        let logits = tp.matmul_nt(feat, w)?;
        let logits = tp.reshape(logits, &[side, side])?;
        let iou = self.iou_head.forward(tp, iou_tok)?;
        let iou = tp.sigmoid(iou);
        Ok(DecoderOutput {
            logits,
            iou,
            dense: st.dense,
        })
    }
}

/// Gather indices turning `[side² × c]` grid features into
/// `[(2·side)² × c/4]`: channel block `k = 2a + b` of token `(i, j)` becomes
/// pixel `(2i + a, 2j + b)`.
pub fn pixel_shuffle_index(side: usize, c: usize) -> Vec<usize> {
    let cq = c / 4;
    let out_side = 2 * side;
    let mut idx = Vec::with_capacity(out_side * out_side * cq);
    for r in 0..out_side {
        for col in 0..out_side {
            let (i, a) = (r / 2, r % 2);
            let (j, b) = (col / 2, col % 2);
            let base = (i * side + j) * c + (2 * a + b) * cq;
            idx.extend(base..base + cq);
        }
    }
    idx
}
