//! Small promptable segmenter: patch transformer encoder, point-prompt
//! encoder and a two-way attention mask decoder with an IoU head.

mod config;
pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod prompt;

pub use config::ModelConfig;
pub use decoder::{DecoderOutput, DecoderState, MaskDecoder, TwoWayLayer};
pub use encoder::{EncoderBlock, ImageEncoder};
pub use prompt::{PointLabel, PointPrompt, PromptEncoder, PromptSet};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

/// Output of the image encoder for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding<F> {
    /// `[M × D_t]`.
    pub grid: Tensor<F>,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction<F> {
    /// `[S × S]` per-pixel logits.
    pub logits: Tensor<F>,
    pub iou_pred: f64,
}

/// Model weights plus the module structure that addresses them.
#[derive(Clone, Debug)]
pub struct SamModel<F> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub encoder: ImageEncoder,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
    dense_pe: Tensor<F>,
}

impl<F: Float> SamModel<F> {
    /// Builds and initializes a model from `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = ImageEncoder::new(&mut store, cfg)?;
        let prompt = PromptEncoder::new(&mut store, cfg)?;
        let decoder = MaskDecoder::new(&mut store, cfg)?;
        store.initialize(cfg.seed);
        Ok(SamModel {
            cfg: cfg.clone(),
            store,
            encoder,
            prompt,
            decoder,
            dense_pe: prompt::dense_positional_encoding(cfg),
        })
    }

    /// Draws values for parameters registered since the last initialization
    /// (adapters, LoRA deltas).
    pub fn initialize_new(&mut self, seed: u64) {
        self.store.initialize(seed);
    }

    pub fn has_encoder_adapters(&self) -> bool {
        self.encoder.blocks.iter().any(|b| b.adapter.is_some())
    }

    pub fn has_decoder_adapters(&self) -> bool {
        self.decoder.layers.iter().any(|l| l.adapter.is_some())
    }

    pub fn has_lora(&self) -> bool {
        self.encoder
            .blocks
            .iter()
            .any(|b| b.attn.linears().iter().any(|l| l.lora.is_some()))
    }

    /// True when no encoder parameter can receive a gradient, so image
    /// embeddings may be computed once and reused.
    pub fn encoder_frozen(&self) -> bool {
        !self
            .store
            .iter()
            .any(|(_, p)| p.trainable && (p.name.starts_with("encoder.") || p.name.starts_with("adapter.encoder.") || p.name.starts_with("lora.")))
    }

    /// Encoder forward on a tape, `[M × D_t]`.
    pub fn encode(&self, tp: &mut Tape<F>, image: &Tensor<F>) -> Result<Var> {
        self.encoder.forward(tp, image)
    }

    pub fn encode_image(&self, image: &Tensor<F>) -> Result<ImageEmbedding<F>> {
        let mut tp = Tape::new(&self.store);
        let v = self.encode(&mut tp, image)?;
        let g = self.cfg.grid();
        Ok(ImageEmbedding {
            grid: tp.value(v).clone(),
            h: g,
            w: g,
        })
    }

    pub fn encode_prompts(&self, tp: &mut Tape<F>, prompts: &PromptSet) -> Result<Var> {
        self.prompt.forward(tp, prompts)
    }

    /// Decoder forward from a dense embedding already on the tape.
    pub fn decode(&self, tp: &mut Tape<F>, dense: Var, prompts: &PromptSet) -> Result<DecoderOutput> {
        let want = [self.cfg.num_patches(), self.cfg.dec_dim];
        if tp.shape(dense) != want {
            return Err(Error::dim("decode_masks", tp.shape(dense), &want));
        }
        let pt = self.encode_prompts(tp, prompts)?;
        let pe = tp.constant(self.dense_pe.clone());
        self.decoder.forward(tp, dense, pt, pe)
    }

    /// Decoder forward from a cached embedding (treated as a constant).
    pub fn decode_embedding(&self, tp: &mut Tape<F>, emb: &ImageEmbedding<F>, prompts: &PromptSet) -> Result<DecoderOutput> {
        let dense = tp.constant(emb.grid.clone());
        self.decode(tp, dense, prompts)
    }

    /// Full forward on a tape.
    pub fn forward(&self, tp: &mut Tape<F>, image: &Tensor<F>, prompts: &PromptSet) -> Result<DecoderOutput> {
        let dense = self.encode(tp, image)?;
        self.decode(tp, dense, prompts)
    }

    pub fn predict(&self, image: &Tensor<F>, prompts: &PromptSet) -> Result<MaskPrediction<F>> {
        let mut tp = Tape::new(&self.store);
        let out = self.forward(&mut tp, image, prompts)?;
        Ok(read_prediction(&tp, &out))
    }

    pub fn predict_from_embedding(&self, emb: &ImageEmbedding<F>, prompts: &PromptSet) -> Result<MaskPrediction<F>> {
        let mut tp = Tape::new(&self.store);
        let out = self.decode_embedding(&mut tp, emb, prompts)?;
        Ok(read_prediction(&tp, &out))
    }

    /// Predicts each `(image, prompts)` pair independently.
    pub fn predict_batch(&self, batch: &[(Tensor<F>, PromptSet)]) -> Result<Vec<MaskPrediction<F>>> {
        batch.iter().map(|(i, p)| self.predict(i, p)).collect()
    }
}

pub fn read_prediction<F: Float>(tp: &Tape<F>, out: &DecoderOutput) -> MaskPrediction<F> {
    MaskPrediction {
        logits: tp.value(out.logits).clone(),
        iou_pred: tp.scalar(out.iou).f64(),
    }
}
