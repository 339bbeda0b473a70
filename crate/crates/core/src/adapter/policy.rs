use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SamModel};
use crate::params::ParamStore;
use crate::tensor::Float;

use super::{attach_decoder_adapter, attach_encoder_adapter, attach_lora, AdapterConfig, LoraConfig, Placement};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FullFt,
    DecoderFt,
    Lora,
    SamDaDec,
    SamDaEnc,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::FullFt,
        Method::DecoderFt,
        Method::Lora,
        Method::SamDaDec,
        Method::SamDaEnc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FullFt => "full_ft",
            Method::DecoderFt => "decoder_ft",
            Method::Lora => "lora",
            Method::SamDaDec => "sam_da_dec",
            Method::SamDaEnc => "sam_da_enc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown method `{s}`")))
    }
}

/// Which parameters a method trains, decided by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezePolicy {
    pub method: Method,
}

impl FreezePolicy {
    pub fn new(method: Method) -> Self {
        FreezePolicy { method }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        let dec = name.starts_with("decoder.");
        match self.method {
            Method::FullFt => true,
            Method::DecoderFt => dec,
            Method::Lora => dec || name.starts_with("lora."),
            Method::SamDaDec => name.starts_with("adapter.decoder."),
            Method::SamDaEnc => dec || name.starts_with("adapter.encoder."),
        }
    }

    pub fn apply<F: Float>(&self, store: &mut ParamStore<F>) {
        store.set_trainable(|n| self.is_trainable(n));
    }
}

/// Attaches whatever `method` needs to a base model and applies its policy.
pub fn prepare_method<F: Float>(
    model: &mut SamModel<F>,
    method: Method,
    adapter: &AdapterConfig,
    lora: &LoraConfig,
) -> Result<()> {
    match method {
        Method::FullFt | Method::DecoderFt => {}
        Method::Lora => attach_lora(model, lora)?,
        Method::SamDaDec => attach_decoder_adapter(
            model,
            &AdapterConfig {
                placement: Placement::Decoder,
                ..adapter.clone()
            },
        )?,
        Method::SamDaEnc => attach_encoder_adapter(
            model,
            &AdapterConfig {
                placement: Placement::Encoder,
                ..adapter.clone()
            },
        )?,
    }
    FreezePolicy::new(method).apply(&mut model.store);
    Ok(())
}

/// Trainable and total parameter counts of every method on `model_cfg`.
pub fn method_param_counts(
    model_cfg: &ModelConfig,
    adapter: &AdapterConfig,
    lora: &LoraConfig,
) -> Result<Vec<(Method, usize, usize)>> {
    Method::ALL
        .iter()
        .map(|&m| {
            let mut model = SamModel::<f32>::new(model_cfg)?;
            prepare_method(&mut model, m, adapter, lora)?;
            Ok((m, model.store.param_count(true), model.store.param_count(false)))
        })
        .collect()
}
