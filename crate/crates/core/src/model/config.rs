use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the promptable segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    /// Decoder width, the dense-embedding dimension `D_t`.
    pub dec_dim: usize,
    /// Number of two-way attention layers.
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub num_mask_tokens: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            enc_dim: 128,
            enc_depth: 6,
            enc_heads: 4,
            dec_dim: 64,
            dec_depth: 2,
            dec_heads: 2,
            num_mask_tokens: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            enc_dim: 8,
            enc_depth: 2,
            enc_heads: 2,
            dec_dim: 8,
            dec_depth: 2,
            dec_heads: 2,
            num_mask_tokens: 1,
            seed: 0,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of dense tokens `M`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Number of 2× upsampling stages between the patch grid and pixels.
    pub fn upsample_stages(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.patch_size == 0 || self.image_size == 0 {
            return bad("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.patch_size.is_power_of_two() {
            return bad(format!("patch_size {} must be a power of two", self.patch_size));
        }
        if self.enc_heads == 0 || self.enc_dim % self.enc_heads != 0 {
            return bad(format!("enc_dim {} not divisible by enc_heads {}", self.enc_dim, self.enc_heads));
        }
        if self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            return bad(format!("dec_dim {} not divisible by dec_heads {}", self.dec_dim, self.dec_heads));
        }
        if self.dec_depth == 0 || self.enc_depth == 0 {
            return bad("encoder and decoder need at least one block".into());
        }
        if self.dec_dim % 4 != 0 {
            return bad(format!("dec_dim {} must be a multiple of 4", self.dec_dim));
        }
        let stages = self.upsample_stages();
        if self.dec_dim >> stages == 0 || self.dec_dim % (1 << stages) != 0 {
            return bad(format!(
                "dec_dim {} cannot be halved {stages} times for upsampling",
                self.dec_dim
            ));
        }
        if self.num_mask_tokens != 1 {
            return bad("only a single mask output is supported".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 64);
        assert_eq!(c.upsample_stages(), 3);
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let mut c = ModelConfig { image_size: 60, ..Default::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { enc_heads: 3, ..Default::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { dec_depth: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { num_mask_tokens: 3, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
