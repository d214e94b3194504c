use serde::{Deserialize, Serialize};

use crate::error::{Result, TabError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckKind {
    /// One gated, skip-free co-attention head.
    Tab,
    /// Standard multi-head cross-attention with its residual path.
    MhsaBaseline,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub ffn_mult: usize,
    /// Single-image encoder.
    pub enc_layers: usize,
    pub enc_heads: usize,
    /// Cross encoder over the concatenated pair.
    pub cross_layers: usize,
    pub cross_heads: usize,
    /// Language model consuming the two bottleneck vectors.
    pub lm_enc_layers: usize,
    pub lm_dec_layers: usize,
    pub lm_heads: usize,
    /// Text tower used for retrieval alignment.
    pub text_layers: usize,
    pub text_heads: usize,
    pub proj_dim: usize,
    pub bottleneck: BottleneckKind,
    /// Heads of the baseline bottleneck (ignored for TAB, which has one).
    pub baseline_heads: usize,
    pub max_caption_len: usize,
    pub vocab_size: usize,
    /// Reuse the key projection for values.
    pub share_kv: bool,
    /// Feed each image's cross-encoder input with `f^q + (f^q − f^k)`, its
    /// position-wise difference to the other image added.
    pub pair_difference: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            image_size: 64,
            patch_size: 8,
            channels: 3,
            ffn_mult: 4,
            enc_layers: 2,
            enc_heads: 4,
            cross_layers: 1,
            cross_heads: 4,
            lm_enc_layers: 2,
            lm_dec_layers: 2,
            lm_heads: 4,
            text_layers: 2,
            text_heads: 4,
            proj_dim: 32,
            bottleneck: BottleneckKind::Tab,
            baseline_heads: 4,
            max_caption_len: 32,
            vocab_size: crate::synthdata::Vocab::build().len(),
            share_kv: false,
            pair_difference: true,
        }
    }
}

impl ModelConfig {
    pub fn patch_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count `n`; token sequences have `n + 1` entries.
    pub fn num_patches(&self) -> usize {
        self.patch_grid() * self.patch_grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TabError::Config(msg));
        if self.d_model == 0 || self.patch_size == 0 || self.proj_dim == 0 {
            return bad("zero-sized dimension".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!("image size {} not divisible by patch {}", self.image_size, self.patch_size));
        }
        for (name, h) in [
            ("enc_heads", self.enc_heads),
            ("cross_heads", self.cross_heads),
            ("lm_heads", self.lm_heads),
            ("text_heads", self.text_heads),
            ("baseline_heads", self.baseline_heads),
        ] {
            if h == 0 || self.d_model % h != 0 {
                return bad(format!("d_model {} not divisible by {name} = {h}", self.d_model));
            }
        }
        if self.max_caption_len == 0 || self.vocab_size < 4 {
            return bad("caption length and vocabulary must be non-trivial".into());
        }
        Ok(())
    }
}
