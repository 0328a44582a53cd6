use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::vocab::VocabLayout;

/// Backbone hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub patch_feature_dim: usize,
    pub n_patches: usize,
    pub max_text_len: usize,
    pub max_target_len: usize,
    pub dropout_rate: f64,
    /// Keep the patch projector frozen even under full fine-tuning.
    pub freeze_patch_projector: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let vocab = VocabLayout::default();
        Self {
            d_emb: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 128,
            vocab_size: vocab.size(),
            patch_feature_dim: vocab.patch_feature_dim(),
            n_patches: vocab.n_positions,
            max_text_len: 4,
            max_target_len: 2 * vocab.n_positions + 1,
            dropout_rate: 0.1,
            freeze_patch_projector: false,
        }
    }
}

/// Coarse parameter groups used by freeze policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TokenEmbedding,
    PatchProjector,
    Encoder,
    Decoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        if name == "token_embedding" {
            Some(ParamGroup::TokenEmbedding)
        } else if name.starts_with("patch_proj") {
            Some(ParamGroup::PatchProjector)
        } else if name.starts_with("enc.") {
            Some(ParamGroup::Encoder)
        } else if name.starts_with("dec.") {
            Some(ParamGroup::Decoder)
        } else {
            None
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::TokenEmbedding => "token_embedding",
            ParamGroup::PatchProjector => "patch_proj",
            ParamGroup::Encoder => "enc.",
            ParamGroup::Decoder => "dec.",
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_emb", self.d_emb),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("patch_feature_dim", self.patch_feature_dim),
            ("n_patches", self.n_patches),
            ("max_text_len", self.max_text_len),
            ("max_target_len", self.max_target_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_emb.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_emb ({}) must be divisible by n_heads ({})",
                self.d_emb, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "vocab_size must be at least 4 (pad, bos, eos, unk)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Rows of the encoder positional table: image patches then text tokens.
    pub fn encoder_positions(&self) -> usize {
        self.n_patches + self.max_text_len
    }

    /// Exact number of backbone parameters, group by group.
    pub fn backbone_params(&self) -> u64 {
        let d = self.d_emb as u64;
        let ff = self.d_ff as u64;
        let linear = |i: u64, o: u64| i * o + o;
        let norm = 2 * d;
        // the key projection has no bias
        let attn = 4 * linear(d, d) - d;
        let mlp = linear(d, ff) + linear(ff, d);
        let enc_layer = 2 * norm + attn + mlp;
        let dec_layer = 3 * norm + 2 * attn + mlp;
        self.vocab_size as u64 * d
            + self.patch_projector_params()
            + self.encoder_positions() as u64 * d
            + self.max_target_len as u64 * d
            + self.n_enc_layers as u64 * enc_layer
            + norm
            + self.n_dec_layers as u64 * dec_layer
            + norm
    }

    pub fn patch_projector_params(&self) -> u64 {
        (self.patch_feature_dim as u64 + 1) * self.d_emb as u64
    }
}
