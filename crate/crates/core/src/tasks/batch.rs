use serde::{Deserialize, Serialize};

use super::vocab::{BOS, EOS, PAD};
use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One generated example.
///
/// `text` is padded to the model's text length; `target` ends with EOS and is
/// never padded.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    /// `n_patches × patch_feature_dim` features, row-major. Stored as integers
    /// because every generator emits one-hot blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patches: Option<Vec<i64>>,
    pub text: Vec<usize>,
    pub target: Vec<usize>,
}

/// A batch of examples from a single task.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch {
    pub task_id: String,
    /// `[batch, n_patches, patch_feature_dim]`, absent for text-only tasks.
    pub patches: Option<Tensor>,
    /// `batch × max_text_len`, pads trailing.
    pub text_tokens: Vec<Vec<usize>>,
    /// `batch × target_len`, each row EOS-terminated then padded.
    pub target_tokens: Vec<Vec<usize>>,
    /// Position (before any prompt tokens) where text embeddings start.
    pub boundary: usize,
}

impl MultimodalBatch {
    pub fn from_examples(
        task_id: &str,
        examples: &[&Example],
        config: &ModelConfig,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let has_image = examples[0].patches.is_some();
        let target_len = examples.iter().map(|e| e.target.len()).max().unwrap_or(1);
        let mut patch_data = Vec::new();
        let mut text_tokens = Vec::with_capacity(examples.len());
        let mut target_tokens = Vec::with_capacity(examples.len());
        for e in examples {
            match (&e.patches, has_image) {
                (Some(p), true) => patch_data.extend(p.iter().map(|&x| x as f64)),
                (None, false) => {}
                _ => {
                    return Err(Error::Contract(
                        "batch mixes image and text-only examples".into(),
                    ))
                }
            }
            let mut text = e.text.clone();
            if text.len() > config.max_text_len {
                return Err(Error::dim(
                    "text_tokens",
                    &[text.len()],
                    &[config.max_text_len],
                ));
            }
            text.resize(config.max_text_len, PAD);
            text_tokens.push(text);
            let mut t = e.target.clone();
            t.resize(target_len, PAD);
            target_tokens.push(t);
        }
        let patches = if has_image {
            Some(Tensor::new(
                [examples.len(), config.n_patches, config.patch_feature_dim],
                patch_data,
            )?)
        } else {
            None
        };
        let batch = Self {
            task_id: task_id.to_string(),
            boundary: if has_image { config.n_patches } else { 0 },
            patches,
            text_tokens,
            target_tokens,
        };
        batch.validate(config)?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.text_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_tokens.is_empty()
    }

    pub fn target_len(&self) -> usize {
        self.target_tokens.first().map_or(0, Vec::len)
    }

    pub fn has_image(&self) -> bool {
        self.patches.is_some()
    }

    /// Teacher-forcing inputs: BOS followed by the target shifted right.
    pub fn decoder_inputs(&self) -> Vec<Vec<usize>> {
        self.target_tokens
            .iter()
            .map(|t| {
                std::iter::once(BOS)
                    .chain(t[..t.len() - 1].iter().copied())
                    .collect()
            })
            .collect()
    }

    /// Flattened per-position targets with pads masked out.
    pub fn loss_targets(&self) -> Vec<Option<usize>> {
        self.target_tokens
            .iter()
            .flat_map(|t| t.iter().map(|&x| (x != PAD).then_some(x)))
            .collect()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let b = self.len();
        if b == 0 || self.target_tokens.len() != b {
            return Err(Error::dim("batch", &[b], &[self.target_tokens.len()]));
        }
        if let Some(p) = &self.patches {
            let want = [b, config.n_patches, config.patch_feature_dim];
            if p.shape() != want {
                return Err(Error::dim("patches", p.shape(), &want));
            }
        }
        let tl = self.target_len();
        if tl == 0 || tl > config.max_target_len {
            return Err(Error::dim("target_tokens", &[tl], &[config.max_target_len]));
        }
        for row in &self.text_tokens {
            if row.len() != config.max_text_len {
                return Err(Error::dim(
                    "text_tokens",
                    &[row.len()],
                    &[config.max_text_len],
                ));
            }
            check_vocab(row, config.vocab_size)?;
            check_trailing_pads(row, "text")?;
        }
        for row in &self.target_tokens {
            if row.len() != tl {
                return Err(Error::dim("target_tokens", &[row.len()], &[tl]));
            }
            check_vocab(row, config.vocab_size)?;
            check_trailing_pads(row, "target")?;
            let last = row.iter().rposition(|&t| t != PAD);
            if last.map(|i| row[i]) != Some(EOS) {
                return Err(Error::Contract("target rows must end with EOS".into()));
            }
        }
        Ok(())
    }
}

fn check_vocab(row: &[usize], vocab_size: usize) -> Result<()> {
    match row.iter().find(|&&t| t >= vocab_size) {
        Some(&index) => Err(Error::Vocabulary { index, vocab_size }),
        None => Ok(()),
    }
}

fn check_trailing_pads(row: &[usize], what: &str) -> Result<()> {
    if let Some(first_pad) = row.iter().position(|&t| t == PAD) {
        if row[first_pad..].iter().any(|&t| t != PAD) {
            return Err(Error::Contract(format!("{what} padding must be trailing")));
        }
    }
    Ok(())
}
