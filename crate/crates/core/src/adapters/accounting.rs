//! Closed-form trainable-parameter and added-compute counts per adapter kind.

use serde::{Deserialize, Serialize};

use super::{AdaLinkLayout, AdapterSpec, LoraProj};
use crate::backbone::ModelConfig;

/// Trainable parameters. `extra` holds prompt re-parameterisation weights,
/// which are reported apart from the prompt itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub core: u64,
    pub extra: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.core + self.extra
    }
}

fn lora_layer_params(rank: usize, config: &ModelConfig) -> u64 {
    LoraProj::ALL
        .iter()
        .map(|p| {
            let (i, o) = p.dims(config);
            (rank * (i + o)) as u64
        })
        .sum()
}

/// Exact trainable-parameter count for `spec` on a backbone described by `config`.
///
/// AdaLink modules hold `2·d_emb·rank` each; one per modality (per-modality
/// layout) or one in total (unified / text-only), times `n_tasks` when each
/// task owns its adapter.
pub fn count_trainable_params(
    spec: &AdapterSpec,
    config: &ModelConfig,
    n_tasks: usize,
    n_modalities: usize,
) -> ParamCount {
    let d = config.d_emb as u64;
    match spec {
        AdapterSpec::AdaLink {
            rank,
            layout,
            per_task,
            ..
        } => {
            let scopes = match layout {
                AdaLinkLayout::PerModality => n_modalities,
                AdaLinkLayout::Unified | AdaLinkLayout::TextOnly => 1,
            } as u64;
            let tasks = if *per_task { n_tasks as u64 } else { 1 };
            ParamCount {
                core: scopes * tasks * 2 * d * *rank as u64,
                extra: 0,
            }
        }
        AdapterSpec::Lora { rank, .. } => ParamCount {
            core: config.n_enc_layers as u64 * lora_layer_params(*rank, config),
            extra: 0,
        },
        AdapterSpec::PromptTuning {
            length,
            reparam_layers,
            bottleneck,
        } => {
            let r = bottleneck.unwrap_or_else(|| spec.default_bottleneck(config)) as u64;
            ParamCount {
                core: *length as u64 * d,
                extra: *reparam_layers as u64 * 2 * d * r,
            }
        }
        AdapterSpec::FullFt => {
            let frozen = if config.freeze_patch_projector {
                config.patch_projector_params()
            } else {
                0
            };
            ParamCount {
                core: config.backbone_params() - frozen,
                extra: 0,
            }
        }
    }
}

fn encoder_layer_macs(seq: u64, d: u64, d_ff: u64) -> u64 {
    4 * seq * d * d + 2 * seq * seq * d + 2 * seq * d * d_ff
}

fn cross_attention_macs(enc_seq: u64, dec_len: u64, d: u64) -> u64 {
    2 * enc_seq * d * d + 2 * dec_len * enc_seq * d
}

/// Multiply-accumulates one forward pass gains from the adapter, for an
/// encoder input of `seq_len` positions.
///
/// AdaLink costs `2·d_emb·rank` per adapted position regardless of depth.
/// Prompt tuning lengthens every encoder layer's sequence and every decoder
/// cross-attention; the re-parameterised prompt is input-independent and is
/// not counted. LoRA pays `rank·(d_in + d_out)` per position per adapted layer.
pub fn flops_added(spec: &AdapterSpec, seq_len: usize, config: &ModelConfig) -> u64 {
    let n = seq_len as u64;
    let d = config.d_emb as u64;
    match spec {
        AdapterSpec::AdaLink { rank, .. } => n * 2 * d * *rank as u64,
        AdapterSpec::Lora { rank, .. } => {
            config.n_enc_layers as u64 * lora_layer_params(*rank, config) * n
        }
        AdapterSpec::PromptTuning { length, .. } => {
            let p = *length as u64;
            let ff = config.d_ff as u64;
            let dec = config.max_target_len as u64;
            let enc = encoder_layer_macs(n + p, d, ff) - encoder_layer_macs(n, d, ff);
            let cross = cross_attention_macs(n + p, dec, d) - cross_attention_macs(n, dec, d);
            config.n_enc_layers as u64 * enc + config.n_dec_layers as u64 * cross
        }
        AdapterSpec::FullFt => 0,
    }
}
