//! Parameter-efficient adapters: AdaLink, LoRA, prompt tuning, and the
//! full fine-tuning baseline.
//!
//! Every adapter starts as the identity except prompt tuning, which by
//! construction adds tokens to the encoder sequence.

mod accounting;
mod adalink;
mod lora;
mod prompt;

pub use accounting::{count_trainable_params, flops_added, ParamCount};
pub use adalink::{
    adalink_forward, apply_multimodal_adalink, AdaLinkModule, MultimodalAdaLink, Scope,
};
pub use lora::{lora_linear, lora_linear_tensor, LoraModule, LoraProj};
pub use prompt::{PromptTuningModule, ReparamLayer};

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::params::Binder;
use crate::tensor::{Graph, Tensor, Var};

/// How AdaLink modules are assigned to modalities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaLinkLayout {
    /// One module for image embeddings and one for text embeddings.
    #[default]
    PerModality,
    /// A single module shared by both modalities.
    Unified,
    /// Text embeddings only (text-only models).
    TextOnly,
}

fn default_scale() -> f64 {
    1.0
}

fn default_prompt_len() -> usize {
    64
}

fn default_reparam_layers() -> usize {
    2
}

/// Description of one tuning method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterSpec {
    #[serde(rename = "adalink")]
    AdaLink {
        rank: usize,
        #[serde(default)]
        layout: AdaLinkLayout,
        #[serde(default)]
        nonlinearity: bool,
        /// Each task owns a separate adapter.
        #[serde(default)]
        per_task: bool,
    },
    Lora {
        rank: usize,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    PromptTuning {
        #[serde(default = "default_prompt_len")]
        length: usize,
        #[serde(default = "default_reparam_layers")]
        reparam_layers: usize,
        /// Defaults to `d_emb / 4`.
        #[serde(default)]
        bottleneck: Option<usize>,
    },
    #[serde(rename = "full_ft")]
    FullFt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    AdaLink,
    Lora,
    PromptTuning,
    FullFt,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::AdaLink => "adalink",
            AdapterKind::Lora => "lora",
            AdapterKind::PromptTuning => "prompt_tuning",
            AdapterKind::FullFt => "full_ft",
        })
    }
}

impl AdapterSpec {
    pub fn adalink(rank: usize) -> Self {
        AdapterSpec::AdaLink {
            rank,
            layout: AdaLinkLayout::PerModality,
            nonlinearity: false,
            per_task: false,
        }
    }

    pub fn adalink_unified(rank: usize) -> Self {
        AdapterSpec::AdaLink {
            rank,
            layout: AdaLinkLayout::Unified,
            nonlinearity: false,
            per_task: false,
        }
    }

    pub fn lora(rank: usize) -> Self {
        AdapterSpec::Lora { rank, scale: 1.0 }
    }

    pub fn prompt_tuning() -> Self {
        AdapterSpec::PromptTuning {
            length: default_prompt_len(),
            reparam_layers: default_reparam_layers(),
            bottleneck: None,
        }
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterSpec::AdaLink { .. } => AdapterKind::AdaLink,
            AdapterSpec::Lora { .. } => AdapterKind::Lora,
            AdapterSpec::PromptTuning { .. } => AdapterKind::PromptTuning,
            AdapterSpec::FullFt => AdapterKind::FullFt,
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            AdapterSpec::AdaLink { rank, .. } | AdapterSpec::Lora { rank, .. } => Some(*rank),
            _ => None,
        }
    }

    pub(crate) fn default_bottleneck(&self, config: &ModelConfig) -> usize {
        (config.d_emb / 4).max(1)
    }

    /// Dropout used while training with this adapter, when it differs from the model default.
    pub fn default_dropout(&self) -> Option<f64> {
        match self {
            AdapterSpec::PromptTuning { .. } => Some(0.05),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AdapterSpec::AdaLink { rank: 0, .. } | AdapterSpec::Lora { rank: 0, .. } => {
                Err(Error::Config("adapter rank must be at least 1".into()))
            }
            AdapterSpec::PromptTuning { length: 0, .. } => {
                Err(Error::Config("prompt length must be at least 1".into()))
            }
            AdapterSpec::Lora { scale, .. } if !scale.is_finite() => {
                Err(Error::Config("LoRA scale must be finite".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Trained or freshly initialised adapter parameters.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum AdapterModules {
    AdaLink(MultimodalAdaLink),
    Lora(BTreeMap<(usize, LoraProj), LoraModule>),
    Prompt(PromptTuningModule),
    FullFt,
}

/// The adapters active in one training run or served for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    spec: AdapterSpec,
    modules: AdapterModules,
    /// Overrides the model's dropout rate while training.
    pub dropout_rate: Option<f64>,
}

impl AdapterSet {
    /// Fresh adapters for a backbone with `config`. Prompt rows are sampled
    /// from `token_table` when given.
    pub fn new(
        spec: AdapterSpec,
        config: &ModelConfig,
        token_table: Option<&Tensor>,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_emb;
        let modules = match &spec {
            AdapterSpec::AdaLink {
                rank,
                layout,
                nonlinearity,
                ..
            } => {
                let mut mk = |scope| AdaLinkModule::new(d, *rank, scope, *nonlinearity, &mut rng);
                let mm = match layout {
                    AdaLinkLayout::PerModality => MultimodalAdaLink {
                        text: Some(mk(Scope::Text)?),
                        image: Some(mk(Scope::Image)?),
                        unified: None,
                    },
                    AdaLinkLayout::Unified => MultimodalAdaLink {
                        unified: Some(mk(Scope::Unified)?),
                        ..Default::default()
                    },
                    AdaLinkLayout::TextOnly => MultimodalAdaLink {
                        text: Some(mk(Scope::Text)?),
                        ..Default::default()
                    },
                };
                AdapterModules::AdaLink(mm)
            }
            AdapterSpec::Lora { rank, scale } => {
                let mut map = BTreeMap::new();
                for layer in 0..config.n_enc_layers {
                    for proj in LoraProj::ALL {
                        let (i, o) = proj.dims(config);
                        map.insert(
                            (layer, proj),
                            LoraModule::new(i, o, *rank, *scale, &mut rng)?,
                        );
                    }
                }
                AdapterModules::Lora(map)
            }
            AdapterSpec::PromptTuning {
                length,
                reparam_layers,
                bottleneck,
            } => {
                let r = bottleneck.unwrap_or_else(|| spec.default_bottleneck(config));
                AdapterModules::Prompt(PromptTuningModule::new(
                    *length,
                    d,
                    *reparam_layers,
                    r,
                    token_table,
                    &mut rng,
                )?)
            }
            AdapterSpec::FullFt => AdapterModules::FullFt,
        };
        Ok(Self {
            dropout_rate: spec.default_dropout(),
            spec,
            modules,
        })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn kind(&self) -> AdapterKind {
        self.spec.kind()
    }

    pub fn modules(&self) -> &AdapterModules {
        &self.modules
    }

    pub fn modules_mut(&mut self) -> &mut AdapterModules {
        &mut self.modules
    }

    pub fn adalink(&self) -> Option<&MultimodalAdaLink> {
        match &self.modules {
            AdapterModules::AdaLink(m) => Some(m),
            _ => None,
        }
    }

    pub fn adalink_mut(&mut self) -> Option<&mut MultimodalAdaLink> {
        match &mut self.modules {
            AdapterModules::AdaLink(m) => Some(m),
            _ => None,
        }
    }

    /// Every adapter tensor under its parameter name, in name order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.modules {
            AdapterModules::AdaLink(mm) => {
                for m in mm.modules() {
                    let (d, u) = AdaLinkModule::param_names(m.scope);
                    out.push((d, &m.down));
                    out.push((u, &m.up));
                }
            }
            AdapterModules::Lora(map) => {
                for (&(l, p), m) in map {
                    let (a, b) = LoraModule::param_names(l, p);
                    out.push((a, &m.a));
                    out.push((b, &m.b));
                }
            }
            AdapterModules::Prompt(pm) => {
                out.push((PromptTuningModule::PROMPT_NAME.to_string(), &pm.prompt));
                for (i, layer) in pm.reparam.iter().enumerate() {
                    let (a, b) = PromptTuningModule::reparam_names(i);
                    out.push((a, &layer.w1));
                    out.push((b, &layer.w2));
                }
            }
            AdapterModules::FullFt => {}
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match &mut self.modules {
            AdapterModules::AdaLink(mm) => {
                for m in mm.modules_mut() {
                    let (d, u) = AdaLinkModule::param_names(m.scope);
                    out.push((d, &mut m.down));
                    out.push((u, &mut m.up));
                }
            }
            AdapterModules::Lora(map) => {
                for (&(l, p), m) in map.iter_mut() {
                    let (a, b) = LoraModule::param_names(l, p);
                    out.push((a, &mut m.a));
                    out.push((b, &mut m.b));
                }
            }
            AdapterModules::Prompt(pm) => {
                out.push((PromptTuningModule::PROMPT_NAME.to_string(), &mut pm.prompt));
                for (i, layer) in pm.reparam.iter_mut().enumerate() {
                    let (a, b) = PromptTuningModule::reparam_names(i);
                    out.push((a, &mut layer.w1));
                    out.push((b, &mut layer.w2));
                }
            }
            AdapterModules::FullFt => {}
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Overwrites the tensor called `name`, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        for (n, t) in self.named_params_mut() {
            if n == name {
                if t.shape() != value.shape() {
                    return Err(Error::dim("adapter parameter", value.shape(), t.shape()));
                }
                *t = value;
                return Ok(());
            }
        }
        Err(Error::Config(format!("adapter has no parameter `{name}`")))
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Digest of every adapter tensor, in name order.
    pub fn checksum(&self) -> u64 {
        self.named_params()
            .iter()
            .fold(0xcbf29ce484222325u64, |h, (n, t)| {
                let h = n
                    .bytes()
                    .fold(h, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
                (h ^ t.checksum()).wrapping_mul(0x100000001b3)
            })
    }

    /// Verifies every module against the backbone dimensions.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d_emb;
        match &self.modules {
            AdapterModules::AdaLink(mm) => {
                for m in mm.modules() {
                    if m.d_emb() != d || m.up.shape() != [m.rank(), d] {
                        return Err(Error::dim("adalink vs backbone", m.down.shape(), &[d]));
                    }
                }
            }
            AdapterModules::Lora(map) => {
                for (&(l, p), m) in map {
                    if l >= config.n_enc_layers {
                        return Err(Error::Config(format!(
                            "LoRA weights for encoder layer {l}, backbone has {}",
                            config.n_enc_layers
                        )));
                    }
                    let (i, o) = p.dims(config);
                    if m.a.shape()[0] != i || m.b.shape()[1] != o {
                        return Err(Error::dim("lora vs backbone", m.a.shape(), &[i, o]));
                    }
                }
            }
            AdapterModules::Prompt(pm) => {
                if pm.d_emb() != d {
                    return Err(Error::dim("prompt vs backbone", pm.prompt.shape(), &[d]));
                }
                for l in &pm.reparam {
                    if l.w1.shape()[0] != d || l.w2.shape()[1] != d {
                        return Err(Error::dim("prompt reparam vs backbone", l.w1.shape(), &[d]));
                    }
                }
            }
            AdapterModules::FullFt => {}
        }
        Ok(())
    }

    /// Applies AdaLink modules to the input embeddings; identity for other kinds.
    pub fn adapt_embeddings(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        image: Option<Var>,
        text: Var,
        dropout: f64,
        train: bool,
    ) -> Result<(Option<Var>, Var)> {
        match &self.modules {
            AdapterModules::AdaLink(mm) => mm.forward(g, b, image, text, dropout, train),
            _ => Ok((image, text)),
        }
    }

    /// The re-parameterised prompt for prompt tuning, `None` for other kinds.
    pub fn effective_prompt(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        _dropout: f64,
        _train: bool,
    ) -> Result<Option<Var>> {
        match &self.modules {
            AdapterModules::Prompt(pm) => Ok(Some(pm.forward(g, b)?)),
            _ => Ok(None),
        }
    }

    /// Leaves for the LoRA factors of one encoder projection, if adapted.
    pub fn bind_lora(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        layer: usize,
        proj: LoraProj,
    ) -> Result<Option<(Var, Var, f64)>> {
        match &self.modules {
            AdapterModules::Lora(map) => Ok(map.get(&(layer, proj)).map(|m| {
                let (an, bn) = LoraModule::param_names(layer, proj);
                (b.bind(g, &an, &m.a), b.bind(g, &bn, &m.b), m.scale)
            })),
            _ => Ok(None),
        }
    }
}
