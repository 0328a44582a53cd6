#![allow(dead_code)]

use adalink::adapters::{AdapterSet, AdapterSpec};
use adalink::backbone::{Backbone, ModelConfig};
use adalink::tasks::vocab::{VocabLayout, EOS};
use adalink::tasks::{generate_task, Dataset, Example, MultimodalBatch, TaskDef, TaskKind};
use adalink::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-layer model narrow enough for exhaustive checks.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_emb: 16,
        n_heads: 2,
        d_ff: 32,
        ..ModelConfig::default()
    }
}

pub fn backbone(config: &ModelConfig, seed: u64) -> Backbone {
    Backbone::new(config.clone(), seed).unwrap()
}

pub fn dataset(kind: TaskKind, task_id: &str, seed: u64, n_train: usize, n_val: usize) -> Dataset {
    generate_task(&TaskDef::new(task_id, kind, seed).with_sizes(n_train, n_val)).unwrap()
}

pub fn batch(task_id: &str, examples: &[Example], config: &ModelConfig) -> MultimodalBatch {
    let refs: Vec<&Example> = examples.iter().collect();
    MultimodalBatch::from_examples(task_id, &refs, config).unwrap()
}

/// Examples with random patches, full-length text, and full-length targets,
/// so every position and token row takes part in the loss.
pub fn dense_examples(config: &ModelConfig, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = 4;
    (0..n)
        .map(|_| {
            let patches = (0..config.n_patches * config.patch_feature_dim)
                .map(|_| rng.gen_range(0..2))
                .collect();
            let text = (0..config.max_text_len)
                .map(|_| rng.gen_range(first..config.vocab_size))
                .collect();
            let mut target: Vec<usize> = (0..config.max_target_len - 1)
                .map(|_| rng.gen_range(first..config.vocab_size))
                .collect();
            target.push(EOS);
            Example {
                patches: Some(patches),
                text,
                target,
            }
        })
        .collect()
}

/// Overwrites every adapter tensor with Gaussian noise.
pub fn randomize(adapters: &mut AdapterSet, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in adapters.named_params_mut() {
        *t = Tensor::randn(t.shape().to_vec(), std, &mut rng);
    }
}

pub fn adapter(spec: AdapterSpec, backbone: &Backbone, seed: u64) -> AdapterSet {
    AdapterSet::new(
        spec,
        backbone.config(),
        Some(backbone.token_embedding()),
        seed,
    )
    .unwrap()
}

/// One of each kind, with a short prompt to keep tests fast.
pub fn every_kind() -> Vec<AdapterSpec> {
    vec![
        AdapterSpec::adalink(4),
        AdapterSpec::adalink_unified(8),
        AdapterSpec::lora(4),
        AdapterSpec::PromptTuning {
            length: 8,
            reparam_layers: 2,
            bottleneck: None,
        },
        AdapterSpec::FullFt,
    ]
}

pub fn layout() -> VocabLayout {
    VocabLayout::default()
}
