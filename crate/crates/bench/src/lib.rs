//! Shared fixtures for the benchmarks.

use adalink::adapters::{AdapterSet, AdapterSpec};
use adalink::backbone::{Backbone, ModelConfig};
use adalink::tasks::{generate_task, Example, MultimodalBatch, TaskDef, TaskKind};
use adalink::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: [usize; 2], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

pub fn backbone() -> Backbone {
    Backbone::new(ModelConfig::default(), 0).expect("default config is valid")
}

/// An adapter whose weights are all nonzero, so no path is short-circuited.
pub fn trained_adapter(spec: AdapterSpec, backbone: &Backbone) -> AdapterSet {
    let mut a = AdapterSet::new(spec, backbone.config(), Some(backbone.token_embedding()), 1)
        .expect("spec fits");
    let mut r = rng(2);
    for (_, t) in a.named_params_mut() {
        let noise = Tensor::randn(t.shape().to_vec(), 0.05, &mut r);
        *t = noise;
    }
    a
}

pub fn examples(kind: TaskKind, n: usize) -> Vec<Example> {
    generate_task(&TaskDef::new("bench", kind, 0).with_sizes(n, 0))
        .expect("generator")
        .train
}

pub fn batch(kind: TaskKind, n: usize, config: &ModelConfig) -> MultimodalBatch {
    let exs = examples(kind, n);
    let refs: Vec<&Example> = exs.iter().collect();
    MultimodalBatch::from_examples("bench", &refs, config).expect("batch")
}
