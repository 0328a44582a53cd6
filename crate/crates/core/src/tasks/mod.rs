//! Seeded synthetic tasks, batching, and evaluation metrics.

mod batch;
mod generate;
mod io;
mod metrics;
pub mod oracle;
mod sampler;
pub mod vocab;

pub use batch::{Example, MultimodalBatch};
pub use generate::{
    caption, decode_scene, encode_scene, expected_target, gen_mm_caption, gen_mm_vqa, gen_text_cls,
    gen_text_copy, generate_task, verify, vqa_answer, Dataset, Scene, TaskDef, TaskKind,
};
pub use io::{dataset_to_string, read_dataset, write_dataset};
pub use metrics::{exact_match, strip, token_accuracy};
pub use sampler::Sampler;
