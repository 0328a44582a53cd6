use adalink::adapters::AdapterSpec;
use adalink::backbone::ForwardOptions;
use adalink::registry::RegistryEntry;
use adalink::tasks::TaskKind;
use adalink::training::{loss_and_grads, trainable_for};
use adalink_bench::{backbone, batch, trained_adapter};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn specs() -> Vec<(&'static str, AdapterSpec)> {
    vec![
        ("adalink_r8", AdapterSpec::adalink(8)),
        ("lora_r8", AdapterSpec::lora(8)),
        ("prompt_64", AdapterSpec::prompt_tuning()),
        ("full_ft", AdapterSpec::FullFt),
    ]
}

fn forward(c: &mut Criterion) {
    let b = backbone();
    let batch = batch(TaskKind::MmVqa, 32, b.config());
    let mut group = c.benchmark_group("logits_b32");
    group.bench_function("backbone_only", |bench| {
        bench.iter(|| black_box(b.logits(&batch, None).unwrap()))
    });
    for (name, spec) in specs() {
        let a = trained_adapter(spec, &b);
        group.bench_with_input(BenchmarkId::from_parameter(name), &a, |bench, a| {
            bench.iter(|| black_box(b.logits(&batch, Some(a)).unwrap()))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let b = backbone();
    let batch = batch(TaskKind::MmVqa, 32, b.config());
    let mut group = c.benchmark_group("loss_and_grads_b32");
    group.sample_size(20);
    for (name, spec) in specs() {
        let a = trained_adapter(spec, &b);
        let trainable = trainable_for(&a, b.config());
        group.bench_with_input(BenchmarkId::from_parameter(name), &a, |bench, a| {
            bench.iter(|| {
                black_box(
                    loss_and_grads(&b, a, &batch, trainable.clone(), &ForwardOptions::eval(), 0)
                        .unwrap(),
                )
            })
        });
    }
    group.finish();
}

fn baked_vs_live(c: &mut Criterion) {
    let b = backbone();
    let batch = batch(TaskKind::TextCopy, 32, b.config());
    let live = RegistryEntry::new(
        "t",
        trained_adapter(AdapterSpec::adalink(8), &b),
        b.config(),
        "h",
        0,
    )
    .unwrap();
    let baked = live.bake(&b).unwrap();
    let mut group = c.benchmark_group("serve_text_b32");
    group.bench_function("live", |bench| {
        bench.iter(|| black_box(live.logits(&b, &batch).unwrap()))
    });
    group.bench_function("baked", |bench| {
        bench.iter(|| black_box(baked.logits(&b, &batch).unwrap()))
    });
    group.finish();
}

fn checkpoint(c: &mut Criterion) {
    let b = backbone();
    let entry = RegistryEntry::new(
        "t",
        trained_adapter(AdapterSpec::adalink(8), &b),
        b.config(),
        "h",
        0,
    )
    .unwrap();
    let bytes = entry.to_checkpoint().to_bytes();
    c.bench_function("entry_encode", |bench| {
        bench.iter(|| black_box(entry.to_checkpoint().to_bytes()))
    });
    c.bench_function("entry_decode", |bench| {
        bench.iter(|| black_box(adalink::registry::Checkpoint::from_bytes(&bytes).unwrap()))
    });
}

criterion_group!(benches, forward, train_step, baked_vs_live, checkpoint);
criterion_main!(benches);
