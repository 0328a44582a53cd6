//! One test per acceptance criterion. Each prints a `criterion N: PASS|FAIL`
//! line with the measured values (visible with `--nocapture`).

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use adalink::adapters::{count_trainable_params, flops_added, AdapterSet, AdapterSpec};
use adalink::backbone::{Backbone, ModelConfig};
use adalink::experiment::{
    ablate_modality, ablate_rank, load_tasks, pretrain_backbone, reference_param_rows, run_adapter,
    ExperimentConfig,
};
use adalink::registry::{AdapterRegistry, RegistryEntry};
use adalink::tasks::{generate_task, Dataset, Example, TaskDef, TaskKind};
use adalink::training::{evaluate, model_grad_check, train, TaskData, TrainConfig};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, passed: bool, detail: impl AsRef<str>) {
    println!(
        "criterion {n}: {} {}",
        if passed { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    assert!(passed, "criterion {n} failed: {}", detail.as_ref());
}

fn config() -> ExperimentConfig {
    ExperimentConfig::default()
}

/// The frozen toy backbone, pretrained once per test binary.
fn pretrained() -> &'static Backbone {
    static BACKBONE: OnceLock<Backbone> = OnceLock::new();
    BACKBONE.get_or_init(|| {
        let cfg = config();
        let t = Instant::now();
        let (b, r) = pretrain_backbone(&cfg.model, &cfg.pretrain).unwrap();
        println!(
            "pretrained in {:.1}s, final loss {:.4}",
            t.elapsed().as_secs_f64(),
            r.final_loss
        );
        b
    })
}

fn target() -> &'static [Dataset] {
    static TASKS: OnceLock<Vec<Dataset>> = OnceLock::new();
    TASKS.get_or_init(|| load_tasks(&config().tasks).unwrap())
}

/// Random batches of every task shape: sizes 1..=8, all four task kinds.
fn random_batches(n: usize, seed: u64) -> Vec<(String, Vec<Example>)> {
    let kinds = [
        TaskKind::MmVqa,
        TaskKind::MmCaption,
        TaskKind::TextCls,
        TaskKind::TextCopy,
    ];
    let pools: Vec<Dataset> = kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            generate_task(&TaskDef::new(format!("pool{i}"), k, seed + i as u64).with_sizes(200, 0))
                .unwrap()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let pool = &pools[rng.gen_range(0..pools.len())];
            let size = rng.gen_range(1..=8);
            let exs = (0..size)
                .map(|_| pool.train[rng.gen_range(0..pool.train.len())].clone())
                .collect();
            (pool.def.task_id.clone(), exs)
        })
        .collect()
}

#[test]
fn criterion_01_parameter_counts() {
    let want = [
        1_048_576, 524_288, 262_144, 131_072, 8_192, 524_288, 2_097_152,
    ];
    let got: Vec<u64> = reference_param_rows().iter().map(|r| r.count).collect();
    report(1, got == want, format!("{got:?}"));
}

fn identity_at_init(spec: AdapterSpec) -> (usize, usize) {
    let cfg = ModelConfig::default();
    let b = backbone(&cfg, 5);
    let a = adapter(spec, &b, 1);
    let batches = random_batches(20, 11);
    let same = batches
        .iter()
        .filter(|(id, exs)| {
            let batch = batch(id, exs, &cfg);
            b.logits(&batch, Some(&a))
                .unwrap()
                .bit_eq(&b.logits(&batch, None).unwrap())
        })
        .count();
    (same, batches.len())
}

#[test]
fn criterion_02_zero_init_identity() {
    let mut detail = Vec::new();
    let mut ok = true;
    for spec in [
        AdapterSpec::adalink(8),
        AdapterSpec::adalink_unified(16),
        AdapterSpec::lora(4),
        AdapterSpec::FullFt,
    ] {
        let (same, n) = identity_at_init(spec.clone());
        ok &= same == n;
        detail.push(format!("{} {same}/{n}", spec.kind()));
    }
    report(2, ok, detail.join(", "));
}

#[test]
#[ignore = "prompt tokens join the attention context, so a fresh prompt is never the identity"]
fn criterion_02_zero_init_identity_prompt_tuning() {
    let (same, n) = identity_at_init(AdapterSpec::prompt_tuning());
    report(2, same == n, format!("prompt_tuning {same}/{n}"));
}

#[test]
fn criterion_03_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        d_emb: 8,
        n_heads: 2,
        d_ff: 16,
        n_enc_layers: 1,
        n_dec_layers: 1,
        ..ModelConfig::default()
    };
    let b = backbone(&cfg, 2);
    let ds = dataset(TaskKind::MmVqa, "g", 3, 4, 0);
    let batch = batch("g", &ds.train, &cfg);
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for spec in [
        AdapterSpec::adalink(4),
        AdapterSpec::adalink_unified(8),
        AdapterSpec::lora(2),
        AdapterSpec::prompt_tuning(),
        AdapterSpec::FullFt,
    ] {
        let mut a = adapter(spec.clone(), &b, 0);
        randomize(&mut a, 0.3, 4);
        let err = model_grad_check(&b, &a, &batch, 1e-5).unwrap();
        worst = worst.max(err);
        detail.push(format!("{} {err:.2e}", spec.kind()));
    }
    detail.push(format!("{:.1}s", t.elapsed().as_secs_f64()));
    report(3, worst < 1e-4, detail.join(", "));
}

#[test]
fn criterion_04_backbone_frozen_under_peft() {
    let cfg = config();
    let steps = TrainConfig {
        total_steps: 200,
        warmup_steps: 20,
        batch_size: 8,
        log_every: 50,
        ..cfg.train.clone()
    };
    let ds = &target()[0];
    let data = [TaskData {
        task_id: &ds.def.task_id,
        examples: &ds.train,
    }];
    let mut detail = Vec::new();
    let mut ok = true;
    for spec in [
        AdapterSpec::adalink(8),
        AdapterSpec::adalink_unified(16),
        AdapterSpec::lora(4),
        AdapterSpec::prompt_tuning(),
    ] {
        let mut b = pretrained().clone();
        let before = b.checksum();
        let mut a =
            AdapterSet::new(spec.clone(), b.config(), Some(b.token_embedding()), 0).unwrap();
        let r = train(&mut b, &mut a, &data, &steps).unwrap();
        let same = b.checksum() == before && b.params() == pretrained().params();
        ok &= same && r.steps == 200;
        detail.push(format!(
            "{} {}",
            spec.kind(),
            if same { "unchanged" } else { "CHANGED" }
        ));
    }
    report(4, ok, detail.join(", "));
}

#[test]
fn criterion_05_adalink_cost_is_depth_invariant() {
    let at = |spec: &AdapterSpec, layers: usize| {
        let cfg = ModelConfig {
            n_enc_layers: layers,
            n_dec_layers: layers,
            ..ModelConfig::default()
        };
        flops_added(spec, cfg.encoder_positions(), &cfg)
    };
    let ada: Vec<u64> = [2, 4, 8]
        .iter()
        .map(|&l| at(&AdapterSpec::adalink(8), l))
        .collect();
    let prompt: Vec<u64> = [2, 4, 8]
        .iter()
        .map(|&l| at(&AdapterSpec::prompt_tuning(), l))
        .collect();
    let ok = ada.windows(2).all(|w| w[0] == w[1]) && prompt.windows(2).all(|w| w[0] < w[1]);
    report(5, ok, format!("adalink {ada:?}, prompt {prompt:?}"));
}

#[test]
fn criterion_06_adalink_close_to_full_fine_tuning() {
    let cfg = config();
    let b = pretrained();
    let ds = target();
    let t = Instant::now();
    let baseline = evaluate(b, None, &ds[0].def.task_id, &ds[0].val, cfg.eval_batch_size)
        .unwrap()
        .exact_match;
    let run = |spec: AdapterSpec| {
        let r = run_adapter(
            b,
            &spec,
            &cfg.train_config_for(spec.kind()),
            ds,
            cfg.eval_batch_size,
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.checks);
        r.mean_exact_match()
    };
    let full = run(AdapterSpec::FullFt);
    let ada = run(AdapterSpec::adalink(8));
    let pts = |x: f64| 100.0 * x;
    let ok = pts(full - ada) <= 10.0 && pts(ada - baseline) >= 30.0 && pts(full - baseline) >= 30.0;
    report(
        6,
        ok,
        format!(
            "baseline {:.1}, full_ft {:.1}, adalink r8 {:.1} ({:.0}s)",
            pts(baseline),
            pts(full),
            pts(ada),
            t.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_07_rank_saturates() {
    let cfg = config();
    let rows = ablate_rank(pretrained(), &cfg, target(), &[4, 16, 64]).unwrap();
    let em: Vec<f64> = rows.iter().map(|r| 100.0 * r.exact_match).collect();
    report(
        7,
        (em[1] - em[2]).abs() <= 5.0,
        format!("r4 {:.1}, r16 {:.1}, r64 {:.1}", em[0], em[1], em[2]),
    );
}

#[test]
fn criterion_08_modality_split_matches_unified_budget() {
    let cfg = config();
    let rows = ablate_modality(pretrained(), &cfg, target()).unwrap();
    let (split, unified) = (&rows[0], &rows[1]);
    let model = &cfg.model;
    let formula = count_trainable_params(&AdapterSpec::adalink(8), model, 1, 2).total();
    let ok =
        split.params == unified.params && split.params == formula && unified.rank == 2 * split.rank;
    report(
        8,
        ok,
        format!(
            "per_modality r{} {} params {:.1}%, unified r{} {} params {:.1}%",
            split.rank,
            split.params,
            100.0 * split.exact_match,
            unified.rank,
            unified.params,
            100.0 * unified.exact_match
        ),
    );
}

#[test]
fn criterion_09_baked_serving_is_exact() {
    let cfg = ModelConfig::default();
    let b = backbone(&cfg, 7);
    let mut a = adapter(AdapterSpec::adalink(8), &b, 0);
    randomize(&mut a, 0.2, 8);
    let live = RegistryEntry::new("t", a, &cfg, "h", 0).unwrap();
    let baked = live.bake(&b).unwrap();
    let batches = random_batches(100, 21);
    let same = batches
        .iter()
        .filter(|(id, exs)| {
            let batch = batch(id, exs, &cfg);
            baked
                .logits(&b, &batch)
                .unwrap()
                .bit_eq(&live.logits(&b, &batch).unwrap())
        })
        .count();
    report(
        9,
        same == batches.len(),
        format!("{same}/{} batches bit-identical", batches.len()),
    );
}

#[test]
fn criterion_10_registry_isolates_tasks() {
    let cfg = ModelConfig::default();
    let b = backbone(&cfg, 9);
    let defs = [
        TaskDef::new("vqa", TaskKind::MmVqa, 1).with_sizes(64, 16),
        TaskDef::new("caption", TaskKind::MmCaption, 2).with_sizes(64, 16),
        TaskDef::new("cls", TaskKind::TextCls, 3).with_sizes(64, 16),
    ];
    let sets = load_tasks(&defs).unwrap();
    let tune = |spec: AdapterSpec, ds: &Dataset, seed: u64| {
        let mut frozen = b.clone();
        let mut a = AdapterSet::new(spec, &cfg, Some(b.token_embedding()), seed).unwrap();
        let tc = TrainConfig {
            total_steps: 20,
            warmup_steps: 5,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        };
        let data = [TaskData {
            task_id: &ds.def.task_id,
            examples: &ds.train,
        }];
        train(&mut frozen, &mut a, &data, &tc).unwrap();
        RegistryEntry::new(ds.def.task_id.clone(), a, &cfg, "h", 20).unwrap()
    };
    let reg = AdapterRegistry::new(cfg.clone());
    for (ds, spec) in sets.iter().zip([
        AdapterSpec::adalink(8),
        AdapterSpec::lora(4),
        AdapterSpec::adalink(4),
    ]) {
        reg.register(tune(spec, ds, 0)).unwrap();
    }

    let mut items: Vec<(&str, &Example)> = Vec::new();
    for i in 0..16 {
        for ds in &sets {
            items.push((&ds.def.task_id, &ds.val[(i * 7) % 16]));
        }
    }
    let alone = |reg: &AdapterRegistry, ds: &Dataset| {
        let e = reg.get(&ds.def.task_id).unwrap();
        let batch = batch(&ds.def.task_id, &ds.val, &cfg);
        (
            e.logits(&b, &batch).unwrap(),
            e.decode(&b, &batch, cfg.max_target_len).unwrap(),
        )
    };
    let mixed = reg.decode_mixed(&b, &items, 5).unwrap();
    let mut interleaved_ok = true;
    for ds in &sets {
        let (_, preds) = alone(&reg, ds);
        for ((task, ex), pred) in items.iter().zip(&mixed) {
            if *task == ds.def.task_id {
                let k = ds.val.iter().position(|e| e == *ex).unwrap();
                interleaved_ok &= preds[k] == *pred;
            }
        }
    }

    let before: Vec<_> = sets.iter().map(|ds| alone(&reg, ds).0).collect();
    reg.register(tune(AdapterSpec::lora(4), &sets[1], 1))
        .unwrap();
    let after: Vec<_> = sets.iter().map(|ds| alone(&reg, ds).0).collect();
    let others_same = before[0].bit_eq(&after[0]) && before[2].bit_eq(&after[2]);
    let retrained_moved = !before[1].bit_eq(&after[1]);
    report(
        10,
        interleaved_ok && others_same && retrained_moved,
        format!("interleaved==alone {interleaved_ok}, others unchanged after retrain {others_same}, retrained task moved {retrained_moved}"),
    );
}
