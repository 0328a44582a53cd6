mod common;

use std::collections::BTreeSet;

use adalink::adapters::{count_trainable_params, AdapterKind, AdapterSpec};
use adalink::backbone::{ForwardOptions, ModelConfig};
use adalink::tasks::TaskKind;
use adalink::training::{
    evaluate, loss_and_grads, train, trainable_for, Adafactor, AdafactorConfig, OptimizerKind,
    TaskData, TrainConfig,
};
use adalink::{Error, Tensor};
use common::*;

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        warmup_steps: steps.min(10),
        batch_size: 8,
        log_every: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_same_curve_and_weights() {
    let cfg = small_config();
    let ds = dataset(TaskKind::MmVqa, "vqa", 1, 64, 8);
    let data = [TaskData {
        task_id: "vqa",
        examples: &ds.train,
    }];
    for spec in every_kind() {
        let run = || {
            let mut b = backbone(&cfg, 0);
            let mut a = adapter(spec.clone(), &b, 3);
            let r = train(&mut b, &mut a, &data, &quick(12)).unwrap();
            (r.losses(), a.checksum(), b.checksum())
        };
        let (l1, a1, b1) = run();
        let (l2, a2, b2) = run();
        assert_eq!(
            l1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            l2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!((a1, b1), (a2, b2), "{spec:?}");
    }
}

#[test]
fn peft_leaves_backbone_bits_alone_and_full_ft_does_not() {
    let cfg = small_config();
    let ds = dataset(TaskKind::MmCaption, "cap", 2, 64, 8);
    let data = [TaskData {
        task_id: "cap",
        examples: &ds.train,
    }];
    for spec in every_kind() {
        let mut b = backbone(&cfg, 0);
        let before = b.params().clone();
        let mut a = adapter(spec.clone(), &b, 1);
        let adapter_before = a.checksum();
        train(&mut b, &mut a, &data, &quick(15)).unwrap();
        if spec.kind() == AdapterKind::FullFt {
            assert_ne!(b.checksum(), before.checksum());
        } else {
            for (name, t) in before.iter() {
                assert!(
                    b.params().get(name).unwrap().bit_eq(t),
                    "{name} moved under {spec:?}"
                );
            }
            assert_ne!(a.checksum(), adapter_before, "{spec:?} did not train");
        }
    }
}

#[test]
fn gradients_reach_exactly_the_trainable_set() {
    let cfg = small_config();
    let b = backbone(&cfg, 0);
    let exs = dense_examples(&cfg, 4, 1);
    let batch = batch("t", &exs, &cfg);
    for spec in every_kind() {
        let mut a = adapter(spec.clone(), &b, 0);
        randomize(&mut a, 0.3, 2);
        let trainable = trainable_for(&a, &cfg);
        let (_, grads) =
            loss_and_grads(&b, &a, &batch, trainable, &ForwardOptions::eval(), 0).unwrap();
        let got: BTreeSet<String> = grads.keys().cloned().collect();
        let want: BTreeSet<String> = if spec.kind() == AdapterKind::FullFt {
            b.params().names().map(str::to_string).collect()
        } else {
            a.named_params().into_iter().map(|(n, _)| n).collect()
        };
        assert_eq!(got, want, "{spec:?}");
    }
}

#[test]
fn frozen_projector_is_excluded_from_full_fine_tuning() {
    let cfg = ModelConfig {
        freeze_patch_projector: true,
        ..small_config()
    };
    let b = backbone(&cfg, 0);
    let a = adapter(AdapterSpec::FullFt, &b, 0);
    let batch = batch("t", &dense_examples(&cfg, 2, 1), &cfg);
    let (_, grads) = loss_and_grads(
        &b,
        &a,
        &batch,
        trainable_for(&a, &cfg),
        &ForwardOptions::eval(),
        0,
    )
    .unwrap();
    assert!(!grads.keys().any(|n| n.starts_with("patch_proj")));
    assert!(grads.contains_key("token_embedding"));
}

/// Entries whose value changed after one optimizer step.
fn changed_entries(before: &[(String, Tensor)], after: &[(String, Tensor)]) -> u64 {
    before
        .iter()
        .zip(after)
        .map(|((_, x), (_, y))| {
            x.data()
                .iter()
                .zip(y.data())
                .filter(|(p, q)| p.to_bits() != q.to_bits())
                .count() as u64
        })
        .sum()
}

#[test]
fn closed_form_count_equals_entries_updated_by_one_step() {
    for freeze in [false, true] {
        let cfg = ModelConfig {
            freeze_patch_projector: freeze,
            ..small_config()
        };
        // large enough that every ReLU unit fires somewhere
        let exs = dense_examples(&cfg, 64, 7);
        let data = [TaskData {
            task_id: "dense",
            examples: &exs,
        }];
        let step = TrainConfig {
            total_steps: 1,
            warmup_steps: 1,
            batch_size: 64,
            dropout_rate: Some(0.0),
            ..TrainConfig::default()
        };
        for spec in every_kind() {
            let mut b = backbone(&cfg, 0);
            let mut a = adapter(spec.clone(), &b, 0);
            randomize(&mut a, 0.3, 5);
            let snapshot = |b: &adalink::backbone::Backbone,
                            a: &adalink::adapters::AdapterSet|
             -> Vec<(String, Tensor)> {
                if spec.kind() == AdapterKind::FullFt {
                    b.params()
                        .iter()
                        .map(|(n, t)| (n.to_string(), t.clone()))
                        .collect()
                } else {
                    a.named_params()
                        .into_iter()
                        .map(|(n, t)| (n, t.clone()))
                        .collect()
                }
            };
            let before = snapshot(&b, &a);
            let report = train(&mut b, &mut a, &data, &step).unwrap();
            let updated = changed_entries(&before, &snapshot(&b, &a));
            let formula = count_trainable_params(&spec, &cfg, 1, 2).total();
            assert_eq!(updated, formula, "{spec:?} freeze={freeze}");
            assert_eq!(report.trainable_params as u64, formula);
        }
    }
}

#[test]
fn zero_learning_rate_step_is_bit_exact() {
    let cfg = small_config();
    let b = backbone(&cfg, 0);
    let batch = batch("t", &dense_examples(&cfg, 4, 3), &cfg);
    for spec in every_kind()
        .into_iter()
        .filter(|s| s.kind() != AdapterKind::FullFt)
    {
        let mut a = adapter(spec, &b, 0);
        randomize(&mut a, 0.3, 1);
        let (_, grads) = loss_and_grads(
            &b,
            &a,
            &batch,
            trainable_for(&a, &cfg),
            &ForwardOptions::eval(),
            0,
        )
        .unwrap();
        let before = a.clone();
        let mut opt = Adafactor::new(AdafactorConfig::default());
        let mut slots = a.named_params_mut();
        let mut triples: Vec<(&str, &mut Tensor, &[f64])> = slots
            .iter_mut()
            .map(|(n, t)| (n.as_str(), &mut **t, grads[n.as_str()].as_slice()))
            .collect();
        opt.step(&mut triples, 0.0).unwrap();
        drop(triples);
        drop(slots);
        assert_eq!(a, before);
        assert!(opt.state.min_accumulator().unwrap() > 0.0);
    }
}

#[test]
fn first_loss_is_shared_by_identity_initialised_kinds() {
    let cfg = small_config();
    let ds = dataset(TaskKind::MmVqa, "vqa", 1, 64, 8);
    let data = [TaskData {
        task_id: "vqa",
        examples: &ds.train,
    }];
    let first = |spec: AdapterSpec| {
        let mut b = backbone(&cfg, 0);
        let mut a = adapter(spec, &b, 0);
        let cfg = TrainConfig {
            dropout_rate: Some(0.0),
            ..quick(1)
        };
        train(&mut b, &mut a, &data, &cfg).unwrap().initial_loss
    };
    let reference = first(AdapterSpec::FullFt);
    for spec in [
        AdapterSpec::adalink(4),
        AdapterSpec::adalink_unified(8),
        AdapterSpec::lora(4),
    ] {
        assert_eq!(first(spec).to_bits(), reference.to_bits());
    }
    // untrained backbone: close to uniform over the vocabulary
    let uniform = (cfg.vocab_size as f64).ln();
    assert!(
        (reference - uniform).abs() < 0.1 * uniform,
        "{reference} vs {uniform}"
    );
}

#[test]
fn divergence_and_bad_configs_are_errors() {
    let cfg = small_config();
    let ds = dataset(TaskKind::TextCopy, "copy", 1, 16, 4);
    let data = [TaskData {
        task_id: "copy",
        examples: &ds.train,
    }];
    let mut b = backbone(&cfg, 0);
    let mut a = adapter(AdapterSpec::adalink(2), &b, 0);
    let tight = TrainConfig {
        divergence_loss: 0.5,
        ..quick(3)
    };
    assert!(matches!(
        train(&mut b, &mut a, &data, &tight),
        Err(Error::Divergence { step: 1, .. })
    ));
    let bad = TrainConfig {
        warmup_steps: 50,
        ..quick(10)
    };
    assert!(matches!(
        train(&mut b, &mut a, &data, &bad),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        train(&mut b, &mut a, &[], &quick(3)),
        Err(Error::Config(_))
    ));
}

#[test]
fn sgd_is_available() {
    let cfg = small_config();
    let ds = dataset(TaskKind::TextCopy, "copy", 1, 16, 4);
    let data = [TaskData {
        task_id: "copy",
        examples: &ds.train,
    }];
    let mut b = backbone(&cfg, 0);
    let mut a = adapter(AdapterSpec::adalink(2), &b, 0);
    let before = a.checksum();
    let r = train(
        &mut b,
        &mut a,
        &data,
        &TrainConfig {
            optimizer: OptimizerKind::Sgd,
            ..quick(5)
        },
    )
    .unwrap();
    assert_eq!(r.optimizer, OptimizerKind::Sgd);
    assert_ne!(a.checksum(), before);
}

#[test]
fn full_fine_tuning_learns_to_copy() {
    let cfg = ModelConfig::default();
    let ds = dataset(TaskKind::TextCopy, "copy", 11, 32, 4);
    let data = [TaskData {
        task_id: "copy",
        examples: &ds.train,
    }];
    let mut b = backbone(&cfg, 0);
    let mut a = adapter(AdapterSpec::FullFt, &b, 0);
    let tc = TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: 30,
        total_steps: 500,
        batch_size: 32,
        dropout_rate: Some(0.0),
        log_every: 50,
        ..TrainConfig::default()
    };
    let report = train(&mut b, &mut a, &data, &tc).unwrap();
    assert!(report.final_loss < 0.05, "final loss {}", report.final_loss);
    let m = evaluate(&b, None, "copy", &ds.train, 32).unwrap();
    assert_eq!(m.exact_match, 1.0);
}
