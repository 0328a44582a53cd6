//! Optimisation: learning-rate schedule, Adafactor, and the training loop.

mod optim;

pub use optim::{Adafactor, AdafactorConfig, AdafactorState, Sgd};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, AdapterSet};
use crate::backbone::{Backbone, ForwardOptions, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Binder, Trainable};
use crate::tasks::{exact_match, token_accuracy, Example, MultimodalBatch, Sampler};
use crate::tensor::{grad_check, Graph, Tensor, Var};

/// `peak · min(step / warmup, √(warmup / step))` for `step ≥ 1`.
pub fn lr_at(step: usize, peak_lr: f64, warmup_steps: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup_steps.max(1) as f64;
    peak_lr * (s / w).min((w / s).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adafactor,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Falls back to the adapter's own rate, then the model's.
    pub dropout_rate: Option<f64>,
    pub optimizer: OptimizerKind,
    pub adafactor: AdafactorConfig,
    /// Steps between log records.
    pub log_every: usize,
    /// Losses above this abort the run.
    pub divergence_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 0.01,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 32,
            seed: 0,
            dropout_rate: None,
            optimizer: OptimizerKind::Adafactor,
            adafactor: AdafactorConfig::default(),
            log_every: 10,
            divergence_loss: 1e3,
        }
    }
}

impl TrainConfig {
    /// Defaults for an adapter kind: 0.01 for adapters, 3e-4 for full fine-tuning.
    pub fn for_kind(kind: AdapterKind) -> Self {
        Self {
            peak_lr: if kind == AdapterKind::FullFt {
                3e-4
            } else {
                0.01
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::Config(format!(
                "peak_lr must be positive, got {}",
                self.peak_lr
            )));
        }
        if self.warmup_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps must be in 1..={}, got {}",
                self.total_steps, self.warmup_steps
            )));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch_size and log_every must be at least 1".into(),
            ));
        }
        if let Some(p) = self.dropout_rate {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "dropout_rate must be in [0, 1), got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Training examples of one task.
#[derive(Clone, Copy, Debug)]
pub struct TaskData<'a> {
    pub task_id: &'a str,
    pub examples: &'a [Example],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean loss over the steps since the previous record.
    pub loss: f64,
    pub tasks: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: AdapterKind,
    pub steps: usize,
    pub trainable_params: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub records: Vec<LogRecord>,
    pub optimizer: OptimizerKind,
    pub adafactor: AdafactorConfig,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// One JSON object per record.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    /// `step,lr,loss` rows. Wall time is left out so reruns compare equal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{:e},{:.17e}", r.step, r.lr, r.loss);
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Parameters that collect gradients for an adapter kind.
pub fn trainable_for(adapters: &AdapterSet, config: &ModelConfig) -> Trainable {
    match adapters.kind() {
        AdapterKind::FullFt => {
            let mut frozen = vec!["serving.".to_string()];
            if config.freeze_patch_projector {
                frozen.push("patch_proj".into());
            }
            Trainable::AllExcept(frozen)
        }
        _ => Trainable::Adapters,
    }
}

/// Mean token cross-entropy over non-pad targets.
pub fn batch_loss(
    g: &mut Graph,
    b: &mut Binder,
    backbone: &Backbone,
    adapters: Option<&AdapterSet>,
    batch: &MultimodalBatch,
    opts: &ForwardOptions,
) -> Result<Var> {
    let logits = backbone.forward(g, b, batch, adapters, opts)?;
    g.cross_entropy(logits, &batch.loss_targets())
}

/// Loss and per-parameter gradients of one batch under `trainable`.
///
/// Only parameters whose leaf received a gradient appear in the map.
pub fn loss_and_grads(
    backbone: &Backbone,
    adapters: &AdapterSet,
    batch: &MultimodalBatch,
    trainable: Trainable,
    opts: &ForwardOptions,
    seed: u64,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut g = Graph::with_seed(seed);
    let mut b = Binder::new(trainable);
    let loss = batch_loss(&mut g, &mut b, backbone, Some(adapters), batch, opts)?;
    g.backward(loss)?;
    let grads = b
        .bound()
        .filter_map(|(name, v)| g.grad(v).map(|gr| (name.to_string(), gr.to_vec())))
        .collect();
    Ok((g.value(loss).data()[0], grads))
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64)
        .wrapping_add(1)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

enum Optimizer {
    Adafactor(Adafactor),
    Sgd(Sgd),
}

/// Runs `cfg.total_steps` updates, visiting tasks round-robin with a
/// per-task seeded shuffle.
///
/// Adapter kinds other than full fine-tuning leave `backbone` untouched.
pub fn train(
    backbone: &mut Backbone,
    adapters: &mut AdapterSet,
    tasks: &[TaskData],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if tasks.is_empty() || tasks.iter().any(|t| t.examples.is_empty()) {
        return Err(Error::Config(
            "training needs at least one task with examples".into(),
        ));
    }
    adapters.check_compatible(backbone.config())?;
    let started = Instant::now();
    let model_cfg = backbone.config().clone();
    let trainable = trainable_for(adapters, &model_cfg);
    let full_ft = adapters.kind() == AdapterKind::FullFt;
    let dropout = cfg
        .dropout_rate
        .or(adapters.dropout_rate)
        .unwrap_or(model_cfg.dropout_rate);
    let opts = ForwardOptions::train(dropout);
    let mut samplers: Vec<Sampler> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| Sampler::new(t.examples.len(), step_seed(cfg.seed, usize::MAX - i)))
        .collect();
    let mut opt = match cfg.optimizer {
        OptimizerKind::Adafactor => Optimizer::Adafactor(Adafactor::new(cfg.adafactor)),
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd),
    };
    let trainable_params = if full_ft {
        backbone
            .params()
            .iter()
            .filter(|(n, _)| trainable.allows(n))
            .map(|(_, t)| t.numel())
            .sum()
    } else {
        adapters.num_params()
    };

    let mut records = Vec::new();
    let mut window_loss = 0.0;
    let mut window_steps = 0;
    let mut window_tasks: BTreeMap<String, usize> = BTreeMap::new();
    let mut initial_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    for step in 1..=cfg.total_steps {
        let ti = (step - 1) % tasks.len();
        let task = tasks[ti];
        let picked = samplers[ti].next_batch(task.examples, cfg.batch_size);
        let batch = MultimodalBatch::from_examples(task.task_id, &picked, &model_cfg)?;
        let (loss, grads) = loss_and_grads(
            backbone,
            adapters,
            &batch,
            trainable.clone(),
            &opts,
            step_seed(cfg.seed, step),
        )?;
        if !loss.is_finite() || loss > cfg.divergence_loss {
            return Err(Error::Divergence { step, loss });
        }
        if step == 1 {
            initial_loss = loss;
        }
        last_loss = loss;
        let lr = lr_at(step, cfg.peak_lr, cfg.warmup_steps);
        {
            let mut slots: Vec<(String, &mut Tensor)> = if full_ft {
                backbone
                    .params_mut()
                    .iter_mut()
                    .map(|(n, t)| (n.to_string(), t))
                    .collect()
            } else {
                adapters.named_params_mut()
            };
            let mut triples: Vec<(&str, &mut Tensor, &[f64])> = slots
                .iter_mut()
                .filter_map(|(n, t)| {
                    grads
                        .get(n.as_str())
                        .map(|g| (n.as_str(), &mut **t, g.as_slice()))
                })
                .collect();
            match &mut opt {
                Optimizer::Adafactor(o) => o.step(&mut triples, lr)?,
                Optimizer::Sgd(o) => o.step(&mut triples, lr)?,
            }
        }
        window_loss += loss;
        window_steps += 1;
        *window_tasks.entry(task.task_id.to_string()).or_default() += 1;
        if step % cfg.log_every == 0 || step == cfg.total_steps {
            records.push(LogRecord {
                step,
                lr,
                loss: window_loss / window_steps as f64,
                tasks: std::mem::take(&mut window_tasks),
            });
            window_loss = 0.0;
            window_steps = 0;
        }
    }
    Ok(TrainReport {
        kind: adapters.kind(),
        steps: cfg.total_steps,
        trainable_params,
        initial_loss,
        final_loss: last_loss,
        records,
        optimizer: cfg.optimizer,
        adafactor: cfg.adafactor,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub n: usize,
}

/// Greedy-decoding metrics over `examples`, in batches of `batch_size`.
pub fn evaluate(
    backbone: &Backbone,
    adapters: Option<&AdapterSet>,
    task_id: &str,
    examples: &[Example],
    batch_size: usize,
) -> Result<EvalMetrics> {
    let cfg = backbone.config();
    let mut em = 0.0;
    let mut acc = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = MultimodalBatch::from_examples(task_id, &refs, cfg)?;
        let preds = backbone.greedy_decode(&batch, adapters, cfg.max_target_len)?;
        for (p, e) in preds.iter().zip(chunk) {
            em += exact_match(p, &e.target);
            acc += token_accuracy(p, &e.target);
        }
    }
    let n = examples.len();
    let d = n.max(1) as f64;
    Ok(EvalMetrics {
        exact_match: em / d,
        token_accuracy: acc / d,
        n,
    })
}

/// Worst relative error between autodiff and central differences for every
/// trainable parameter of `adapters` on `batch` (eval mode).
pub fn model_grad_check(
    backbone: &Backbone,
    adapters: &AdapterSet,
    batch: &MultimodalBatch,
    h: f64,
) -> Result<f64> {
    let trainable = trainable_for(adapters, backbone.config());
    let named: Vec<(String, Tensor)> = if adapters.kind() == AdapterKind::FullFt {
        backbone
            .params()
            .iter()
            .filter(|(n, _)| trainable.allows(n))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    } else {
        adapters
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    };
    let tensors: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
    let opts = ForwardOptions::eval();
    grad_check(
        |g, vars| {
            let mut b = Binder::eval();
            for ((n, _), &v) in named.iter().zip(vars) {
                b.preset(n.clone(), v);
            }
            batch_loss(g, &mut b, backbone, Some(adapters), batch, &opts)
        },
        &tensors,
        h,
    )
}
