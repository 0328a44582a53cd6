//! Declarative experiments: pretrain a backbone, tune adapters, evaluate,
//! and tabulate parameter and compute costs.

mod table;

pub use table::{thousands, Table};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{
    count_trainable_params, flops_added, AdaLinkLayout, AdapterKind, AdapterSet, AdapterSpec,
};
use crate::backbone::{Backbone, ModelConfig};
use crate::error::{Error, Result};
use crate::registry::{load_backbone, save_backbone, short_hash, RegistryEntry};
use crate::tasks::{generate_task, verify, Dataset, TaskDef, TaskKind};
use crate::training::{evaluate, train, EvalMetrics, TaskData, TrainConfig, TrainReport};

/// Environment variable that overrides every configured output directory root.
pub const OUTPUT_ENV: &str = "ADALINK_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Seed for the backbone's initial weights.
    pub init_seed: u64,
    pub train: TrainConfig,
    pub tasks: Vec<TaskDef>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            init_seed: 0,
            train: TrainConfig {
                peak_lr: 3e-3,
                total_steps: 2000,
                warmup_steps: 100,
                dropout_rate: Some(0.0),
                log_every: 100,
                ..TrainConfig::default()
            },
            tasks: pretext_tasks(),
        }
    }
}

/// Alias-0 questions, captions, and copying: the backbone's pretraining mix.
pub fn pretext_tasks() -> Vec<TaskDef> {
    vec![
        TaskDef::new("pretext_vqa", TaskKind::MmVqa, 1).with_sizes(4000, 200),
        TaskDef::new("pretext_caption", TaskKind::MmCaption, 2).with_sizes(4000, 200),
        TaskDef::new("pretext_copy", TaskKind::TextCopy, 3).with_sizes(3000, 200),
    ]
}

/// VQA phrased with question words the backbone never saw.
pub fn target_task() -> TaskDef {
    TaskDef::new("vqa_alias1", TaskKind::MmVqa, 4)
        .with_sizes(2000, 300)
        .with_alias(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    /// Load this backbone instead of pretraining one.
    pub backbone: Option<PathBuf>,
    pub model: ModelConfig,
    pub adapter: AdapterSpec,
    pub train: TrainConfig,
    /// Peak learning rate whenever the adapter is full fine-tuning.
    pub full_ft_lr: f64,
    pub eval_batch_size: usize,
    /// Ranks swept by the rank ablation.
    pub ranks: Vec<usize>,
    pub tasks: Vec<TaskDef>,
    pub pretrain: PretrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            output_dir: PathBuf::from("runs/toy"),
            backbone: None,
            model: ModelConfig::default(),
            adapter: AdapterSpec::adalink(8),
            train: TrainConfig {
                total_steps: 1500,
                warmup_steps: 100,
                log_every: 50,
                ..TrainConfig::default()
            },
            full_ft_lr: 3e-4,
            eval_batch_size: 64,
            ranks: vec![4, 16, 64],
            tasks: vec![target_task()],
            pretrain: PretrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            what: origin.to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Every field, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adapter.validate()?;
        self.train.validate()?;
        self.pretrain.train.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        if !(self.full_ft_lr > 0.0) {
            return Err(Error::Config("full_ft_lr must be positive".into()));
        }
        for t in self.tasks.iter().chain(&self.pretrain.tasks) {
            t.validate()?;
            if t.layout.size() != self.model.vocab_size {
                return Err(Error::Config(format!(
                    "task `{}` uses a vocabulary of {} tokens, model has {}",
                    t.task_id,
                    t.layout.size(),
                    self.model.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// `output_dir`, re-rooted under `$ADALINK_OUT` when that is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(root) => {
                let rel = self
                    .output_dir
                    .strip_prefix("/")
                    .unwrap_or(&self.output_dir);
                PathBuf::from(root).join(rel)
            }
            None => self.output_dir.clone(),
        }
    }

    pub fn train_config_for(&self, kind: AdapterKind) -> TrainConfig {
        let mut t = self.train.clone();
        if kind == AdapterKind::FullFt {
            t.peak_lr = self.full_ft_lr;
        }
        t
    }

    /// Digest of everything that determines the pretrained backbone.
    pub fn backbone_hash(&self) -> String {
        let key = serde_json::to_string(&(&self.model, &self.pretrain)).expect("serialises");
        short_hash(key.as_bytes())
    }

    /// Writes the resolved config next to results.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Generates and verifies every task.
pub fn load_tasks(defs: &[TaskDef]) -> Result<Vec<Dataset>> {
    defs.iter()
        .map(|d| {
            let ds = generate_task(d)?;
            verify(&ds)?;
            Ok(ds)
        })
        .collect()
}

fn task_data(datasets: &[Dataset]) -> Vec<TaskData<'_>> {
    datasets
        .iter()
        .map(|d| TaskData {
            task_id: &d.def.task_id,
            examples: &d.train,
        })
        .collect()
}

pub fn pretrain_backbone(
    model: &ModelConfig,
    pretrain: &PretrainConfig,
) -> Result<(Backbone, TrainReport)> {
    let mut backbone = Backbone::new(model.clone(), pretrain.init_seed)?;
    let datasets = load_tasks(&pretrain.tasks)?;
    let mut full = AdapterSet::new(AdapterSpec::FullFt, model, None, 0)?;
    let report = train(
        &mut backbone,
        &mut full,
        &task_data(&datasets),
        &pretrain.train,
    )?;
    Ok((backbone, report))
}

/// The configured backbone: loaded from `backbone`, else read from the
/// output directory cache, else pretrained and cached there.
pub fn obtain_backbone(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Backbone> {
    if let Some(path) = &cfg.backbone {
        let b = load_backbone(path)?;
        if b.config() != &cfg.model {
            return Err(Error::Config(format!(
                "{} was built for a different model config",
                path.display()
            )));
        }
        return Ok(b);
    }
    let path = out_dir.join(format!("backbone-{}.adlk", cfg.backbone_hash()));
    if path.exists() {
        return load_backbone(&path);
    }
    let (b, _) = pretrain_backbone(&cfg.model, &cfg.pretrain)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_backbone(&path, &b)?;
    Ok(b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of tuning one adapter spec.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: AdapterSpec,
    pub trainable_params: u64,
    pub reports: Vec<(String, TrainReport)>,
    pub metrics: Vec<(String, EvalMetrics)>,
    /// One adapter per task (shared adapters repeat).
    pub adapters: Vec<(String, AdapterSet)>,
    /// The tuned backbone under full fine-tuning.
    pub tuned_backbone: Option<Backbone>,
    pub checks: Vec<Check>,
}

impl RunResult {
    pub fn mean_exact_match(&self) -> f64 {
        let n = self.metrics.len().max(1) as f64;
        self.metrics.iter().map(|(_, m)| m.exact_match).sum::<f64>() / n
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn metrics_table(&self) -> Table {
        let mut t = Table::new([
            "task",
            "adapter",
            "params",
            "exact_match",
            "token_accuracy",
            "n",
        ]);
        for (task, m) in &self.metrics {
            t.push([
                task.clone(),
                self.spec.kind().to_string(),
                self.trainable_params.to_string(),
                format!("{:.4}", m.exact_match),
                format!("{:.4}", m.token_accuracy),
                m.n.to_string(),
            ]);
        }
        t
    }
}

/// Tunes `spec` on `datasets` (jointly, or one adapter per task when the
/// spec asks for it) and evaluates on each validation split.
pub fn run_adapter(
    backbone: &Backbone,
    spec: &AdapterSpec,
    train_cfg: &TrainConfig,
    datasets: &[Dataset],
    eval_batch_size: usize,
) -> Result<RunResult> {
    let model = backbone.config();
    let per_task = matches!(spec, AdapterSpec::AdaLink { per_task: true, .. });
    let groups: Vec<Vec<&Dataset>> = if per_task {
        datasets.iter().map(|d| vec![d]).collect()
    } else {
        vec![datasets.iter().collect()]
    };
    let before = backbone.checksum();
    let mut reports = Vec::new();
    let mut metrics = Vec::new();
    let mut adapters_out = Vec::new();
    let mut tuned_backbone = None;
    let mut checks = Vec::new();
    for group in groups {
        let mut tuned = backbone.clone();
        let mut adapters = AdapterSet::new(
            spec.clone(),
            model,
            Some(backbone.token_embedding()),
            train_cfg.seed,
        )?;
        let data: Vec<TaskData> = group
            .iter()
            .map(|d| TaskData {
                task_id: &d.def.task_id,
                examples: &d.train,
            })
            .collect();
        let label = group
            .iter()
            .map(|d| d.def.task_id.as_str())
            .collect::<Vec<_>>()
            .join("+");
        let report = train(&mut tuned, &mut adapters, &data, train_cfg)?;
        let serving = if spec.kind() == AdapterKind::FullFt {
            &tuned
        } else {
            backbone
        };
        for d in &group {
            let m = evaluate(
                serving,
                Some(&adapters),
                &d.def.task_id,
                &d.val,
                eval_batch_size,
            )?;
            metrics.push((d.def.task_id.clone(), m));
            adapters_out.push((d.def.task_id.clone(), adapters.clone()));
        }
        if spec.kind() != AdapterKind::FullFt {
            let after = tuned.checksum();
            checks.push(Check {
                name: format!("frozen backbone ({label})"),
                passed: after == before,
                detail: format!("{before:016x} -> {after:016x}"),
            });
        } else {
            tuned_backbone = Some(tuned);
        }
        checks.push(Check {
            name: format!("finite loss ({label})"),
            passed: report.final_loss.is_finite(),
            detail: format!("{:.6}", report.final_loss),
        });
        reports.push((label, report));
    }
    let n_modalities = if datasets.iter().any(|d| d.def.kind.is_multimodal()) {
        2
    } else {
        1
    };
    let n_tasks = if per_task { datasets.len() } else { 1 };
    let trainable_params = count_trainable_params(spec, model, n_tasks, n_modalities).total();
    let actual: u64 = reports.iter().map(|(_, r)| r.trainable_params as u64).sum();
    checks.push(Check {
        name: "parameter count matches formula".into(),
        passed: actual == trainable_params,
        detail: format!("{actual} vs {trainable_params}"),
    });
    Ok(RunResult {
        spec: spec.clone(),
        trainable_params,
        reports,
        metrics,
        adapters: adapters_out,
        tuned_backbone,
        checks,
    })
}

/// Registry entries for a finished adapter run.
pub fn registry_entries(
    run: &RunResult,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<RegistryEntry>> {
    let hash = short_hash(toml::to_string(train_cfg).expect("serialises").as_bytes());
    run.adapters
        .iter()
        .map(|(task, a)| {
            RegistryEntry::new(
                task.clone(),
                a.clone(),
                model,
                hash.clone(),
                train_cfg.total_steps,
            )
        })
        .collect()
}

fn with_rank(spec: &AdapterSpec, rank: usize) -> AdapterSpec {
    match spec {
        AdapterSpec::AdaLink {
            layout,
            nonlinearity,
            per_task,
            ..
        } => AdapterSpec::AdaLink {
            rank,
            layout: *layout,
            nonlinearity: *nonlinearity,
            per_task: *per_task,
        },
        _ => AdapterSpec::adalink(rank),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub rank: usize,
    pub params: u64,
    pub exact_match: f64,
    pub token_accuracy: f64,
}

fn ablation_row(label: String, rank: usize, run: &RunResult) -> AblationRow {
    let n = run.metrics.len().max(1) as f64;
    AblationRow {
        label,
        rank,
        params: run.trainable_params,
        exact_match: run.mean_exact_match(),
        token_accuracy: run
            .metrics
            .iter()
            .map(|(_, m)| m.token_accuracy)
            .sum::<f64>()
            / n,
    }
}

pub fn ablation_table(rows: &[AblationRow]) -> Table {
    let mut t = Table::new(["config", "rank", "params", "exact_match", "token_accuracy"]);
    for r in rows {
        t.push([
            r.label.clone(),
            r.rank.to_string(),
            r.params.to_string(),
            format!("{:.4}", r.exact_match),
            format!("{:.4}", r.token_accuracy),
        ]);
    }
    t
}

/// AdaLink at each rank, all else equal.
pub fn ablate_rank(
    backbone: &Backbone,
    cfg: &ExperimentConfig,
    datasets: &[Dataset],
    ranks: &[usize],
) -> Result<Vec<AblationRow>> {
    ranks
        .iter()
        .map(|&r| {
            let spec = with_rank(&cfg.adapter, r);
            let run = run_adapter(
                backbone,
                &spec,
                &cfg.train_config_for(spec.kind()),
                datasets,
                cfg.eval_batch_size,
            )?;
            Ok(ablation_row(format!("rank {r}"), r, &run))
        })
        .collect()
}

/// Per-modality AdaLink at rank `r` against one unified module at `2r`.
pub fn ablate_modality(
    backbone: &Backbone,
    cfg: &ExperimentConfig,
    datasets: &[Dataset],
) -> Result<Vec<AblationRow>> {
    let r = cfg.adapter.rank().unwrap_or(8);
    let variants = [
        ("per_modality", AdaLinkLayout::PerModality, r),
        ("unified", AdaLinkLayout::Unified, 2 * r),
    ];
    variants
        .iter()
        .map(|&(label, layout, rank)| {
            let spec = AdapterSpec::AdaLink {
                rank,
                layout,
                nonlinearity: matches!(
                    cfg.adapter,
                    AdapterSpec::AdaLink {
                        nonlinearity: true,
                        ..
                    }
                ),
                per_task: false,
            };
            let run = run_adapter(
                backbone,
                &spec,
                &cfg.train_config_for(spec.kind()),
                datasets,
                cfg.eval_batch_size,
            )?;
            Ok(ablation_row(label.to_string(), rank, &run))
        })
        .collect()
}

/// A parameter count as reported in a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRow {
    pub label: &'static str,
    pub spec: AdapterSpec,
    pub d_emb: usize,
    pub n_modalities: usize,
    pub reported: &'static str,
    pub count: u64,
}

/// Parameter counts of the published configurations.
pub fn reference_param_rows() -> Vec<ParamRow> {
    let text_only = |rank| AdapterSpec::AdaLink {
        rank,
        layout: AdaLinkLayout::TextOnly,
        nonlinearity: false,
        per_task: false,
    };
    let rows: [(&'static str, AdapterSpec, usize, usize, &'static str, bool); 7] = [
        (
            "AdaLink, PaLI-X VQA",
            AdapterSpec::adalink(64),
            4096,
            2,
            "1.05M",
            false,
        ),
        (
            "AdaLink, PaLI-5B VQA",
            AdapterSpec::adalink(64),
            2048,
            2,
            "524k",
            false,
        ),
        (
            "prompt tuning, PaLI-X",
            AdapterSpec::prompt_tuning(),
            4096,
            2,
            "262k",
            true,
        ),
        (
            "prompt tuning, PaLI-5B",
            AdapterSpec::prompt_tuning(),
            2048,
            2,
            "131k",
            true,
        ),
        (
            "AdaLink, T5 per task",
            text_only(4),
            1024,
            1,
            "0.008M",
            false,
        ),
        ("AdaLink, T5 r=256", text_only(256), 1024, 1, "0.5M", false),
        (
            "AdaLink, T5 multi-task",
            text_only(1024),
            1024,
            1,
            "2M",
            false,
        ),
    ];
    rows.into_iter()
        .map(|(label, spec, d, m, reported, core_only)| {
            let cfg = ModelConfig {
                d_emb: d,
                ..ModelConfig::default()
            };
            let c = count_trainable_params(&spec, &cfg, 1, m);
            ParamRow {
                label,
                d_emb: d,
                n_modalities: m,
                reported,
                count: if core_only { c.core } else { c.total() },
                spec,
            }
        })
        .collect()
}

pub fn params_table(cfg: &ExperimentConfig) -> Table {
    let mut t = Table::new([
        "method",
        "d_emb",
        "rank",
        "modalities",
        "params",
        "extra",
        "reported",
    ]);
    for r in reference_param_rows() {
        let c = count_trainable_params(
            &r.spec,
            &ModelConfig {
                d_emb: r.d_emb,
                ..ModelConfig::default()
            },
            1,
            r.n_modalities,
        );
        t.push([
            r.label.to_string(),
            r.d_emb.to_string(),
            r.spec.rank().map_or("-".into(), |x| x.to_string()),
            r.n_modalities.to_string(),
            thousands(r.count),
            thousands(c.extra),
            r.reported.to_string(),
        ]);
    }
    let model = &cfg.model;
    let mut specs = vec![cfg.adapter.clone()];
    for s in [
        AdapterSpec::adalink(8),
        AdapterSpec::lora(4),
        AdapterSpec::prompt_tuning(),
        AdapterSpec::FullFt,
    ] {
        if !specs.contains(&s) {
            specs.push(s);
        }
    }
    for s in specs {
        let c = count_trainable_params(&s, model, 1, 2);
        t.push([
            format!("{} (this model)", s.kind()),
            model.d_emb.to_string(),
            s.rank().map_or("-".into(), |x| x.to_string()),
            "2".into(),
            thousands(c.core),
            thousands(c.extra),
            "-".into(),
        ]);
    }
    t
}

/// Added multiply-accumulates per forward pass at each encoder depth.
pub fn flops_table(cfg: &ExperimentConfig, seq_len: usize, layers: &[usize]) -> Table {
    let mut headers = vec!["adapter".to_string()];
    headers.extend(layers.iter().map(|l| format!("layers={l}")));
    let mut t = Table::new(headers);
    let specs = [
        cfg.adapter.clone(),
        AdapterSpec::lora(4),
        AdapterSpec::prompt_tuning(),
    ];
    for s in specs {
        let mut row = vec![match s.rank() {
            Some(r) => format!("{} r={r}", s.kind()),
            None => s.kind().to_string(),
        }];
        for &l in layers {
            let m = ModelConfig {
                n_enc_layers: l,
                n_dec_layers: l,
                ..cfg.model.clone()
            };
            row.push(thousands(flops_added(&s, seq_len, &m)));
        }
        t.push(row);
    }
    t
}
