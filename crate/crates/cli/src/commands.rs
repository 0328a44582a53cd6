use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use adalink::adapters::{flops_added, AdapterKind, AdapterSpec};
use adalink::backbone::{Backbone, ModelConfig};
use adalink::experiment::{
    ablate_modality, ablate_rank, ablation_table, flops_table, load_tasks, obtain_backbone,
    params_table, registry_entries, run_adapter, AblationRow, Check, ExperimentConfig, Table,
};
use adalink::registry::{load_backbone, save_backbone, AdapterRegistry, RegistryEntry};
use adalink::tasks::oracle::{bag_of_tokens_logistic, text_only_majority, vqa_chance};
use adalink::tasks::{
    exact_match, token_accuracy, write_dataset, Dataset, Example, MultimodalBatch, TaskKind,
};
use adalink::training::evaluate;
use anyhow::{bail, Context, Result};

use crate::{Cli, Command, RegistryOp};

const EXAMPLE_CONFIG: &str = include_str!("../../../configs/example.toml");

/// Runs one command. `Ok(false)` means it finished but a check failed.
pub fn run(cli: Cli) -> Result<bool> {
    if let Command::ExampleConfig = cli.command {
        print!("{EXAMPLE_CONFIG}");
        return Ok(true);
    }
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let out = cfg.resolved_output_dir();
    cfg.write_resolved(&out)?;
    match cli.command {
        Command::GenTasks => gen_tasks(&cfg, &out),
        Command::Train => train(&cfg, &out),
        Command::Eval {
            adapter,
            backbone,
            task,
        } => eval(
            &cfg,
            &out,
            adapter.as_deref(),
            backbone.as_deref(),
            task.as_deref(),
        ),
        Command::Params => {
            emit(&out, "params", &params_table(&cfg))?;
            Ok(true)
        }
        Command::Flops { seq_len, layers } => flops(&cfg, &out, seq_len, &layers),
        Command::AblateRank { ranks } => {
            let ranks = ranks.unwrap_or_else(|| cfg.ranks.clone());
            if ranks.is_empty() {
                bail!("no ranks to sweep");
            }
            let backbone = obtain_backbone(&cfg, &out)?;
            let datasets = load_tasks(&cfg.tasks)?;
            let rows = ablate_rank(&backbone, &cfg, &datasets, &ranks)?;
            emit(&out, "ablate_rank", &ablation_table(&rows))?;
            let monotone =
                rows.windows(2).all(|w| w[0].params <= w[1].params) || !is_sorted(&ranks);
            report_checks(
                &out,
                &[Check {
                    name: "parameter count nondecreasing in rank".into(),
                    passed: monotone,
                    detail: rows
                        .iter()
                        .map(|r| r.params.to_string())
                        .collect::<Vec<_>>()
                        .join(" "),
                }],
            )
        }
        Command::AblateModality => {
            let backbone = obtain_backbone(&cfg, &out)?;
            let datasets = load_tasks(&cfg.tasks)?;
            let rows = ablate_modality(&backbone, &cfg, &datasets)?;
            emit(&out, "ablate_modality", &ablation_table(&rows))?;
            report_checks(&out, &[matched_budget(&rows)])
        }
        Command::Bake { registry, task } => bake(&cfg, &out, &registry, task.as_deref()),
        Command::Registry { op } => registry_op(&cfg, op),
        Command::ExampleConfig => unreachable!("handled above"),
    }
}

fn is_sorted(xs: &[usize]) -> bool {
    xs.windows(2).all(|w| w[0] <= w[1])
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Prints `table` and writes `<name>.csv` and `<name>.txt` under `out`.
fn emit(out: &Path, name: &str, table: &Table) -> Result<()> {
    let text = table.to_text();
    print!("{text}");
    write(&out.join(format!("{name}.csv")), &table.to_csv())?;
    write(&out.join(format!("{name}.txt")), &text)
}

fn report_checks(out: &Path, checks: &[Check]) -> Result<bool> {
    let mut t = Table::new(["check", "passed", "detail"]);
    for c in checks {
        t.push([c.name.clone(), c.passed.to_string(), c.detail.clone()]);
        eprintln!(
            "[{}] {}: {}",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    write(&out.join("checks.csv"), &t.to_csv())?;
    Ok(checks.iter().all(|c| c.passed))
}

fn matched_budget(rows: &[AblationRow]) -> Check {
    let params: Vec<u64> = rows.iter().map(|r| r.params).collect();
    Check {
        name: "matched parameter budget".into(),
        passed: params.windows(2).all(|w| w[0] == w[1]),
        detail: format!("{params:?}"),
    }
}

fn gen_tasks(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let dir = out.join("tasks");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut t = Table::new([
        "task",
        "kind",
        "n_train",
        "n_val",
        "config_hash",
        "text_only",
        "chance",
        "logistic",
    ]);
    let defs: Vec<_> = cfg
        .pretrain
        .tasks
        .iter()
        .chain(&cfg.tasks)
        .cloned()
        .collect();
    for ds in load_tasks(&defs)? {
        let path = dir.join(format!("{}.jsonl", ds.def.task_id));
        write_dataset(&path, &ds)?;
        let def = &ds.def;
        let chance = match def.kind {
            TaskKind::MmVqa => format!("{:.4}", vqa_chance(def, &ds.val)),
            _ => "-".into(),
        };
        let logistic = match def.kind {
            TaskKind::TextCls => format!(
                "{:.4}",
                bag_of_tokens_logistic(
                    &ds.train,
                    &ds.val,
                    def.layout.size(),
                    def.layout.label(true)
                )
            ),
            _ => "-".into(),
        };
        t.push([
            def.task_id.clone(),
            format!("{:?}", def.kind),
            def.n_train.to_string(),
            def.n_val.to_string(),
            def.config_hash(),
            format!("{:.4}", text_only_majority(&ds.train, &ds.val)),
            chance,
            logistic,
        ]);
    }
    emit(out, "oracles", &t)?;
    Ok(true)
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let backbone = obtain_backbone(cfg, out)?;
    let datasets = load_tasks(&cfg.tasks)?;
    let kind = cfg.adapter.kind();
    let tcfg = cfg.train_config_for(kind);
    let run = run_adapter(
        &backbone,
        &cfg.adapter,
        &tcfg,
        &datasets,
        cfg.eval_batch_size,
    )?;

    let mut log = String::new();
    let mut loss = String::from("run,step,lr,loss\n");
    for (label, report) in &run.reports {
        let _ = writeln!(
            log,
            "# {label}: {} steps, {} trainable, loss {:.6} -> {:.6}, {:.1}s",
            report.steps,
            report.trainable_params,
            report.initial_loss,
            report.final_loss,
            report.wall_time_secs
        );
        log.push_str(&report.to_log());
        for row in report.to_csv().lines().skip(1) {
            let _ = writeln!(loss, "{label},{row}");
        }
    }
    write(&out.join("report.log"), &log)?;
    write(&out.join("loss.csv"), &loss)?;
    emit(out, "metrics", &run.metrics_table())?;

    if kind == AdapterKind::FullFt {
        let tuned = run
            .tuned_backbone
            .as_ref()
            .expect("full fine-tuning returns its backbone");
        save_backbone(&out.join("finetuned.adlk"), tuned)?;
    } else {
        let reg = AdapterRegistry::new(cfg.model.clone());
        for entry in registry_entries(&run, &cfg.model, &tcfg)? {
            reg.register(entry)?;
        }
        reg.save_dir(&out.join("adapters"))?;
    }
    report_checks(out, &run.checks)
}

enum Adapters {
    None,
    Registry(AdapterRegistry),
}

fn load_adapters(path: &Path, model: &ModelConfig) -> Result<AdapterRegistry> {
    if path.is_dir() {
        return Ok(AdapterRegistry::load_dir(path, model.clone())?);
    }
    let reg = AdapterRegistry::new(model.clone());
    reg.register(RegistryEntry::load(path)?)?;
    Ok(reg)
}

fn eval(
    cfg: &ExperimentConfig,
    out: &Path,
    adapter: Option<&Path>,
    backbone: Option<&Path>,
    task: Option<&str>,
) -> Result<bool> {
    let backbone: Backbone = match backbone {
        Some(p) => load_backbone(p)?,
        None => obtain_backbone(cfg, out)?,
    };
    let adapters = match adapter {
        Some(p) => Adapters::Registry(load_adapters(p, backbone.config())?),
        None => Adapters::None,
    };
    let defs: Vec<_> = cfg
        .tasks
        .iter()
        .filter(|d| task.is_none_or(|t| t == d.task_id))
        .cloned()
        .collect();
    if defs.is_empty() {
        bail!("task `{}` is not in the config", task.unwrap_or_default());
    }
    let mut t = Table::new(["task", "adapter", "exact_match", "token_accuracy", "n"]);
    for ds in load_tasks(&defs)? {
        let (label, em, acc) = match &adapters {
            Adapters::None => {
                let m = evaluate(
                    &backbone,
                    None,
                    &ds.def.task_id,
                    &ds.val,
                    cfg.eval_batch_size,
                )?;
                ("none".to_string(), m.exact_match, m.token_accuracy)
            }
            Adapters::Registry(reg) => {
                let entry = reg.get(&ds.def.task_id)?;
                let (em, acc) = registry_metrics(reg, &backbone, &ds, cfg.eval_batch_size)?;
                let label = if entry.meta.baked {
                    format!("{} (baked)", entry.meta.spec.kind())
                } else {
                    entry.meta.spec.kind().to_string()
                };
                (label, em, acc)
            }
        };
        t.push([
            ds.def.task_id.clone(),
            label,
            format!("{em:.4}"),
            format!("{acc:.4}"),
            ds.val.len().to_string(),
        ]);
    }
    emit(out, "eval", &t)?;
    Ok(true)
}

fn registry_metrics(
    reg: &AdapterRegistry,
    backbone: &Backbone,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let items: Vec<(&str, &Example)> = ds
        .val
        .iter()
        .map(|e| (ds.def.task_id.as_str(), e))
        .collect();
    let preds = reg.decode_mixed(backbone, &items, batch_size)?;
    let n = ds.val.len().max(1) as f64;
    let em: f64 = preds
        .iter()
        .zip(&ds.val)
        .map(|(p, e)| exact_match(p, &e.target))
        .sum();
    let acc: f64 = preds
        .iter()
        .zip(&ds.val)
        .map(|(p, e)| token_accuracy(p, &e.target))
        .sum();
    Ok((em / n, acc / n))
}

fn flops(
    cfg: &ExperimentConfig,
    out: &Path,
    seq_len: Option<usize>,
    layers: &[usize],
) -> Result<bool> {
    if layers.is_empty() {
        bail!("--layers needs at least one depth");
    }
    let n = seq_len.unwrap_or(cfg.model.n_patches + cfg.model.max_text_len);
    emit(out, "flops", &flops_table(cfg, n, layers))?;
    let at = |spec: &AdapterSpec, l: usize| {
        let m = ModelConfig {
            n_enc_layers: l,
            n_dec_layers: l,
            ..cfg.model.clone()
        };
        flops_added(spec, n, &m)
    };
    let mut checks = Vec::new();
    if cfg.adapter.kind() == AdapterKind::AdaLink {
        let v: Vec<u64> = layers.iter().map(|&l| at(&cfg.adapter, l)).collect();
        checks.push(Check {
            name: "AdaLink cost independent of depth".into(),
            passed: v.windows(2).all(|w| w[0] == w[1]),
            detail: format!("{v:?}"),
        });
    }
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let v: Vec<u64> = sorted
        .iter()
        .map(|&l| at(&AdapterSpec::prompt_tuning(), l))
        .collect();
    checks.push(Check {
        name: "prompt tuning cost increases with depth".into(),
        passed: v.windows(2).all(|w| w[0] < w[1]),
        detail: format!("{v:?}"),
    });
    report_checks(out, &checks)
}

fn bake(cfg: &ExperimentConfig, out: &Path, dir: &Path, task: Option<&str>) -> Result<bool> {
    let backbone = obtain_backbone(cfg, out)?;
    let reg = AdapterRegistry::load_dir(dir, cfg.model.clone())?;
    let ids = match task {
        Some(t) => vec![reg.get(t)?.task_id().to_string()],
        None => reg.task_ids(),
    };
    let mut checks = Vec::new();
    for id in ids {
        let live = reg.get(&id)?;
        let baked = match live.bake(&backbone) {
            Ok(b) => b,
            Err(e) if task.is_none() => {
                eprintln!("skipping `{id}`: {e}");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(ds) = cfg.tasks.iter().find(|d| d.task_id == id) {
            let ds = load_tasks(std::slice::from_ref(ds))?.remove(0);
            let mut same = true;
            for chunk in ds.val.chunks(cfg.eval_batch_size.max(1)) {
                let refs: Vec<&Example> = chunk.iter().collect();
                let batch = MultimodalBatch::from_examples(&id, &refs, &cfg.model)?;
                same &= live
                    .logits(&backbone, &batch)?
                    .bit_eq(&baked.logits(&backbone, &batch)?);
            }
            checks.push(Check {
                name: format!("baked logits equal live logits ({id})"),
                passed: same,
                detail: format!("{} validation examples", ds.val.len()),
            });
        }
        reg.register(baked)?;
        eprintln!("baked `{id}`");
    }
    reg.save_dir(dir)?;
    print!("{}", stats_table(&reg).to_text());
    report_checks(out, &checks)
}

fn stats_table(reg: &AdapterRegistry) -> Table {
    let stats = reg.stats();
    let mut t = Table::new([
        "task",
        "kind",
        "scope",
        "params",
        "bytes",
        "baked_table_bytes",
    ]);
    for e in &stats.entries {
        t.push([
            e.task_id.clone(),
            e.kind.to_string(),
            e.scope.clone(),
            e.params.to_string(),
            e.bytes.to_string(),
            e.baked_table_bytes.to_string(),
        ]);
    }
    t
}

fn registry_op(cfg: &ExperimentConfig, op: RegistryOp) -> Result<bool> {
    let open = |dir: &PathBuf| -> Result<AdapterRegistry> {
        if dir.join("index.json").exists() {
            Ok(AdapterRegistry::load_dir(dir, cfg.model.clone())?)
        } else {
            Ok(AdapterRegistry::new(cfg.model.clone()))
        }
    };
    match op {
        RegistryOp::Ls { dir } => {
            let reg = AdapterRegistry::load_dir(&dir, cfg.model.clone())?;
            let stats = reg.stats();
            print!("{}", stats_table(&reg).to_text());
            println!(
                "{} entries, {} bytes",
                stats.entries.len(),
                stats.total_bytes
            );
        }
        RegistryOp::Add { dir, sources } => {
            let reg = open(&dir)?;
            for src in &sources {
                let incoming = load_adapters(src, &cfg.model)?;
                for id in incoming.task_ids() {
                    let entry = (*incoming.get(&id)?).clone();
                    if reg.register(entry)?.is_some() {
                        eprintln!("replaced `{id}`");
                    } else {
                        eprintln!("added `{id}`");
                    }
                }
            }
            reg.save_dir(&dir)?;
        }
        RegistryOp::Rm { dir, task } => {
            let reg = AdapterRegistry::load_dir(&dir, cfg.model.clone())?;
            reg.remove(&task)?;
            reg.save_dir(&dir)?;
            eprintln!("removed `{task}`");
        }
    }
    Ok(true)
}
