//! Per-task adapter storage and routing over one frozen backbone.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointKind, MAGIC, VERSION};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdaLinkLayout, AdaLinkModule, AdapterKind, AdapterSet, AdapterSpec, Scope};
use crate::backbone::{Backbone, ForwardOptions, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tasks::{Example, MultimodalBatch};
use crate::tensor::Tensor;

const BAKED_TABLE: &str = "serving.text_table";
const INDEX_FILE: &str = "index.json";

pub fn backbone_checkpoint(backbone: &Backbone) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Backbone,
        config: serde_json::to_string(backbone.config()).expect("config serialises"),
        tensors: backbone
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect(),
    }
}

pub fn save_backbone(path: &Path, backbone: &Backbone) -> Result<()> {
    backbone_checkpoint(backbone).save(path)
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(CheckpointKind::Backbone)?;
    let config: ModelConfig = serde_json::from_str(&ck.config).map_err(|e| Error::Parse {
        what: format!("{} config", path.display()),
        msg: e.to_string(),
    })?;
    Backbone::from_params(config, ck.tensors.into_iter().collect::<ParamStore>())
}

/// `table + f(table·W_down)·W_up`, row by row. Only text modules can be baked.
pub fn bake_text_adalink(backbone: &Backbone, module: &AdaLinkModule) -> Result<Tensor> {
    if module.scope != Scope::Text {
        return Err(Error::Contract(format!(
            "only text-scope AdaLink can be baked into the vocabulary, got `{}`",
            module.scope.name()
        )));
    }
    if module.d_emb() != backbone.config().d_emb {
        return Err(Error::dim(
            "bake",
            module.down.shape(),
            &[backbone.config().d_emb],
        ));
    }
    module.apply(backbone.token_embedding())
}

/// Everything stored for one task besides tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryMeta {
    pub task_id: String,
    pub spec: AdapterSpec,
    /// Backbone dimensions the adapter was trained against.
    pub model: ModelConfig,
    pub rank: Option<usize>,
    pub scope: String,
    pub train_config_hash: String,
    pub creation_step: usize,
    pub dropout_rate: Option<f64>,
    /// The text module lives in `serving.text_table` instead of the adapter.
    pub baked: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistryEntry {
    pub meta: EntryMeta,
    pub adapters: AdapterSet,
    pub baked_text_table: Option<Tensor>,
}

fn scope_name(spec: &AdapterSpec) -> String {
    match spec {
        AdapterSpec::AdaLink { layout, .. } => match layout {
            AdaLinkLayout::PerModality => "per_modality",
            AdaLinkLayout::Unified => "unified",
            AdaLinkLayout::TextOnly => "text",
        }
        .to_string(),
        other => other.kind().to_string(),
    }
}

pub(crate) fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl RegistryEntry {
    pub fn new(
        task_id: impl Into<String>,
        adapters: AdapterSet,
        model: &ModelConfig,
        train_config_hash: impl Into<String>,
        creation_step: usize,
    ) -> Result<Self> {
        if adapters.kind() == AdapterKind::FullFt {
            return Err(Error::Config(
                "full fine-tuning produces a backbone, not a registry adapter".into(),
            ));
        }
        adapters.check_compatible(model)?;
        let spec = adapters.spec().clone();
        Ok(Self {
            meta: EntryMeta {
                task_id: task_id.into(),
                rank: spec.rank(),
                scope: scope_name(&spec),
                spec,
                model: model.clone(),
                train_config_hash: train_config_hash.into(),
                creation_step,
                dropout_rate: adapters.dropout_rate,
                baked: false,
            },
            adapters,
            baked_text_table: None,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.meta.task_id
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .adapters
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        if let Some(t) = &self.baked_text_table {
            tensors.push((BAKED_TABLE.to_string(), t.clone()));
        }
        Checkpoint {
            kind: CheckpointKind::Adapter,
            config: serde_json::to_string(&self.meta).expect("meta serialises"),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(CheckpointKind::Adapter)?;
        let meta: EntryMeta = serde_json::from_str(&ck.config).map_err(|e| Error::Parse {
            what: "adapter checkpoint config".into(),
            msg: e.to_string(),
        })?;
        let mut adapters = AdapterSet::new(meta.spec.clone(), &meta.model, None, 0)?;
        adapters.dropout_rate = meta.dropout_rate;
        if meta.baked {
            let mm = adapters
                .adalink_mut()
                .ok_or_else(|| Error::Contract("baked entry is not an AdaLink adapter".into()))?;
            mm.text = None;
        }
        let expected = adapters.named_params().len() + meta.baked as usize;
        if ck.tensors.len() != expected {
            return Err(Error::Parse {
                what: format!("adapter `{}`", meta.task_id),
                msg: format!("{} tensors, expected {expected}", ck.tensors.len()),
            });
        }
        let mut baked_text_table = None;
        for (name, t) in ck.tensors {
            if meta.baked && name == BAKED_TABLE {
                baked_text_table = Some(t);
            } else {
                adapters.set_param(&name, t)?;
            }
        }
        if meta.baked && baked_text_table.is_none() {
            return Err(Error::Parse {
                what: format!("adapter `{}`", meta.task_id),
                msg: "baked entry without a text table".into(),
            });
        }
        Ok(Self {
            meta,
            adapters,
            baked_text_table,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// Bytes this entry occupies on disk.
    pub fn storage_bytes(&self) -> usize {
        self.to_checkpoint().to_bytes().len()
    }

    /// Folds the text module into a copy of the token table.
    pub fn bake(&self, backbone: &Backbone) -> Result<RegistryEntry> {
        if self.meta.baked {
            return Ok(self.clone());
        }
        let mm = self.adapters.adalink().ok_or_else(|| {
            Error::Contract(format!("cannot bake a {} adapter", self.adapters.kind()))
        })?;
        if mm.unified.is_some() {
            return Err(Error::Contract(
                "a unified AdaLink also adapts image features and cannot be baked".into(),
            ));
        }
        let text = mm
            .text
            .as_ref()
            .ok_or_else(|| Error::Contract("adapter has no text module to bake".into()))?;
        let table = bake_text_adalink(backbone, text)?;
        let mut out = self.clone();
        out.adapters.adalink_mut().expect("checked above").text = None;
        out.baked_text_table = Some(table);
        out.meta.baked = true;
        Ok(out)
    }

    fn options(&self) -> ForwardOptions<'_> {
        ForwardOptions {
            text_table: self.baked_text_table.as_ref(),
            ..ForwardOptions::eval()
        }
    }

    /// Eval-mode logits through this entry's adapter.
    pub fn logits(&self, backbone: &Backbone, batch: &MultimodalBatch) -> Result<Tensor> {
        backbone.logits_with(batch, Some(&self.adapters), &self.options())
    }

    pub fn decode(
        &self,
        backbone: &Backbone,
        batch: &MultimodalBatch,
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        backbone.greedy_decode_with(batch, Some(&self.adapters), max_len, &self.options())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryStats {
    pub task_id: String,
    pub kind: AdapterKind,
    pub scope: String,
    pub params: usize,
    pub bytes: usize,
    /// Size of the baked token table, when present.
    pub baked_table_bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryStats {
    pub entries: Vec<EntryStats>,
    pub total_bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    task_id: String,
    file: String,
    spec_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Index {
    version: u32,
    entries: Vec<IndexEntry>,
}

/// Task id → adapter map. Lookups clone an `Arc` under a read lock, so
/// replacing one task's adapter never waits on inference for another.
#[derive(Debug)]
pub struct AdapterRegistry {
    model: ModelConfig,
    entries: RwLock<BTreeMap<String, Arc<RegistryEntry>>>,
}

impl AdapterRegistry {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, BTreeMap<String, Arc<RegistryEntry>>> {
        self.entries.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, BTreeMap<String, Arc<RegistryEntry>>> {
        self.entries.write().unwrap_or_else(|e| e.into_inner())
    }

    /// Adds or replaces the adapter for `entry.task_id()`, returning the old one.
    pub fn register(&self, entry: RegistryEntry) -> Result<Option<Arc<RegistryEntry>>> {
        entry.adapters.check_compatible(&self.model)?;
        if let Some(t) = &entry.baked_text_table {
            let want = [self.model.vocab_size, self.model.d_emb];
            if t.shape() != want {
                return Err(Error::dim("baked text table", t.shape(), &want));
            }
        }
        let id = entry.task_id().to_string();
        Ok(self.write().insert(id, Arc::new(entry)))
    }

    pub fn remove(&self, task_id: &str) -> Result<Arc<RegistryEntry>> {
        let mut map = self.write();
        match map.remove(task_id) {
            Some(e) => Ok(e),
            None => Err(Error::Routing {
                task: task_id.to_string(),
                known: map.keys().cloned().collect(),
            }),
        }
    }

    pub fn get(&self, task_id: &str) -> Result<Arc<RegistryEntry>> {
        let map = self.read();
        map.get(task_id).cloned().ok_or_else(|| Error::Routing {
            task: task_id.to_string(),
            known: map.keys().cloned().collect(),
        })
    }

    /// The adapter responsible for `batch`.
    pub fn route(&self, batch: &MultimodalBatch) -> Result<Arc<RegistryEntry>> {
        self.get(&batch.task_id)
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.read().keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.read().is_empty()
    }

    /// Logits for each batch, each routed to its own task's adapter.
    pub fn serve(&self, backbone: &Backbone, batches: &[MultimodalBatch]) -> Result<Vec<Tensor>> {
        batches
            .iter()
            .map(|b| self.route(b)?.logits(backbone, b))
            .collect()
    }

    /// Greedy predictions for a stream that mixes tasks. Examples are grouped
    /// by task, run through their adapter, and returned in input order.
    pub fn decode_mixed(
        &self,
        backbone: &Backbone,
        items: &[(&str, &Example)],
        batch_size: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, (task, _)) in items.iter().enumerate() {
            groups.entry(task).or_default().push(i);
        }
        let mut out = vec![Vec::new(); items.len()];
        let cfg = backbone.config();
        for (task, idx) in groups {
            let entry = self.get(task)?;
            for chunk in idx.chunks(batch_size.max(1)) {
                let exs: Vec<&Example> = chunk.iter().map(|&i| items[i].1).collect();
                let batch = MultimodalBatch::from_examples(task, &exs, cfg)?;
                for (&i, pred) in
                    chunk
                        .iter()
                        .zip(entry.decode(backbone, &batch, cfg.max_target_len)?)
                {
                    out[i] = pred;
                }
            }
        }
        Ok(out)
    }

    pub fn stats(&self) -> RegistryStats {
        let entries: Vec<EntryStats> = self
            .read()
            .values()
            .map(|e| EntryStats {
                task_id: e.task_id().to_string(),
                kind: e.adapters.kind(),
                scope: e.meta.scope.clone(),
                params: e.adapters.num_params(),
                bytes: e.storage_bytes(),
                baked_table_bytes: e.baked_text_table.as_ref().map_or(0, |t| t.numel() * 8),
            })
            .collect();
        RegistryStats {
            total_bytes: entries.iter().map(|e| e.bytes).sum(),
            entries,
        }
    }

    /// Writes one checkpoint per task plus `index.json`, replacing any
    /// checkpoints a previous index listed.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let index_path = dir.join(INDEX_FILE);
        if let Ok(old) = fs::read_to_string(&index_path) {
            if let Ok(old) = serde_json::from_str::<Index>(&old) {
                for e in old.entries {
                    let _ = fs::remove_file(dir.join(e.file));
                }
            }
        }
        let mut index = Index {
            version: VERSION,
            entries: Vec::new(),
        };
        for (i, (id, entry)) in self.read().iter().enumerate() {
            let safe: String = id
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                        c
                    } else {
                        '_'
                    }
                })
                .collect();
            let file = format!("{i:04}_{safe}.adlk");
            entry.save(&dir.join(&file))?;
            index.entries.push(IndexEntry {
                task_id: id.clone(),
                file,
                spec_hash: short_hash(
                    serde_json::to_string(&entry.meta.spec)
                        .expect("spec serialises")
                        .as_bytes(),
                ),
            });
        }
        let json = serde_json::to_string_pretty(&index).expect("index serialises");
        fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))
    }

    pub fn load_dir(dir: &Path, model: ModelConfig) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: Index = serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: index_path.display().to_string(),
            msg: e.to_string(),
        })?;
        if index.version != VERSION {
            return Err(Error::Version {
                found: index.version,
                expected: VERSION,
            });
        }
        let reg = Self::new(model);
        for ie in index.entries {
            let entry = RegistryEntry::load(&dir.join(&ie.file))?;
            if entry.task_id() != ie.task_id {
                return Err(Error::Parse {
                    what: index_path.display().to_string(),
                    msg: format!(
                        "{} holds task `{}`, index says `{}`",
                        ie.file,
                        entry.task_id(),
                        ie.task_id
                    ),
                });
            }
            reg.register(entry)?;
        }
        Ok(reg)
    }
}
