use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab::{QuestionKind, VocabLayout, EOS};
use super::Example;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Describe every patch: `[color, shape]` per patch, in patch order.
    MmCaption,
    /// Ask for the color, shape, or both of one named patch.
    MmVqa,
    /// Label whether a marked content token occurs in the text.
    TextCls,
    /// Reproduce the input text.
    TextCopy,
}

impl TaskKind {
    pub fn is_multimodal(self) -> bool {
        matches!(self, TaskKind::MmCaption | TaskKind::MmVqa)
    }
}

fn default_alias() -> usize {
    0
}

fn default_text_len() -> usize {
    4
}

/// A seeded synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDef {
    pub task_id: String,
    pub kind: TaskKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    /// Which block of question words the task uses.
    #[serde(default = "default_alias")]
    pub alias: usize,
    /// Answers report colors shifted cyclically by this amount.
    #[serde(default)]
    pub pattern_family: usize,
    /// Content index whose presence makes a text_cls example positive.
    #[serde(default)]
    pub rule_token: usize,
    /// Text length for text-only tasks.
    #[serde(default = "default_text_len")]
    pub text_len: usize,
    #[serde(default)]
    pub layout: VocabLayout,
}

impl TaskDef {
    pub fn new(task_id: impl Into<String>, kind: TaskKind, seed: u64) -> Self {
        Self {
            task_id: task_id.into(),
            kind,
            seed,
            n_train: 1000,
            n_val: 200,
            alias: 0,
            pattern_family: 0,
            rule_token: 0,
            text_len: default_text_len(),
            layout: VocabLayout::default(),
        }
    }

    pub fn with_sizes(mut self, n_train: usize, n_val: usize) -> Self {
        self.n_train = n_train;
        self.n_val = n_val;
        self
    }

    pub fn with_alias(mut self, alias: usize) -> Self {
        self.alias = alias;
        self
    }

    pub fn with_family(mut self, family: usize) -> Self {
        self.pattern_family = family;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.layout;
        if self.task_id.is_empty() {
            return Err(Error::Config("task_id must not be empty".into()));
        }
        if self.alias >= l.n_aliases {
            return Err(Error::Config(format!(
                "task `{}`: alias {} but layout has {}",
                self.task_id, self.alias, l.n_aliases
            )));
        }
        if self.kind.is_multimodal() && l.n_shapes > l.n_positions {
            return Err(Error::Config(format!(
                "task `{}`: {} shapes cannot all appear in {} patches",
                self.task_id, l.n_shapes, l.n_positions
            )));
        }
        if l.n_colors == 0 || l.n_shapes == 0 || l.n_positions == 0 {
            return Err(Error::Config(
                "layout needs at least one color, shape and position".into(),
            ));
        }
        match self.kind {
            TaskKind::TextCls if self.rule_token >= l.n_content || l.n_content < 2 => {
                return Err(Error::Config(format!(
                    "task `{}`: rule token {} outside {} content words",
                    self.task_id, self.rule_token, l.n_content
                )))
            }
            TaskKind::TextCls | TaskKind::TextCopy if self.text_len == 0 || l.n_content == 0 => {
                return Err(Error::Config(format!(
                    "task `{}`: empty text",
                    self.task_id
                )))
            }
            _ => {}
        }
        Ok(())
    }

    /// Hex digest of the definition, recorded in dataset headers.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("TaskDef serialises");
        hex16(&Sha256::digest(json))
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.task_id.as_bytes());
        h.update(self.seed.to_le_bytes());
        let d = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&d);
        ChaCha8Rng::from_seed(seed)
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Train and validation splits of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub def: TaskDef,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// A patch grid: `(color, shape)` per patch.
pub type Scene = Vec<(usize, usize)>;

fn sample_scene<R: Rng>(l: &VocabLayout, rng: &mut R) -> Scene {
    let mut shapes: Vec<usize> = (0..l.n_shapes).collect();
    shapes.extend((l.n_shapes..l.n_positions).map(|_| rng.gen_range(0..l.n_shapes)));
    shapes.shuffle(rng);
    shapes
        .into_iter()
        .map(|s| (rng.gen_range(0..l.n_colors), s))
        .collect()
}

/// One-hot color block then one-hot shape block per patch.
pub fn encode_scene(l: &VocabLayout, scene: &[(usize, usize)]) -> Vec<i64> {
    let w = l.patch_feature_dim();
    let mut out = vec![0; scene.len() * w];
    for (i, &(c, s)) in scene.iter().enumerate() {
        out[i * w + c] = 1;
        out[i * w + l.n_colors + s] = 1;
    }
    out
}

/// Inverse of [`encode_scene`].
pub fn decode_scene(l: &VocabLayout, patches: &[i64]) -> Result<Scene> {
    let w = l.patch_feature_dim();
    if !patches.len().is_multiple_of(w) {
        return Err(Error::dim("patches", &[patches.len()], &[w]));
    }
    patches
        .chunks(w)
        .map(|p| {
            let hot = |range: std::ops::Range<usize>| {
                let on: Vec<usize> = range.clone().filter(|&i| p[i] == 1).collect();
                match (on.as_slice(), range.clone().all(|i| p[i] == 0 || p[i] == 1)) {
                    ([i], true) => Ok(i - range.start),
                    _ => Err(Error::Contract("patch features are not one-hot".into())),
                }
            };
            Ok((hot(0..l.n_colors)?, hot(l.n_colors..w)?))
        })
        .collect()
}

fn shifted(l: &VocabLayout, family: usize, color: usize) -> usize {
    l.color((color + family) % l.n_colors)
}

/// Gold answer (EOS-terminated) for a question about `scene`.
pub fn vqa_answer(
    def: &TaskDef,
    scene: &[(usize, usize)],
    kind: QuestionKind,
    position: usize,
) -> Vec<usize> {
    let l = &def.layout;
    let (c, s) = scene[position];
    let mut out = match kind {
        QuestionKind::Color => vec![shifted(l, def.pattern_family, c)],
        QuestionKind::Shape => vec![l.shape(s)],
        QuestionKind::Both => vec![shifted(l, def.pattern_family, c), l.shape(s)],
    };
    out.push(EOS);
    out
}

pub fn caption(def: &TaskDef, scene: &[(usize, usize)]) -> Vec<usize> {
    let l = &def.layout;
    let mut out: Vec<usize> = scene
        .iter()
        .flat_map(|&(c, s)| [shifted(l, def.pattern_family, c), l.shape(s)])
        .collect();
    out.push(EOS);
    out
}

fn gen_vqa_example<R: Rng>(def: &TaskDef, rng: &mut R) -> Example {
    let l = &def.layout;
    let scene = sample_scene(l, rng);
    let kind = QuestionKind::ALL[rng.gen_range(0..QuestionKind::ALL.len())];
    let p = rng.gen_range(0..l.n_positions);
    Example {
        patches: Some(encode_scene(l, &scene)),
        text: vec![l.question(def.alias, kind), l.position(def.alias, p)],
        target: vqa_answer(def, &scene, kind, p),
    }
}

fn gen_caption_example<R: Rng>(def: &TaskDef, rng: &mut R) -> Example {
    let l = &def.layout;
    let scene = sample_scene(l, rng);
    Example {
        patches: Some(encode_scene(l, &scene)),
        text: vec![l.describe(def.alias)],
        target: caption(def, &scene),
    }
}

fn cls_label(def: &TaskDef, text: &[usize]) -> Vec<usize> {
    let l = &def.layout;
    vec![l.label(text.contains(&l.content(def.rule_token))), EOS]
}

/// Balanced classes: half the examples contain the rule token, half never do.
fn gen_cls_example<R: Rng>(def: &TaskDef, rng: &mut R) -> Example {
    let l = &def.layout;
    let others: Vec<usize> = (0..l.n_content).filter(|&i| i != def.rule_token).collect();
    let mut text: Vec<usize> = (0..def.text_len)
        .map(|_| l.content(*others.choose(rng).expect("at least two content words")))
        .collect();
    if rng.gen_bool(0.5) {
        let at = rng.gen_range(0..text.len());
        text[at] = l.content(def.rule_token);
    }
    let target = cls_label(def, &text);
    Example {
        patches: None,
        text,
        target,
    }
}

fn gen_copy_example<R: Rng>(def: &TaskDef, rng: &mut R) -> Example {
    let l = &def.layout;
    let len = rng.gen_range(1..=def.text_len);
    let text: Vec<usize> = (0..len)
        .map(|_| l.content(rng.gen_range(0..l.n_content)))
        .collect();
    let mut target = text.clone();
    target.push(EOS);
    Example {
        patches: None,
        text,
        target,
    }
}

fn generate<F>(def: &TaskDef, mut one: F) -> Result<Dataset>
where
    F: FnMut(&TaskDef, &mut ChaCha8Rng) -> Example,
{
    def.validate()?;
    let mut rng = def.rng();
    let train: Vec<Example> = (0..def.n_train).map(|_| one(def, &mut rng)).collect();
    let seen: HashSet<&Example> = train.iter().collect();
    let mut val = Vec::with_capacity(def.n_val);
    let budget = 1000 * (def.n_val + 1);
    let mut attempts = 0;
    while val.len() < def.n_val {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Config(format!(
                "task `{}`: cannot draw {} validation examples disjoint from training",
                def.task_id, def.n_val
            )));
        }
        let e = one(def, &mut rng);
        if !seen.contains(&e) {
            val.push(e);
        }
    }
    Ok(Dataset {
        def: def.clone(),
        train,
        val,
    })
}

pub fn gen_mm_vqa(def: &TaskDef) -> Result<Dataset> {
    expect_kind(def, TaskKind::MmVqa)?;
    generate(def, gen_vqa_example)
}

pub fn gen_mm_caption(def: &TaskDef) -> Result<Dataset> {
    expect_kind(def, TaskKind::MmCaption)?;
    generate(def, gen_caption_example)
}

pub fn gen_text_cls(def: &TaskDef) -> Result<Dataset> {
    expect_kind(def, TaskKind::TextCls)?;
    generate(def, gen_cls_example)
}

pub fn gen_text_copy(def: &TaskDef) -> Result<Dataset> {
    expect_kind(def, TaskKind::TextCopy)?;
    generate(def, gen_copy_example)
}

fn expect_kind(def: &TaskDef, kind: TaskKind) -> Result<()> {
    if def.kind != kind {
        return Err(Error::Config(format!(
            "task `{}` is {:?}, not {:?}",
            def.task_id, def.kind, kind
        )));
    }
    Ok(())
}

/// Generates any task by kind.
pub fn generate_task(def: &TaskDef) -> Result<Dataset> {
    match def.kind {
        TaskKind::MmVqa => gen_mm_vqa(def),
        TaskKind::MmCaption => gen_mm_caption(def),
        TaskKind::TextCls => gen_text_cls(def),
        TaskKind::TextCopy => gen_text_copy(def),
    }
}

/// Recomputes the gold target of one example from its inputs.
pub fn expected_target(def: &TaskDef, e: &Example) -> Result<Vec<usize>> {
    let l = &def.layout;
    let scene = || -> Result<Scene> {
        let p = e
            .patches
            .as_ref()
            .ok_or_else(|| Error::Contract("multimodal example without patches".into()))?;
        decode_scene(l, p)
    };
    match def.kind {
        TaskKind::MmVqa => {
            let scene = scene()?;
            let (q, p) = match e.text.as_slice() {
                [q, p] => (*q, *p),
                _ => {
                    return Err(Error::Contract(
                        "vqa text must be [question, position]".into(),
                    ))
                }
            };
            let (qa, kind) = l
                .question_of(q)
                .ok_or_else(|| Error::Contract(format!("token {q} is not a question word")))?;
            let (pa, pos) = l
                .position_of(p)
                .ok_or_else(|| Error::Contract(format!("token {p} is not a position word")))?;
            if qa != def.alias || pa != def.alias || pos >= scene.len() {
                return Err(Error::Contract(
                    "question uses the wrong alias or position".into(),
                ));
            }
            Ok(vqa_answer(def, &scene, kind, pos))
        }
        TaskKind::MmCaption => Ok(caption(def, &scene()?)),
        TaskKind::TextCls => Ok(cls_label(def, &e.text)),
        TaskKind::TextCopy => {
            let mut t = e.text.clone();
            t.push(EOS);
            Ok(t)
        }
    }
}

/// Replays the generating rule over every example; any disagreement is an error.
pub fn verify(ds: &Dataset) -> Result<()> {
    for (split, examples) in [("train", &ds.train), ("val", &ds.val)] {
        for (i, e) in examples.iter().enumerate() {
            let want = expected_target(&ds.def, e)?;
            if want != e.target {
                return Err(Error::Contract(format!(
                    "task `{}` {split}[{i}]: target {:?}, rule gives {:?}",
                    ds.def.task_id, e.target, want
                )));
            }
        }
    }
    Ok(())
}
