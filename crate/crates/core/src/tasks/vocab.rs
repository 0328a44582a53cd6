//! Integer token layout shared by every synthetic task.
//!
//! ```text
//! 0 pad | 1 bos | 2 eos | 3 unk | colors | shapes |
//! alias 0: [ask-color ask-shape ask-both | positions.. | describe] | alias 1: [...] | ... |
//! content words | no yes
//! ```
//!
//! Each alias block is an independent set of question words. Tasks that share
//! semantics but not surface tokens differ only in which alias they use.

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Color,
    Shape,
    Both,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 3] =
        [QuestionKind::Color, QuestionKind::Shape, QuestionKind::Both];

    fn offset(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabLayout {
    pub n_colors: usize,
    pub n_shapes: usize,
    pub n_positions: usize,
    pub n_aliases: usize,
    pub n_content: usize,
}

impl Default for VocabLayout {
    fn default() -> Self {
        Self {
            n_colors: 6,
            n_shapes: 4,
            n_positions: 4,
            n_aliases: 2,
            n_content: 8,
        }
    }
}

impl VocabLayout {
    fn alias_width(&self) -> usize {
        QuestionKind::ALL.len() + self.n_positions + 1
    }

    fn alias_start(&self, alias: usize) -> usize {
        RESERVED + self.n_colors + self.n_shapes + alias * self.alias_width()
    }

    fn content_start(&self) -> usize {
        self.alias_start(self.n_aliases)
    }

    pub fn color(&self, c: usize) -> usize {
        debug_assert!(c < self.n_colors);
        RESERVED + c
    }

    pub fn shape(&self, s: usize) -> usize {
        debug_assert!(s < self.n_shapes);
        RESERVED + self.n_colors + s
    }

    pub fn question(&self, alias: usize, kind: QuestionKind) -> usize {
        self.alias_start(alias) + kind.offset()
    }

    pub fn position(&self, alias: usize, p: usize) -> usize {
        debug_assert!(p < self.n_positions);
        self.alias_start(alias) + QuestionKind::ALL.len() + p
    }

    pub fn describe(&self, alias: usize) -> usize {
        self.alias_start(alias) + QuestionKind::ALL.len() + self.n_positions
    }

    pub fn content(&self, i: usize) -> usize {
        debug_assert!(i < self.n_content);
        self.content_start() + i
    }

    pub fn label(&self, positive: bool) -> usize {
        self.content_start() + self.n_content + positive as usize
    }

    pub fn size(&self) -> usize {
        self.content_start() + self.n_content + 2
    }

    /// One-hot color block followed by one-hot shape block.
    pub fn patch_feature_dim(&self) -> usize {
        self.n_colors + self.n_shapes
    }

    pub fn color_of(&self, token: usize) -> Option<usize> {
        (RESERVED..RESERVED + self.n_colors)
            .contains(&token)
            .then(|| token - RESERVED)
    }

    pub fn shape_of(&self, token: usize) -> Option<usize> {
        let start = RESERVED + self.n_colors;
        (start..start + self.n_shapes)
            .contains(&token)
            .then(|| token - start)
    }

    /// Decodes a question word into `(alias, kind)`.
    pub fn question_of(&self, token: usize) -> Option<(usize, QuestionKind)> {
        (0..self.n_aliases).find_map(|a| {
            QuestionKind::ALL
                .iter()
                .find(|&&k| self.question(a, k) == token)
                .map(|&k| (a, k))
        })
    }

    pub fn position_of(&self, token: usize) -> Option<(usize, usize)> {
        (0..self.n_aliases).find_map(|a| {
            (0..self.n_positions)
                .find(|&p| self.position(a, p) == token)
                .map(|p| (a, p))
        })
    }
}
