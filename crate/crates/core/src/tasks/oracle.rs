//! Brute-force reference predictors used to sanity-check generated tasks.

use std::collections::{BTreeMap, HashMap};

use super::vocab::QuestionKind;
use super::{exact_match, Example, TaskDef, TaskKind};

fn majority<'a>(targets: impl Iterator<Item = &'a Vec<usize>>) -> Option<Vec<usize>> {
    let mut counts: BTreeMap<&Vec<usize>, usize> = BTreeMap::new();
    for t in targets {
        *counts.entry(t).or_default() += 1;
    }
    // first maximum in key order keeps ties deterministic
    let best = counts.values().copied().max()?;
    counts
        .into_iter()
        .find(|&(_, c)| c == best)
        .map(|(t, _)| t.clone())
}

/// Exact-match of predicting, from the text alone, the most frequent training
/// target for that text. Unseen texts fall back to the global majority.
pub fn text_only_majority(train: &[Example], eval: &[Example]) -> f64 {
    let mut by_text: HashMap<&[usize], Vec<&Vec<usize>>> = HashMap::new();
    for e in train {
        by_text.entry(&e.text).or_default().push(&e.target);
    }
    let table: HashMap<&[usize], Vec<usize>> = by_text
        .into_iter()
        .filter_map(|(k, v)| majority(v.into_iter()).map(|m| (k, m)))
        .collect();
    let fallback = majority(train.iter().map(|e| &e.target)).unwrap_or_default();
    if eval.is_empty() {
        return 0.0;
    }
    let hits: f64 = eval
        .iter()
        .map(|e| exact_match(table.get(e.text.as_slice()).unwrap_or(&fallback), &e.target))
        .sum();
    hits / eval.len() as f64
}

/// Expected exact-match of uniform guessing over each question's answer space.
pub fn vqa_chance(def: &TaskDef, eval: &[Example]) -> f64 {
    let l = &def.layout;
    if def.kind != TaskKind::MmVqa || eval.is_empty() {
        return 0.0;
    }
    let total: f64 = eval
        .iter()
        .map(|e| {
            let space = match l.question_of(e.text[0]).map(|(_, k)| k) {
                Some(QuestionKind::Color) => l.n_colors,
                Some(QuestionKind::Shape) => l.n_shapes,
                Some(QuestionKind::Both) => l.n_colors * l.n_shapes,
                None => 1,
            };
            1.0 / space as f64
        })
        .sum();
    total / eval.len() as f64
}

/// Accuracy of a logistic regression on bag-of-token counts, predicting
/// whether the first target token equals `positive`.
pub fn bag_of_tokens_logistic(
    train: &[Example],
    eval: &[Example],
    vocab_size: usize,
    positive: usize,
) -> f64 {
    let featurise = |e: &Example| {
        let mut x = vec![0.0; vocab_size + 1];
        for &t in &e.text {
            if t < vocab_size {
                x[t] += 1.0;
            }
        }
        x[vocab_size] = 1.0;
        x
    };
    let xs: Vec<Vec<f64>> = train.iter().map(featurise).collect();
    let ys: Vec<f64> = train
        .iter()
        .map(|e| (e.target.first() == Some(&positive)) as u8 as f64)
        .collect();
    let mut w = vec![0.0; vocab_size + 1];
    let lr = 0.5;
    for _ in 0..300 {
        let mut grad = vec![0.0; w.len()];
        for (x, &y) in xs.iter().zip(&ys) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            for (g, &xi) in grad.iter_mut().zip(x) {
                *g += (p - y) * xi;
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= lr * g / xs.len().max(1) as f64;
        }
    }
    if eval.is_empty() {
        return 0.0;
    }
    let correct = eval
        .iter()
        .filter(|e| {
            let z: f64 = featurise(e).iter().zip(&w).map(|(a, b)| a * b).sum();
            (z > 0.0) == (e.target.first() == Some(&positive))
        })
        .count();
    correct as f64 / eval.len() as f64
}
