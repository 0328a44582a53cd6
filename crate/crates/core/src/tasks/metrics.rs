use super::vocab::{EOS, PAD};

/// Tokens before the first EOS, pads removed.
pub fn strip(seq: &[usize]) -> Vec<usize> {
    seq.iter()
        .take_while(|&&t| t != EOS)
        .copied()
        .filter(|&t| t != PAD)
        .collect()
}

/// 1 when the stripped sequences agree, 0 otherwise. Two empty sequences agree.
pub fn exact_match(pred: &[usize], gold: &[usize]) -> f64 {
    (strip(pred) == strip(gold)) as u8 as f64
}

/// Fraction of gold positions the prediction reproduces.
pub fn token_accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    let (p, g) = (strip(pred), strip(gold));
    if g.is_empty() {
        return p.is_empty() as u8 as f64;
    }
    let hits = g.iter().zip(p.iter()).filter(|(a, b)| a == b).count();
    hits as f64 / g.len() as f64
}
