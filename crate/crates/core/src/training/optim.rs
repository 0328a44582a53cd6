use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adafactor constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdafactorConfig {
    /// Second-moment decay is `1 - t^(-decay_exponent)`.
    pub decay_exponent: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub clip_threshold: f64,
    /// Scale updates by the parameter RMS (floored at `eps2`).
    pub scale_parameter: bool,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        Self {
            decay_exponent: 0.8,
            eps1: 1e-30,
            eps2: 1e-3,
            clip_threshold: 1.0,
            scale_parameter: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Moment {
    /// Row and column sums of the squared-gradient average.
    Factored {
        row: Vec<f64>,
        col: Vec<f64>,
    },
    Full(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdafactorState {
    pub step: u64,
    moments: BTreeMap<String, Moment>,
}

impl AdafactorState {
    /// Second-moment estimate for `name` as seen by the update rule.
    pub fn second_moment(&self, name: &str) -> Option<Vec<f64>> {
        self.moments.get(name).map(|m| match m {
            Moment::Full(v) => v.clone(),
            Moment::Factored { row, col } => {
                let total: f64 = row.iter().sum();
                row.iter()
                    .flat_map(|r| col.iter().map(move |c| r * c / total))
                    .collect()
            }
        })
    }

    /// Smallest accumulator entry across every parameter.
    pub fn min_accumulator(&self) -> Option<f64> {
        self.moments
            .values()
            .flat_map(|m| match m {
                Moment::Full(v) => v.to_vec(),
                Moment::Factored { row, col } => row.iter().chain(col).copied().collect(),
            })
            .reduce(f64::min)
    }
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Factored second moments for matrices, full ones otherwise; no momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct Adafactor {
    pub config: AdafactorConfig,
    pub state: AdafactorState,
}

impl Adafactor {
    pub fn new(config: AdafactorConfig) -> Self {
        Self {
            config,
            state: AdafactorState {
                step: 0,
                moments: BTreeMap::new(),
            },
        }
    }

    /// Applies one update to every `(name, param, grad)` triple.
    ///
    /// All gradients are checked before anything changes.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor, &[f64])], lr: f64) -> Result<()> {
        check_finite(params)?;
        self.state.step += 1;
        let t = self.state.step as f64;
        let beta = 1.0 - t.powf(-self.config.decay_exponent);
        let c = self.config;
        for (name, p, g) in params.iter_mut() {
            let shape = p.shape().to_vec();
            let sq: Vec<f64> = g.iter().map(|x| x * x + c.eps1).collect();
            let moment = self
                .state
                .moments
                .entry(name.to_string())
                .or_insert_with(|| match shape.as_slice() {
                    [r, k] if *r > 1 && *k > 1 => Moment::Factored {
                        row: vec![0.0; *r],
                        col: vec![0.0; *k],
                    },
                    _ => Moment::Full(vec![0.0; sq.len()]),
                });
            let update: Vec<f64> = match moment {
                Moment::Full(v) => {
                    for (vi, s) in v.iter_mut().zip(&sq) {
                        *vi = beta * *vi + (1.0 - beta) * s;
                    }
                    g.iter()
                        .zip(v.iter())
                        .map(|(gi, vi)| gi / vi.sqrt())
                        .collect()
                }
                Moment::Factored { row, col } => {
                    let k = col.len();
                    for (i, r) in row.iter_mut().enumerate() {
                        let s: f64 = sq[i * k..(i + 1) * k].iter().sum();
                        *r = beta * *r + (1.0 - beta) * s;
                    }
                    for (j, cj) in col.iter_mut().enumerate() {
                        let s: f64 = sq.iter().skip(j).step_by(k).sum();
                        *cj = beta * *cj + (1.0 - beta) * s;
                    }
                    let total: f64 = row.iter().sum();
                    g.iter()
                        .enumerate()
                        .map(|(idx, gi)| gi / (row[idx / k] * col[idx % k] / total).sqrt())
                        .collect()
                }
            };
            let denom = (rms(&update) / c.clip_threshold).max(1.0);
            let alpha = if c.scale_parameter {
                lr * rms(p.data()).max(c.eps2)
            } else {
                lr
            };
            for (x, u) in p.data_mut().iter_mut().zip(&update) {
                let d = alpha * u / denom;
                if d != 0.0 {
                    *x -= d;
                }
            }
        }
        Ok(())
    }
}

/// Plain gradient descent, for debugging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd;

impl Sgd {
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor, &[f64])], lr: f64) -> Result<()> {
        check_finite(params)?;
        for (_, p, g) in params.iter_mut() {
            for (x, gi) in p.data_mut().iter_mut().zip(g.iter()) {
                let d = lr * gi;
                if d != 0.0 {
                    *x -= d;
                }
            }
        }
        Ok(())
    }
}

fn check_finite(params: &[(&str, &mut Tensor, &[f64])]) -> Result<()> {
    for (name, p, g) in params {
        if g.len() != p.numel() {
            return Err(Error::dim("gradient", &[g.len()], p.shape()));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: name.to_string(),
            });
        }
    }
    Ok(())
}
