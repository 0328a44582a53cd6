use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Encoder linear layers that carry LoRA weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraProj {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl LoraProj {
    pub const ALL: [LoraProj; 6] = [
        LoraProj::Q,
        LoraProj::K,
        LoraProj::V,
        LoraProj::O,
        LoraProj::Fc1,
        LoraProj::Fc2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoraProj::Q => "q",
            LoraProj::K => "k",
            LoraProj::V => "v",
            LoraProj::O => "o",
            LoraProj::Fc1 => "fc1",
            LoraProj::Fc2 => "fc2",
        }
    }

    /// `(d_in, d_out)` of the adapted base layer.
    pub fn dims(self, config: &ModelConfig) -> (usize, usize) {
        let d = config.d_emb;
        match self {
            LoraProj::Fc1 => (d, config.d_ff),
            LoraProj::Fc2 => (config.d_ff, d),
            _ => (d, d),
        }
    }
}

/// Low-rank update `scale·A·B` beside a frozen `d_in × d_out` layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraModule {
    /// `d_in × rank`
    pub a: Tensor,
    /// `rank × d_out`, zero at initialisation.
    pub b: Tensor,
    pub scale: f64,
}

impl LoraModule {
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        Ok(Self {
            a: Tensor::trunc_normal([d_in, rank], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros([rank, d_out]),
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    pub(crate) fn param_names(layer: usize, proj: LoraProj) -> (String, String) {
        let base = format!("adapter.lora.enc.{layer}.{}", proj.name());
        (format!("{base}.a"), format!("{base}.b"))
    }
}

/// `x·W + bias + dropout(scale·(x·A)·B)`.
///
/// The base path is computed exactly as an unadapted layer would, so a zero
/// update leaves it bit-identical.
#[allow(clippy::too_many_arguments)]
pub fn lora_linear(
    g: &mut Graph,
    x: Var,
    w: Var,
    bias: Option<Var>,
    a: Var,
    b: Var,
    scale: f64,
    dropout: f64,
    train: bool,
) -> Result<Var> {
    let (ws, as_, bs) = (
        g.shape(w).to_vec(),
        g.shape(a).to_vec(),
        g.shape(b).to_vec(),
    );
    if as_.len() != 2 || bs.len() != 2 || as_[0] != ws[0] || bs[1] != ws[1] || as_[1] != bs[0] {
        return Err(Error::dim("lora_linear", &ws, &[as_, bs].concat()));
    }
    let base = g.matmul(x, w)?;
    let base = match bias {
        Some(bias) => g.add_bias(base, bias)?,
        None => base,
    };
    let xa = g.matmul(x, a)?;
    let delta = g.matmul(xa, b)?;
    let delta = g.scale(delta, scale);
    let delta = g.dropout(delta, dropout, train)?;
    g.add(base, delta)
}

/// Eval-mode [`lora_linear`] on plain tensors.
pub fn lora_linear_tensor(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    lora: &LoraModule,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = [x, w, bias, &lora.a, &lora.b]
        .iter()
        .map(|t| g.constant((*t).clone()))
        .collect();
    let y = lora_linear(
        &mut g,
        vars[0],
        vars[1],
        Some(vars[2]),
        vars[3],
        vars[4],
        lora.scale,
        0.0,
        false,
    )?;
    Ok(g.value(y).clone())
}
