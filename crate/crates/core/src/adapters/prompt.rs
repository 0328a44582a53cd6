use rand::Rng;

use crate::error::{Error, Result};
use crate::params::Binder;
use crate::tensor::{Graph, Tensor, Var};

/// Residual bottleneck `p ↦ p + relu(p·w1)·w2` applied row-wise to the prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamLayer {
    /// `d_emb × bottleneck`
    pub w1: Tensor,
    /// `bottleneck × d_emb`, zero at initialisation.
    pub w2: Tensor,
}

/// Learnable soft tokens prepended to the encoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTuningModule {
    /// `length × d_emb`
    pub prompt: Tensor,
    pub reparam: Vec<ReparamLayer>,
}

impl PromptTuningModule {
    /// Prompt rows are copied from randomly chosen rows of `token_table` when
    /// given, otherwise drawn from a normal distribution.
    pub fn new<R: Rng + ?Sized>(
        length: usize,
        d_emb: usize,
        reparam_layers: usize,
        bottleneck: usize,
        token_table: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<Self> {
        if length == 0 || bottleneck == 0 {
            return Err(Error::Config(
                "prompt length and bottleneck must be at least 1".into(),
            ));
        }
        let prompt = match token_table {
            Some(table) => {
                if table.cols() != d_emb {
                    return Err(Error::dim("prompt init", table.shape(), &[d_emb]));
                }
                let rows: Vec<&[f64]> = (0..length)
                    .map(|_| table.row(rng.gen_range(0..table.rows())))
                    .collect();
                Tensor::from_rows(&rows)?
            }
            None => Tensor::randn([length, d_emb], 1.0 / (d_emb as f64).sqrt(), rng),
        };
        let reparam = (0..reparam_layers)
            .map(|_| ReparamLayer {
                w1: Tensor::trunc_normal([d_emb, bottleneck], 1.0 / (d_emb as f64).sqrt(), rng),
                w2: Tensor::zeros([bottleneck, d_emb]),
            })
            .collect();
        Ok(Self { prompt, reparam })
    }

    pub fn length(&self) -> usize {
        self.prompt.rows()
    }

    pub fn d_emb(&self) -> usize {
        self.prompt.cols()
    }

    pub fn core_params(&self) -> usize {
        self.prompt.numel()
    }

    pub fn reparam_params(&self) -> usize {
        self.reparam
            .iter()
            .map(|l| l.w1.numel() + l.w2.numel())
            .sum()
    }

    pub(crate) const PROMPT_NAME: &'static str = "adapter.prompt.embed";

    pub(crate) fn reparam_names(i: usize) -> (String, String) {
        (
            format!("adapter.prompt.reparam.{i}.w1"),
            format!("adapter.prompt.reparam.{i}.w2"),
        )
    }

    /// The prompt after every re-parameterisation layer, `[length × d_emb]`.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder) -> Result<Var> {
        let mut p = b.bind(g, Self::PROMPT_NAME, &self.prompt);
        for (i, layer) in self.reparam.iter().enumerate() {
            let (n1, n2) = Self::reparam_names(i);
            let w1 = b.bind(g, &n1, &layer.w1);
            let w2 = b.bind(g, &n2, &layer.w2);
            let h = g.matmul(p, w1)?;
            let h = g.relu(h);
            let d = g.matmul(h, w2)?;
            p = g.add(p, d)?;
        }
        Ok(p)
    }

    pub fn effective_prompt(&self) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::eval();
        let v = self.forward(&mut g, &mut b)?;
        Ok(g.value(v).clone())
    }
}
