use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Binder;
use crate::tensor::{Graph, Tensor, Var};

/// Which embeddings a module transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Text,
    Image,
    Unified,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::Text => "text",
            Scope::Image => "image",
            Scope::Unified => "unified",
        }
    }
}

/// Residual low-rank map `E + f(E·W_down)·W_up` over embedding rows.
///
/// No bias terms: a module holds exactly `2·d_emb·rank` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaLinkModule {
    /// `d_emb × rank`
    pub down: Tensor,
    /// `rank × d_emb`, zero at initialisation.
    pub up: Tensor,
    /// ReLU between the projections when set, identity otherwise.
    pub nonlinearity: bool,
    pub scope: Scope,
}

impl AdaLinkModule {
    pub fn new<R: Rng + ?Sized>(
        d_emb: usize,
        rank: usize,
        scope: Scope,
        nonlinearity: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if d_emb == 0 || rank == 0 {
            return Err(Error::Config("AdaLink needs d_emb ≥ 1 and rank ≥ 1".into()));
        }
        Ok(Self {
            down: Tensor::trunc_normal([d_emb, rank], 1.0 / (d_emb as f64).sqrt(), rng),
            up: Tensor::zeros([rank, d_emb]),
            nonlinearity,
            scope,
        })
    }

    pub fn from_weights(
        down: Tensor,
        up: Tensor,
        nonlinearity: bool,
        scope: Scope,
    ) -> Result<Self> {
        let (ds, us) = (down.shape(), up.shape());
        if ds.len() != 2 || us.len() != 2 || ds[1] != us[0] || ds[0] != us[1] {
            return Err(Error::dim("adalink weights", ds, us));
        }
        Ok(Self {
            down,
            up,
            nonlinearity,
            scope,
        })
    }

    pub fn d_emb(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.down.numel() + self.up.numel()
    }

    pub(crate) fn param_names(scope: Scope) -> (String, String) {
        let base = format!("adapter.adalink.{}", scope.name());
        (format!("{base}.down"), format!("{base}.up"))
    }

    pub(crate) fn bind(&self, g: &mut Graph, b: &mut Binder) -> (Var, Var) {
        let (dn, un) = Self::param_names(self.scope);
        (b.bind(g, &dn, &self.down), b.bind(g, &un, &self.up))
    }

    /// Eval-mode application to plain embeddings.
    pub fn apply(&self, e: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(e.clone());
        let down = g.constant(self.down.clone());
        let up = g.constant(self.up.clone());
        let y = adalink_forward(&mut g, x, down, up, self.nonlinearity, 0.0, false)?;
        Ok(g.value(y).clone())
    }
}

/// `e + dropout(f(e·down)·up)`; shape of `e` is preserved.
pub fn adalink_forward(
    g: &mut Graph,
    e: Var,
    down: Var,
    up: Var,
    nonlinearity: bool,
    dropout: f64,
    train: bool,
) -> Result<Var> {
    let es = g.shape(e);
    let ds = g.shape(down);
    if es.len() != 2 || ds.len() != 2 || es[1] != ds[0] {
        return Err(Error::dim("adalink", es, ds));
    }
    let h = g.matmul(e, down)?;
    let h = if nonlinearity { g.relu(h) } else { h };
    let delta = g.matmul(h, up)?;
    if g.shape(delta) != g.shape(e) {
        return Err(Error::dim("adalink", g.shape(e), g.shape(up)));
    }
    let delta = g.dropout(delta, dropout, train)?;
    g.add(e, delta)
}

/// Input-embedding adapters for a multimodal model: separate text and image
/// modules, or one unified module shared by both.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MultimodalAdaLink {
    pub text: Option<AdaLinkModule>,
    pub image: Option<AdaLinkModule>,
    pub unified: Option<AdaLinkModule>,
}

impl MultimodalAdaLink {
    pub fn modules(&self) -> impl Iterator<Item = &AdaLinkModule> {
        [&self.text, &self.image, &self.unified]
            .into_iter()
            .flatten()
    }

    pub fn modules_mut(&mut self) -> impl Iterator<Item = &mut AdaLinkModule> {
        [&mut self.text, &mut self.image, &mut self.unified]
            .into_iter()
            .flatten()
    }

    fn text_module(&self) -> Option<&AdaLinkModule> {
        self.unified.as_ref().or(self.text.as_ref())
    }

    fn image_module(&self) -> Option<&AdaLinkModule> {
        self.unified.as_ref().or(self.image.as_ref())
    }

    /// Transforms each present modality with its module. Text passes through
    /// unchanged when its module has been baked into the token table.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        image: Option<Var>,
        text: Var,
        dropout: f64,
        train: bool,
    ) -> Result<(Option<Var>, Var)> {
        let image = match image {
            Some(img) => {
                let im = self.image_module().ok_or_else(|| {
                    Error::Config("no AdaLink module covers the image modality".into())
                })?;
                let (d, u) = im.bind(g, b);
                Some(adalink_forward(
                    g,
                    img,
                    d,
                    u,
                    im.nonlinearity,
                    dropout,
                    train,
                )?)
            }
            None => None,
        };
        let text = match self.text_module() {
            Some(tm) => {
                let (d, u) = tm.bind(g, b);
                adalink_forward(g, text, d, u, tm.nonlinearity, dropout, train)?
            }
            None => text,
        };
        Ok((image, text))
    }
}

/// Eval-mode multimodal adaptation of plain embedding matrices.
pub fn apply_multimodal_adalink(
    image: Option<&Tensor>,
    text: &Tensor,
    modules: &MultimodalAdaLink,
) -> Result<(Option<Tensor>, Tensor)> {
    let mut g = Graph::new();
    let mut b = Binder::eval();
    let iv = image.map(|t| g.constant(t.clone()));
    let tv = g.constant(text.clone());
    let (io, to) = modules.forward(&mut g, &mut b, iv, tv, 0.0, false)?;
    Ok((io.map(|v| g.value(v).clone()), g.value(to).clone()))
}
