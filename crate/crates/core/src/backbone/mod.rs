//! A small pre-LN encoder-decoder transformer.
//!
//! The encoder consumes projected image patches followed by text token
//! embeddings (each adapted by the active adapter set first), with learned
//! absolute positions. Soft prompt rows, when present, are prepended after
//! positions are added. The decoder's output projection is tied to the token
//! embedding table.

mod config;

pub use config::{ModelConfig, ParamGroup};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{lora_linear, AdapterSet, LoraProj};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tasks::vocab::{BOS, EOS, PAD};
use crate::tasks::MultimodalBatch;
use crate::tensor::{AttentionSpec, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call forward settings.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub dropout_rate: f64,
    /// Replaces the token table for encoder text lookups only (baked serving).
    pub text_table: Option<&'a Tensor>,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout_rate: 0.0,
            text_table: None,
        }
    }

    pub fn train(dropout_rate: f64) -> Self {
        Self {
            mode: Mode::Train,
            dropout_rate,
            text_table: None,
        }
    }

    fn training(&self) -> bool {
        self.mode == Mode::Train
    }
}

/// Encoder output plus the key mask decoder cross-attention needs.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub out: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

/// The pre-encoder sequence for a batch.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    /// `[batch·seq_len × d_emb]`
    pub x: Var,
    pub mask: Vec<bool>,
    pub seq_len: usize,
    /// Adapted image embeddings `[batch·n_patches × d_emb]`, before positions.
    pub image: Option<Var>,
    /// Adapted text embeddings `[batch·max_text_len × d_emb]`, before positions.
    pub text: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: ModelConfig,
    params: ParamStore,
}

impl Backbone {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_emb;
        let mut params = ParamStore::new();
        let mut add = |name: String, t: Tensor| params.insert(name, t);
        let emb_std = 1.0 / (d as f64).sqrt();

        add(
            "token_embedding".into(),
            Tensor::randn([config.vocab_size, d], emb_std, &mut rng),
        );
        add(
            "patch_proj.w".into(),
            Tensor::randn(
                [config.patch_feature_dim, d],
                1.0 / (config.patch_feature_dim as f64).sqrt(),
                &mut rng,
            ),
        );
        add("patch_proj.b".into(), Tensor::zeros([d]));
        add(
            "enc.pos".into(),
            Tensor::randn([config.encoder_positions(), d], emb_std, &mut rng),
        );
        add(
            "dec.pos".into(),
            Tensor::randn([config.max_target_len, d], emb_std, &mut rng),
        );

        let mut linear =
            |name: &str, din: usize, dout: usize, add: &mut dyn FnMut(String, Tensor)| {
                add(
                    format!("{name}.w"),
                    Tensor::randn([din, dout], 1.0 / (din as f64).sqrt(), &mut rng),
                );
                // a key bias shifts every score in a row equally, so softmax ignores it
                if !name.ends_with(".k") {
                    add(format!("{name}.b"), Tensor::zeros([dout]));
                }
            };
        let norm = |name: &str, add: &mut dyn FnMut(String, Tensor)| {
            add(format!("{name}.g"), Tensor::full([d], 1.0));
            add(format!("{name}.b"), Tensor::zeros([d]));
        };
        for l in 0..config.n_enc_layers {
            let p = format!("enc.{l}");
            norm(&format!("{p}.ln1"), &mut add);
            for proj in ["q", "k", "v", "o"] {
                linear(&format!("{p}.attn.{proj}"), d, d, &mut add);
            }
            norm(&format!("{p}.ln2"), &mut add);
            linear(&format!("{p}.mlp.fc1"), d, config.d_ff, &mut add);
            linear(&format!("{p}.mlp.fc2"), config.d_ff, d, &mut add);
        }
        norm("enc.ln_f", &mut add);
        for l in 0..config.n_dec_layers {
            let p = format!("dec.{l}");
            norm(&format!("{p}.ln1"), &mut add);
            for proj in ["q", "k", "v", "o"] {
                linear(&format!("{p}.self.{proj}"), d, d, &mut add);
            }
            norm(&format!("{p}.ln2"), &mut add);
            for proj in ["q", "k", "v", "o"] {
                linear(&format!("{p}.cross.{proj}"), d, d, &mut add);
            }
            norm(&format!("{p}.ln3"), &mut add);
            linear(&format!("{p}.mlp.fc1"), d, config.d_ff, &mut add);
            linear(&format!("{p}.mlp.fc2"), config.d_ff, d, &mut add);
        }
        norm("dec.ln_f", &mut add);
        Ok(Self { config, params })
    }

    /// Rebuilds a backbone from stored parameters, checking every expected name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} backbone tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::dim("backbone parameter", got.shape(), t.shape()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn token_embedding(&self) -> &Tensor {
        self.params.get("token_embedding").expect("token table")
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    fn p(&self, g: &mut Graph, b: &mut Binder, name: &str) -> Result<Var> {
        b.bind_from(g, &self.params, name)
    }

    /// Embedding rows for `tokens`, no positional information.
    pub fn embed_text(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        tokens: &[usize],
        table: Option<&Tensor>,
    ) -> Result<Var> {
        let table = match table {
            Some(t) => {
                if t.shape() != self.token_embedding().shape() {
                    return Err(Error::dim(
                        "text_table",
                        t.shape(),
                        self.token_embedding().shape(),
                    ));
                }
                b.bind(g, "serving.text_table", t)
            }
            None => self.p(g, b, "token_embedding")?,
        };
        g.gather(table, tokens)
    }

    /// Projects `[n × patch_feature_dim]` patch features to `[n × d_emb]`, row by row.
    pub fn embed_patches(&self, g: &mut Graph, b: &mut Binder, patches: Var) -> Result<Var> {
        let s = g.shape(patches);
        if s.len() != 2 || s[1] != self.config.patch_feature_dim {
            return Err(Error::dim(
                "embed_patches",
                s,
                &[self.config.patch_feature_dim],
            ));
        }
        let w = self.p(g, b, "patch_proj.w")?;
        let bias = self.p(g, b, "patch_proj.b")?;
        let x = g.matmul(patches, w)?;
        g.add_bias(x, bias)
    }

    /// Eval-mode convenience wrapper around [`Backbone::embed_text`].
    pub fn embed_text_tensor(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::eval();
        let v = self.embed_text(&mut g, &mut b, tokens, None)?;
        Ok(g.value(v).clone())
    }

    pub fn embed_patches_tensor(&self, patches: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::eval();
        let p = g.constant(patches.clone());
        let v = self.embed_patches(&mut g, &mut b, p)?;
        Ok(g.value(v).clone())
    }

    /// Builds `[prompt ∥ (image ∥ text) + positions]` for every example.
    pub fn encoder_input(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        batch: &MultimodalBatch,
        adapters: Option<&AdapterSet>,
        opts: &ForwardOptions,
    ) -> Result<EncoderInput> {
        let cfg = &self.config;
        let d = cfg.d_emb;
        let bsz = batch.len();
        let train = opts.training();
        let tokens: Vec<usize> = batch.text_tokens.iter().flatten().copied().collect();
        let text = self.embed_text(g, b, &tokens, opts.text_table)?;
        let image = match &batch.patches {
            Some(p) => {
                let p = g.constant(
                    p.clone()
                        .reshape([bsz * cfg.n_patches, cfg.patch_feature_dim])?,
                );
                Some(self.embed_patches(g, b, p)?)
            }
            None => None,
        };
        let (image, text) = match adapters {
            Some(a) => a.adapt_embeddings(g, b, image, text, opts.dropout_rate, train)?,
            None => (image, text),
        };

        let t_len = cfg.max_text_len;
        let text3 = g.reshape(text, &[bsz, t_len, d])?;
        let (seq, pos_start) = match image {
            Some(img) => {
                let img3 = g.reshape(img, &[bsz, cfg.n_patches, d])?;
                (g.concat(&[img3, text3], 1)?, 0)
            }
            None => (text3, cfg.n_patches),
        };
        let s_len = g.shape(seq)[1];
        let flat = g.reshape(seq, &[bsz, s_len * d])?;
        let pos = self.p(g, b, "enc.pos")?;
        let pos = if pos_start == 0 && s_len == cfg.encoder_positions() {
            pos
        } else {
            g.slice(pos, 0, pos_start, s_len)?
        };
        let x = g.add_bias(flat, pos)?;

        let mut mask_row: Vec<Vec<bool>> = batch
            .text_tokens
            .iter()
            .map(|row| {
                let mut m = vec![true; s_len - t_len];
                m.extend(row.iter().map(|&t| t != PAD));
                m
            })
            .collect();

        let (x, s_len) = match adapters
            .map(|a| a.effective_prompt(g, b, opts.dropout_rate, train))
            .transpose()?
            .flatten()
        {
            Some(prompt) => {
                let p_len = g.shape(prompt)[0];
                let p_flat = g.reshape(prompt, &[1, p_len * d])?;
                let ones = g.constant(Tensor::full([bsz, 1], 1.0));
                let tiled = g.matmul(ones, p_flat)?;
                for m in &mut mask_row {
                    m.splice(0..0, std::iter::repeat_n(true, p_len));
                }
                (g.concat(&[tiled, x], 1)?, s_len + p_len)
            }
            None => (x, s_len),
        };
        let x = g.reshape(x, &[bsz * s_len, d])?;
        let x = g.dropout(x, opts.dropout_rate, train)?;
        Ok(EncoderInput {
            x,
            mask: mask_row.into_iter().flatten().collect(),
            seq_len: s_len,
            image,
            text,
        })
    }

    fn linear(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        name: &str,
        x: Var,
        lora: Option<(&AdapterSet, usize, LoraProj)>,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let w = self.p(g, b, &format!("{name}.w"))?;
        let bias = if name.ends_with(".k") {
            None
        } else {
            Some(self.p(g, b, &format!("{name}.b"))?)
        };
        if let Some((set, layer, proj)) = lora {
            if let Some((a, bb, scale)) = set.bind_lora(g, b, layer, proj)? {
                return lora_linear(
                    g,
                    x,
                    w,
                    bias,
                    a,
                    bb,
                    scale,
                    opts.dropout_rate,
                    opts.training(),
                );
            }
        }
        let y = g.matmul(x, w)?;
        match bias {
            Some(bias) => g.add_bias(y, bias),
            None => Ok(y),
        }
    }

    fn norm(&self, g: &mut Graph, b: &mut Binder, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p(g, b, &format!("{name}.g"))?;
        let beta = self.p(g, b, &format!("{name}.b"))?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        name: &str,
        q_in: Var,
        kv_in: Var,
        spec: AttentionSpec,
        lora: Option<(&AdapterSet, usize)>,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let with = |p: LoraProj| lora.map(|(s, l)| (s, l, p));
        let q = self.linear(g, b, &format!("{name}.q"), q_in, with(LoraProj::Q), opts)?;
        let k = self.linear(g, b, &format!("{name}.k"), kv_in, with(LoraProj::K), opts)?;
        let v = self.linear(g, b, &format!("{name}.v"), kv_in, with(LoraProj::V), opts)?;
        let a = g.attention(q, k, v, spec)?;
        self.linear(g, b, &format!("{name}.o"), a, with(LoraProj::O), opts)
    }

    fn mlp(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        name: &str,
        x: Var,
        lora: Option<(&AdapterSet, usize)>,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let h = self.linear(
            g,
            b,
            &format!("{name}.fc1"),
            x,
            lora.map(|(s, l)| (s, l, LoraProj::Fc1)),
            opts,
        )?;
        let h = g.relu(h);
        self.linear(
            g,
            b,
            &format!("{name}.fc2"),
            h,
            lora.map(|(s, l)| (s, l, LoraProj::Fc2)),
            opts,
        )
    }

    fn residual(&self, g: &mut Graph, x: Var, delta: Var, opts: &ForwardOptions) -> Result<Var> {
        let delta = g.dropout(delta, opts.dropout_rate, opts.training())?;
        g.add(x, delta)
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        batch: &MultimodalBatch,
        adapters: Option<&AdapterSet>,
        opts: &ForwardOptions,
    ) -> Result<Encoded> {
        batch.validate(&self.config)?;
        if let Some(a) = adapters {
            a.check_compatible(&self.config)?;
        }
        let input = self.encoder_input(g, b, batch, adapters, opts)?;
        let bsz = batch.len();
        let s = input.seq_len;
        let mut x = input.x;
        for l in 0..self.config.n_enc_layers {
            let p = format!("enc.{l}");
            let h = self.norm(g, b, &format!("{p}.ln1"), x)?;
            let spec = AttentionSpec {
                batch: bsz,
                q_len: s,
                k_len: s,
                heads: self.config.n_heads,
                causal: false,
                key_mask: Some(input.mask.clone()),
            };
            let lora = adapters.map(|a| (a, l));
            let a = self.attention_block(g, b, &format!("{p}.attn"), h, h, spec, lora, opts)?;
            x = self.residual(g, x, a, opts)?;
            let h = self.norm(g, b, &format!("{p}.ln2"), x)?;
            let f = self.mlp(g, b, &format!("{p}.mlp"), h, lora, opts)?;
            x = self.residual(g, x, f, opts)?;
        }
        let out = self.norm(g, b, "enc.ln_f", x)?;
        Ok(Encoded {
            out,
            mask: input.mask,
            batch: bsz,
            seq_len: s,
        })
    }

    /// Next-token logits `[batch·len × vocab]` for equally long decoder inputs.
    pub fn decode(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        enc: &Encoded,
        dec_inputs: &[Vec<usize>],
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.d_emb;
        let bsz = enc.batch;
        if dec_inputs.len() != bsz {
            return Err(Error::dim("decoder inputs", &[dec_inputs.len()], &[bsz]));
        }
        let len = dec_inputs[0].len();
        if len == 0 || len > cfg.max_target_len || dec_inputs.iter().any(|r| r.len() != len) {
            return Err(Error::dim("decoder inputs", &[len], &[cfg.max_target_len]));
        }
        let tokens: Vec<usize> = dec_inputs.iter().flatten().copied().collect();
        let table = self.p(g, b, "token_embedding")?;
        let y = g.gather(table, &tokens)?;
        let y = g.reshape(y, &[bsz, len * d])?;
        let pos = self.p(g, b, "dec.pos")?;
        let pos = if len == cfg.max_target_len {
            pos
        } else {
            g.slice(pos, 0, 0, len)?
        };
        let y = g.add_bias(y, pos)?;
        let y = g.reshape(y, &[bsz * len, d])?;
        let mut y = g.dropout(y, opts.dropout_rate, opts.training())?;
        for l in 0..cfg.n_dec_layers {
            let p = format!("dec.{l}");
            let h = self.norm(g, b, &format!("{p}.ln1"), y)?;
            let spec = AttentionSpec {
                batch: bsz,
                q_len: len,
                k_len: len,
                heads: cfg.n_heads,
                causal: true,
                key_mask: None,
            };
            let a = self.attention_block(g, b, &format!("{p}.self"), h, h, spec, None, opts)?;
            y = self.residual(g, y, a, opts)?;
            let h = self.norm(g, b, &format!("{p}.ln2"), y)?;
            let spec = AttentionSpec {
                batch: bsz,
                q_len: len,
                k_len: enc.seq_len,
                heads: cfg.n_heads,
                causal: false,
                key_mask: Some(enc.mask.clone()),
            };
            let a =
                self.attention_block(g, b, &format!("{p}.cross"), h, enc.out, spec, None, opts)?;
            y = self.residual(g, y, a, opts)?;
            let h = self.norm(g, b, &format!("{p}.ln3"), y)?;
            let f = self.mlp(g, b, &format!("{p}.mlp"), h, None, opts)?;
            y = self.residual(g, y, f, opts)?;
        }
        let y = self.norm(g, b, "dec.ln_f", y)?;
        let y = g.scale(y, 1.0 / (cfg.d_emb as f64).sqrt());
        let table_t = g.transpose(table)?;
        g.matmul(y, table_t)
    }

    /// Teacher-forced logits `[batch·target_len × vocab]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        batch: &MultimodalBatch,
        adapters: Option<&AdapterSet>,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let enc = self.encode(g, b, batch, adapters, opts)?;
        self.decode(g, b, &enc, &batch.decoder_inputs(), opts)
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits(&self, batch: &MultimodalBatch, adapters: Option<&AdapterSet>) -> Result<Tensor> {
        self.logits_with(batch, adapters, &ForwardOptions::eval())
    }

    pub fn logits_with(
        &self,
        batch: &MultimodalBatch,
        adapters: Option<&AdapterSet>,
        opts: &ForwardOptions,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::eval();
        let v = self.forward(&mut g, &mut b, batch, adapters, opts)?;
        Ok(g.value(v).clone())
    }

    /// Greedy decoding from BOS; each row stops at EOS (excluded) or `max_len` tokens.
    ///
    /// Ties go to the lowest token id.
    pub fn greedy_decode(
        &self,
        batch: &MultimodalBatch,
        adapters: Option<&AdapterSet>,
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        self.greedy_decode_with(batch, adapters, max_len, &ForwardOptions::eval())
    }

    pub fn greedy_decode_with(
        &self,
        batch: &MultimodalBatch,
        adapters: Option<&AdapterSet>,
        max_len: usize,
        opts: &ForwardOptions,
    ) -> Result<Vec<Vec<usize>>> {
        if max_len == 0 {
            return Err(Error::Contract("max_len must be at least 1".into()));
        }
        let max_len = max_len.min(self.config.max_target_len);
        let mut g = Graph::new();
        let mut b = Binder::eval();
        let enc = self.encode(&mut g, &mut b, batch, adapters, opts)?;
        let v = self.config.vocab_size;
        let mut inputs: Vec<Vec<usize>> = vec![vec![BOS]; batch.len()];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); batch.len()];
        let mut done = vec![false; batch.len()];
        for step in 0..max_len {
            let logits = self.decode(&mut g, &mut b, &enc, &inputs, opts)?;
            let data = g.value(logits).data();
            for (i, row_in) in inputs.iter_mut().enumerate() {
                let row = &data[(i * (step + 1) + step) * v..][..v];
                let next = argmax(row);
                if !done[i] {
                    if next == EOS {
                        done[i] = true;
                    } else {
                        out[i].push(next);
                    }
                }
                row_in.push(if done[i] { PAD } else { next });
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
