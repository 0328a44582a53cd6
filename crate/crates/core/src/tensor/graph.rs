use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, softmax_in_place};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batched multi-head attention call.
///
/// Queries are `[batch·q_len × d]`, keys and values `[batch·k_len × d]`; row
/// blocks belonging to different batch elements never attend to each other.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `batch·k_len` flags; `false` keys receive zero probability.
    pub key_mask: Option<Vec<bool>>,
}

impl AttentionSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        match &self.key_mask {
            Some(m) => m[b * self.k_len + j],
            None => true,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A recording of operations in execution order.
///
/// Nodes are appended as operations run, so every node's inputs precede it and
/// [`Graph::backward`] can walk the list in reverse exactly once.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// The seed drives every stochastic op (dropout) recorded on this graph.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it collects a gradient.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: &Tensor, requires_grad: bool) -> Var {
        let mut t = Tensor::new(value.shape.clone(), value.data.clone()).unwrap();
        t.requires_grad = requires_grad;
        self.leaf(t)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.requires_grad = false;
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let mut value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, s), &[a])
    }

    /// Adds `bias` (length = trailing dim of `a`) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(bias).numel() != n {
            return Err(Error::dim("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = &self.value(bias).data;
        let data = self
            .value(a)
            .data
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(
            self.shape(a).to_vec(),
            data,
            Op::AddBias(a, bias),
            &[a, bias],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[2]));
        }
        let (m, n) = (s[0], s[1]);
        let data = kernels::transpose(&self.value(a).data, m, n);
        Ok(self.push(vec![n, m], data, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let data = self.value(a).data.clone();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(
            out_shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim("slice", &s, &[axis, start, len]));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let chunk = s[axis] * inner;
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * chunk + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(
            shape,
            data,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            &[a],
        ))
    }

    /// Row lookup `table[ids[i]]`; backward scatter-adds into the table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::dim("gather", s, &[2]));
        }
        let (vocab, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(Error::Contract("gather with no ids".into()));
        }
        let src = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary {
                    index: id,
                    vocab_size: vocab,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Normalises each row over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = &self.value(x).data;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let rows = xs.len() / n;
        let mut out = Vec::with_capacity(xs.len());
        let mut xhat = Vec::with_capacity(xs.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in xs.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), &[a])
    }

    /// Inverted dropout. Outside training (or with `p == 0`) this returns `a` itself.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} not in [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        Ok(self.push(
            self.shape(a).to_vec(),
            data,
            Op::Dropout { x: a, mask },
            &[a],
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("softmax_rows", s, &[2]));
        }
        let n = s[1];
        let mut data = self.value(a).data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(self.shape(a).to_vec(), data, Op::Softmax(a), &[a]))
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dim("cross_entropy", s, &[targets.len()]));
        }
        let v = s[1];
        let raw = &self.value(logits).data;
        let mut probs = raw.clone();
        let mut total = 0.0;
        let mut count = 0;
        for ((row, p), t) in raw.chunks(v).zip(probs.chunks_mut(v)).zip(targets) {
            softmax_in_place(p);
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::Vocabulary {
                        index: t,
                        vocab_size: v,
                    });
                }
                // log-sum-exp on the raw logits keeps precision for tiny probabilities
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        self.push(vec![1], vec![total], Op::Sum(a), &[a])
    }

    /// Scaled dot-product attention over `spec.heads` heads, batched by row blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        let d = sq.last().copied().unwrap_or(0);
        let ok = sq.len() == 2
            && sk == sv
            && sk.len() == 2
            && sk[1] == d
            && sq[0] == spec.batch * spec.q_len
            && sk[0] == spec.batch * spec.k_len
            && spec.heads > 0
            && d % spec.heads == 0
            && spec.key_mask.as_ref().is_none_or(|m| m.len() == sk[0])
            && (!spec.causal || spec.q_len == spec.k_len);
        if !ok {
            return Err(Error::dim("attention", sq, sk));
        }
        let probs = attention_probs(&self.value(q).data, &self.value(k).data, d, &spec);
        let dh = d / spec.heads;
        let vs = &self.value(v).data;
        let mut out = vec![0.0; spec.batch * spec.q_len * d];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                for i in 0..spec.q_len {
                    let p_row = &probs[((b * spec.heads + h) * spec.q_len + i) * spec.k_len..]
                        [..spec.k_len];
                    let o = &mut out[(b * spec.q_len + i) * d + h * dh..][..dh];
                    for (j, &p) in p_row.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vr = &vs[(b * spec.k_len + j) * d + h * dh..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vr) {
                            *oc += p * vc;
                        }
                    }
                }
            }
        }
        let shape = vec![spec.batch * spec.q_len, d];
        Ok(self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Runs reverse-mode accumulation from a scalar `loss`.
    ///
    /// Existing gradients on the graph are cleared first. Leaves that do not
    /// require a gradient never receive one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].value.grad.take() else {
                continue;
            };
            let contributions = self.backward_node(idx, &g);
            self.nodes[idx].value.grad = Some(g);
            for (var, delta) in contributions {
                let node = &mut self.nodes[var.0];
                match &mut node.value.grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(delta) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn backward_node(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(x, y)| x * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(va).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    out.push((*a, g.iter().map(|x| x * s).collect()));
                }
            }
            Op::AddBias(a, bias) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*bias) {
                    let n = self.value(*bias).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (acc, x) in gb.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    out.push((*bias, gb));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt_acc(g, &self.value(*b).data, &mut ga, m, n, k);
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn_acc(&self.value(*a).data, g, &mut gb, m, k, n);
                    out.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let s = self.shape(*a);
                    // output is n×m
                    out.push((*a, kernels::transpose(g, s[1], s[0])));
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = outer_inner(&node.value.shape, *axis);
                let total = node.value.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gv.extend_from_slice(
                                &g[o * total + offset..o * total + offset + chunk],
                            );
                        }
                        out.push((v, gv));
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                if self.needs(*input) {
                    let s = self.shape(*input);
                    let (outer, inner) = outer_inner(s, *axis);
                    let chunk = s[*axis] * inner;
                    let len = node.value.shape[*axis] * inner;
                    let mut gi = vec![0.0; self.value(*input).numel()];
                    for o in 0..outer {
                        let base = o * chunk + start * inner;
                        gi[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                    }
                    out.push((*input, gi));
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let d = self.value(*table).cols();
                    let mut gt = vec![0.0; self.value(*table).numel()];
                    for (row, &id) in ids.iter().enumerate() {
                        for (acc, x) in gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[row * d..(row + 1) * d])
                        {
                            *acc += x;
                        }
                    }
                    out.push((*table, gt));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).numel();
                let gm = &self.value(*gamma).data;
                if self.needs(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dxh: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let is = inv_std[r];
                        let nf = n as f64;
                        for (d, h) in dxh.iter().zip(hr) {
                            gx.push(is / nf * (nf * d - s1 - h * s2));
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*gamma) {
                    let mut gg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gamma, gg));
                }
                if self.needs(*beta) {
                    let mut gb = vec![0.0; n];
                    for gr in g.chunks(n) {
                        for j in 0..n {
                            gb[j] += gr[j];
                        }
                    }
                    out.push((*beta, gb));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let va = &self.value(*a).data;
                    out.push((
                        *a,
                        g.iter()
                            .zip(va)
                            .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                            .collect(),
                    ));
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    out.push((*x, g.iter().zip(mask).map(|(d, m)| d * m).collect()));
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = &node.value.data;
                    let n = node.value.cols();
                    let mut ga = Vec::with_capacity(y.len());
                    for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        ga.extend(gr.iter().zip(yr).map(|(d, y)| y * (d - dot)));
                    }
                    out.push((*a, ga));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.needs(*logits) {
                    let v = self.value(*logits).cols();
                    let mut gl = vec![0.0; probs.len()];
                    if *count > 0 {
                        let scale = g[0] / *count as f64;
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                let row = &mut gl[r * v..(r + 1) * v];
                                for (dst, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                                    *dst = p * scale;
                                }
                                row[t] -= scale;
                            }
                        }
                    }
                    out.push((*logits, gl));
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    out.push((*a, vec![g[0]; self.value(*a).numel()]));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                out.extend(self.attention_backward(*q, *k, *v, spec, probs, g));
            }
        }
        out
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        g: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (qs, ks, vs) = (
            &self.value(q).data,
            &self.value(k).data,
            &self.value(v).data,
        );
        let d = self.value(q).cols();
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; qs.len()];
        let mut gk = vec![0.0; ks.len()];
        let mut gv = vec![0.0; vs.len()];
        let mut dp = vec![0.0; spec.k_len];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                for i in 0..spec.q_len {
                    let p_row = &probs[((b * spec.heads + h) * spec.q_len + i) * spec.k_len..]
                        [..spec.k_len];
                    let qi = (b * spec.q_len + i) * d + h * dh;
                    let go = &g[qi..qi + dh];
                    let mut dot = 0.0;
                    for (j, &p) in p_row.iter().enumerate() {
                        let vj = (b * spec.k_len + j) * d + h * dh;
                        let s: f64 = go.iter().zip(&vs[vj..vj + dh]).map(|(a, b)| a * b).sum();
                        dp[j] = s;
                        dot += p * s;
                        if p != 0.0 {
                            for (acc, x) in gv[vj..vj + dh].iter_mut().zip(go) {
                                *acc += p * x;
                            }
                        }
                    }
                    for (j, &p) in p_row.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        let kj = (b * spec.k_len + j) * d + h * dh;
                        for c in 0..dh {
                            gq[qi + c] += ds * ks[kj + c];
                            gk[kj + c] += ds * qs[qi + c];
                        }
                    }
                }
            }
        }
        let mut out = Vec::new();
        if self.needs(q) {
            out.push((q, gq));
        }
        if self.needs(k) {
            out.push((k, gk));
        }
        if self.needs(v) {
            out.push((v, gv));
        }
        out
    }
}

/// Attention probabilities laid out `[batch, heads, q_len, k_len]`.
///
/// Masked positions get exactly zero; a row with no admissible key is all zero.
pub fn attention_probs(q: &[f64], k: &[f64], d: usize, spec: &AttentionSpec) -> Vec<f64> {
    let dh = d / spec.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; spec.batch * spec.heads * spec.q_len * spec.k_len];
    for b in 0..spec.batch {
        for h in 0..spec.heads {
            for i in 0..spec.q_len {
                let row = &mut probs[((b * spec.heads + h) * spec.q_len + i) * spec.k_len..]
                    [..spec.k_len];
                let qi = &q[(b * spec.q_len + i) * d + h * dh..][..dh];
                let mut max = f64::NEG_INFINITY;
                for (j, r) in row.iter_mut().enumerate() {
                    if spec.allowed(b, i, j) {
                        let kj = &k[(b * spec.k_len + j) * d + h * dh..][..dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        *r = s;
                        max = max.max(s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    row.fill(0.0);
                    continue;
                }
                let mut sum = 0.0;
                for (j, r) in row.iter_mut().enumerate() {
                    if spec.allowed(b, i, j) {
                        *r = (*r - max).exp();
                        sum += *r;
                    } else {
                        *r = 0.0;
                    }
                }
                for r in row.iter_mut() {
                    *r /= sum;
                }
            }
        }
    }
    probs
}
