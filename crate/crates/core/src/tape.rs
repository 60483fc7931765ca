//! A small reverse-mode tape over dense row-major tensors.
//!
//! Every op is coarse-grained (a whole attention call, a whole RMSNorm) with a
//! hand-derived backward. Nodes are appended in evaluation order, so a node's
//! inputs always have smaller indices than the node itself.

use crate::error::{Error, Result};
use crate::kernels::{self, AttnShape};
use crate::{encoder, mapper};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Constant,
    MatMul { x: usize, w: usize, trans_w: bool, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Broadcast { x: usize },
    RmsNorm { x: usize, gain: Option<usize>, inv: Vec<S> },
    Rope { x: usize, heads: usize, head_dim: usize, positions: Vec<usize> },
    Attention { q: usize, k: usize, v: usize, shape: AttnShape, probs: Vec<S> },
    SiluMul { gate: usize, up: usize },
    Embedding { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<S> },
    BinaryMapper { logits: usize, g: Vec<S> },
    Kl { logits: usize, bits: usize },
    FreeBits { kl: usize, kappa: S },
    WeightedSum { x: usize, w: Vec<S> },
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or probe point).
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<S>) -> Var {
        self.push(shape, value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("tape node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        match *self.shape(v) {
            [c] => (1, c),
            [r, c] => (r, c),
            ref s => panic!("expected matrix node, got {s:?}"),
        }
    }

    /// `x·w` (or `x·wᵀ` when `trans_w`), `x: [m×k]`.
    pub fn matmul(&mut self, x: Var, w: Var, trans_w: bool) -> Result<Var> {
        let (m, k) = self.dims2(x);
        let (wr, wc) = self.dims2(w);
        let (wk, n) = if trans_w { (wc, wr) } else { (wr, wc) };
        if wk != k {
            return Err(shape_err(format!(
                "matmul [{m}×{k}] by {}[{wr}×{wc}]",
                if trans_w { "transposed " } else { "" }
            )));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(self.value(x), false, self.value(w), trans_w, &mut out, m, k, n, S::zero());
        Ok(self.push(vec![m, n], out, Op::MatMul { x: x.0, w: w.0, trans_w, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a.0, b.0)))
    }

    /// Replicates a single row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if r != 1 {
            return Err(shape_err(format!("broadcast expects one row, got {r}")));
        }
        let row = self.value(x).to_vec();
        let out = (0..rows).flat_map(|_| row.iter().copied()).collect();
        Ok(self.push(vec![rows, c], out, Op::Broadcast { x: x.0 }))
    }

    /// Row-wise RMSNorm. `gain = None` means a fixed unit gain.
    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>, eps: f64) -> Result<Var> {
        let (rows, d) = self.dims2(x);
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rms_norm input"));
        }
        let ones;
        let g = match gain {
            Some(g) => {
                if self.value(g).len() != d {
                    return Err(shape_err(format!("rms_norm gain {} vs width {d}", self.value(g).len())));
                }
                self.value(g)
            }
            None => {
                ones = vec![S::one(); d];
                &ones
            }
        };
        let mut out = vec![S::zero(); rows * d];
        let mut inv = vec![S::zero(); rows];
        kernels::rms_norm_forward(self.value(x), g, S::lit(eps), &mut out, &mut inv);
        Ok(self.push(vec![rows, d], out, Op::RmsNorm { x: x.0, gain: gain.map(|g| g.0), inv }))
    }

    pub fn rope(&mut self, x: Var, heads: usize, head_dim: usize, positions: &[usize]) -> Result<Var> {
        let (rows, w) = self.dims2(x);
        if head_dim % 2 != 0 {
            return Err(shape_err(format!("rope needs an even head dimension, got {head_dim}")));
        }
        if w != heads * head_dim || positions.len() != rows {
            return Err(shape_err(format!(
                "rope on [{rows}×{w}] with {heads}×{head_dim} heads and {} positions",
                positions.len()
            )));
        }
        let mut out = self.value(x).to_vec();
        kernels::rope(&mut out, heads, head_dim, positions, false);
        Ok(self.push(
            vec![rows, w],
            out,
            Op::Rope { x: x.0, heads, head_dim, positions: positions.to_vec() },
        ))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let rows_q = shape.batch * shape.q_len;
        let rows_kv = shape.batch * shape.kv_len;
        if rows_q == 0 || shape.kv_len == 0 {
            return Err(Error::Empty("attention sequence"));
        }
        if shape.n_kv == 0 || shape.n_q % shape.n_kv != 0 {
            return Err(shape_err(format!("{} query heads over {} kv heads", shape.n_q, shape.n_kv)));
        }
        if self.dims2(q) != (rows_q, shape.q_width())
            || self.dims2(k) != (rows_kv, shape.kv_width())
            || self.dims2(v) != (rows_kv, shape.kv_width())
        {
            return Err(shape_err(format!("attention operands do not match {shape:?}")));
        }
        let mut out = vec![S::zero(); rows_q * shape.q_width()];
        let mut probs = vec![S::zero(); shape.probs_len()];
        kernels::attention_forward(&shape, self.value(q), self.value(k), self.value(v), &mut out, &mut probs)?;
        Ok(self.push(
            vec![rows_q, shape.q_width()],
            out,
            Op::Attention { q: q.0, k: k.0, v: v.0, shape, probs },
        ))
    }

    /// `silu(gate) ⊙ up`.
    pub fn silu_mul(&mut self, gate: Var, up: Var) -> Result<Var> {
        if self.shape(gate) != self.shape(up) {
            return Err(shape_err(format!("silu_mul {:?} vs {:?}", self.shape(gate), self.shape(up))));
        }
        let mut out = vec![S::zero(); self.value(gate).len()];
        kernels::silu_mul_forward(self.value(gate), self.value(up), &mut out);
        Ok(self.push(self.shape(gate).to_vec(), out, Op::SiluMul { gate: gate.0, up: up.0 }))
    }

    /// Gathers rows of `table` (`[n×d]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::TokenOutOfRange { token: id, vocab: n });
            }
            out.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table: table.0, ids: ids.to_vec() }))
    }

    /// Mean token cross-entropy of `logits: [n×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2(logits);
        if targets.len() != n {
            return Err(shape_err(format!("{} targets for {n} logit rows", targets.len())));
        }
        if n == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_exact_mut(v).zip(targets) {
            if t >= v {
                return Err(Error::TokenOutOfRange { token: t, vocab: v });
            }
            let lse = kernels::log_sum_exp(row);
            total += (lse - row[t]).f64();
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy"));
        }
        Ok(self.push(
            vec![1],
            vec![S::lit(loss)],
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs },
        ))
    }

    /// One-hot of the sampled code with the probability-table gradient.
    /// `bits` must be a constant node holding 0/1 values of the same shape as `logits`.
    pub fn binary_mapper(&mut self, logits: Var, bits: Var) -> Result<Var> {
        self.binary_mapper_inner(logits, bits, None)
    }

    /// Like [`Tape::binary_mapper`] but emits `one_hot + G(L) − anchor`,
    /// whose value moves with the logits. Equal to the one-hot when
    /// `anchor` is the table at the current logits; used to check the
    /// pass-through gradient by finite differences.
    pub fn binary_mapper_surrogate(&mut self, logits: Var, bits: Var, anchor: &[S]) -> Result<Var> {
        self.binary_mapper_inner(logits, bits, Some(anchor))
    }

    fn binary_mapper_inner(&mut self, logits: Var, bits: Var, anchor: Option<&[S]>) -> Result<Var> {
        let (n, h) = self.dims2(logits);
        if self.dims2(bits) != (n, h) {
            return Err(shape_err(format!("bits {:?} vs logits [{n}×{h}]", self.shape(bits))));
        }
        if !(1..=mapper::MAX_BITS).contains(&h) {
            return Err(Error::Config(format!("latent bits must be in 1..={}, got {h}", mapper::MAX_BITS)));
        }
        if self.value(logits).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("bit logits"));
        }
        let width = 1usize << h;
        let g = mapper::g_table(self.value(logits), h);
        let mut out = vec![S::zero(); n * width];
        for (r, bits_row) in self.value(bits).chunks_exact(h).enumerate() {
            let idx = bits_row
                .iter()
                .enumerate()
                .fold(0usize, |acc, (j, &b)| acc | (usize::from(b > S::lit(0.5)) << j));
            out[r * width + idx] = S::one();
        }
        if let Some(anchor) = anchor {
            if anchor.len() != out.len() {
                return Err(shape_err(format!("anchor of {} for a {}-entry table", anchor.len(), out.len())));
            }
            for ((o, &gv), &a) in out.iter_mut().zip(&g).zip(anchor) {
                *o += gv - a;
            }
        }
        Ok(self.push(vec![n, width], out, Op::BinaryMapper { logits: logits.0, g }))
    }

    /// Per-row KL of the factorized Bernoulli code against the uniform prior.
    pub fn kl_per_token(&mut self, logits: Var) -> Result<Var> {
        let (n, h) = self.dims2(logits);
        let kl = encoder::kl_rows(self.value(logits), h);
        Ok(self.push(vec![n], kl, Op::Kl { logits: logits.0, bits: h }))
    }

    /// `mean_t max(0, kl_t − κ)`.
    pub fn free_bits(&mut self, kl: Var, kappa: f64) -> Result<Var> {
        let vals = self.value(kl);
        if vals.is_empty() {
            return Err(Error::Empty("free_bits"));
        }
        let k = S::lit(kappa);
        let total: S = vals.iter().map(|&x| (x - k).max(S::zero())).sum();
        let out = total / S::lit(vals.len() as f64);
        Ok(self.push(vec![1], vec![out], Op::FreeBits { kl: kl.0, kappa: k }))
    }

    /// `Σ w_i x_i`, a scalar probe used by gradient checks.
    pub fn weighted_sum(&mut self, x: Var, w: &[S]) -> Result<Var> {
        if self.value(x).len() != w.len() {
            return Err(shape_err(format!("{} weights for {} values", w.len(), self.value(x).len())));
        }
        let s: S = self.value(x).iter().zip(w).map(|(&a, &b)| a * b).sum();
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { x: x.0, w: w.to_vec() }))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<S>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            self.backprop_node(i, g, lower);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &[S], lower: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul { x, w, trans_w, m, k, n } => {
                let wv = &nodes[w].value;
                let xv = &nodes[x].value;
                // dx = g·wᵀ
                kernels::matmul(g, false, wv, !trans_w, acc(lower, nodes, x), m, n, k, S::one());
                if trans_w {
                    // w stored [n×k]: dw = gᵀ·x
                    kernels::matmul(g, true, xv, false, acc(lower, nodes, w), n, m, k, S::one());
                } else {
                    kernels::matmul(xv, true, g, false, acc(lower, nodes, w), k, m, n, S::one());
                }
            }
            &Op::Add(a, b) => {
                for (d, &gv) in acc(lower, nodes, a).iter_mut().zip(g) {
                    *d += gv;
                }
                for (d, &gv) in acc(lower, nodes, b).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            &Op::Broadcast { x } => {
                let d = nodes[x].value.len();
                let dx = acc(lower, nodes, x);
                for row in g.chunks_exact(d) {
                    for (a, &b) in dx.iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let d = *node.shape.last().unwrap();
                let ones = vec![S::one(); d];
                let gv = gain.map_or(&ones, |gi| &nodes[gi].value);
                let mut dgain = vec![S::zero(); d];
                kernels::rms_norm_backward(&nodes[*x].value, gv, inv, g, acc(lower, nodes, *x), &mut dgain);
                if let Some(gi) = gain {
                    for (a, b) in acc(lower, nodes, *gi).iter_mut().zip(dgain) {
                        *a += b;
                    }
                }
            }
            Op::Rope { x, heads, head_dim, positions } => {
                let mut back = g.to_vec();
                kernels::rope(&mut back, *heads, *head_dim, positions, true);
                for (a, b) in acc(lower, nodes, *x).iter_mut().zip(back) {
                    *a += b;
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                let mut dq = lower[*q].take().unwrap_or_else(|| vec![S::zero(); nodes[*q].value.len()]);
                let mut dk = lower[*k].take().unwrap_or_else(|| vec![S::zero(); nodes[*k].value.len()]);
                let mut dv = lower[*v].take().unwrap_or_else(|| vec![S::zero(); nodes[*v].value.len()]);
                kernels::attention_backward(
                    shape,
                    &nodes[*q].value,
                    &nodes[*k].value,
                    &nodes[*v].value,
                    probs,
                    g,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                lower[*q] = Some(dq);
                lower[*k] = Some(dk);
                lower[*v] = Some(dv);
            }
            &Op::SiluMul { gate, up } => {
                let mut dg = lower[gate].take().unwrap_or_else(|| vec![S::zero(); g.len()]);
                let mut du = lower[up].take().unwrap_or_else(|| vec![S::zero(); g.len()]);
                kernels::silu_mul_backward(&nodes[gate].value, &nodes[up].value, g, &mut dg, &mut du);
                lower[gate] = Some(dg);
                lower[up] = Some(du);
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                let dt = acc(lower, nodes, *table);
                for (row, &id) in g.chunks_exact(d).zip(ids) {
                    for (a, &b) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = probs.len() / targets.len();
                let scale = g[0] / S::lit(targets.len() as f64);
                let dl = acc(lower, nodes, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..v {
                        let one = if c == t { S::one() } else { S::zero() };
                        dl[r * v + c] += scale * (probs[r * v + c] - one);
                    }
                }
            }
            Op::BinaryMapper { logits, g: table, .. } => {
                let h = *nodes[*logits].shape.last().unwrap();
                mapper::g_backward(&nodes[*logits].value, table, g, h, acc(lower, nodes, *logits));
            }
            &Op::Kl { logits, bits } => {
                let lv = &nodes[logits].value;
                let dl = acc(lower, nodes, logits);
                for (r, &gk) in g.iter().enumerate() {
                    for j in 0..bits {
                        let idx = r * bits + j;
                        dl[idx] += gk * S::lit(encoder::kl_bit_derivative(lv[idx].f64()));
                    }
                }
            }
            &Op::FreeBits { kl, kappa } => {
                let kv = &nodes[kl].value;
                let scale = g[0] / S::lit(kv.len() as f64);
                let dk = acc(lower, nodes, kl);
                for (d, &x) in dk.iter_mut().zip(kv) {
                    if x > kappa {
                        *d += scale;
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                for (d, &wi) in acc(lower, nodes, *x).iter_mut().zip(w) {
                    *d += g[0] * wi;
                }
            }
        }
    }
}

fn acc<'a, S: Scalar>(lower: &'a mut [Option<Vec<S>>], nodes: &[Node<S>], j: usize) -> &'a mut Vec<S> {
    lower[j].get_or_insert_with(|| vec![S::zero(); nodes[j].value.len()])
}

/// Gradients from one reverse sweep, indexed by tape variable.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<S> {
        self.get(v).map_or_else(|| vec![S::zero(); len], <[S]>::to_vec)
    }
}
