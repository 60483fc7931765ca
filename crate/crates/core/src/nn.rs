//! Transformer block primitives: RMSNorm, SwiGLU MLP, rotary embeddings,
//! dual-input pre-norm attention blocks, cross-entropy and a
//! finite-difference gradient checker.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::AttnShape;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const RMS_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Dimensions shared by every block of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub d_model: usize,
    pub n_q: usize,
    pub n_kv: usize,
    pub mlp_hidden: usize,
}

impl BlockGeometry {
    /// MLP width defaults to `8D/3` rounded up to a multiple of 8.
    pub fn new(d_model: usize, n_q: usize, n_kv: usize) -> Result<Self> {
        let g = Self { d_model, n_q, n_kv, mlp_hidden: default_mlp_hidden(d_model) };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_q == 0 || self.n_kv == 0 || self.n_q % self.n_kv != 0 {
            return Err(Error::Config(format!(
                "query heads ({}) must be a positive multiple of kv heads ({})",
                self.n_q, self.n_kv
            )));
        }
        if self.d_model == 0 || self.d_model % self.n_q != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.d_model, self.n_q
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!("head dim {} must be even", self.head_dim())));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_q
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv * self.head_dim()
    }

    /// Trainable scalars in one block.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        2 * d + 2 * d * d + 2 * d * self.kv_width() + 3 * d * self.mlp_hidden
    }
}

pub fn default_mlp_hidden(d_model: usize) -> usize {
    (8 * d_model).div_ceil(3).div_ceil(8) * 8
}

/// Weights of one pre-norm Transformer block. Linear weights are stored
/// `[in × out]` so a layer computes `x·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<S> {
    pub attn_norm: Tensor<S>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub mlp_norm: Tensor<S>,
    pub w_gate: Tensor<S>,
    pub w_up: Tensor<S>,
    pub w_down: Tensor<S>,
}

pub(crate) fn normal_matrix<S: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<S> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(vec![rows, cols], |_| S::lit(dist.sample(rng)))
}

impl<S: Scalar> BlockParams<S> {
    pub fn init(geom: &BlockGeometry, rng: &mut impl Rng) -> Self {
        let d = geom.d_model;
        let kvw = geom.kv_width();
        let hid = geom.mlp_hidden;
        Self {
            attn_norm: Tensor::full(vec![d], S::one()),
            wq: normal_matrix(d, d, rng),
            wk: normal_matrix(d, kvw, rng),
            wv: normal_matrix(d, kvw, rng),
            wo: normal_matrix(d, d, rng),
            mlp_norm: Tensor::full(vec![d], S::one()),
            w_gate: normal_matrix(d, hid, rng),
            w_up: normal_matrix(d, hid, rng),
            w_down: normal_matrix(hid, d, rng),
        }
    }

    /// All projections zero, unit norm gains: the block is the identity.
    pub fn identity(geom: &BlockGeometry) -> Self {
        let d = geom.d_model;
        let kvw = geom.kv_width();
        let hid = geom.mlp_hidden;
        Self {
            attn_norm: Tensor::full(vec![d], S::one()),
            wq: Tensor::zeros(vec![d, d]),
            wk: Tensor::zeros(vec![d, kvw]),
            wv: Tensor::zeros(vec![d, kvw]),
            wo: Tensor::zeros(vec![d, d]),
            mlp_norm: Tensor::full(vec![d], S::one()),
            w_gate: Tensor::zeros(vec![d, hid]),
            w_up: Tensor::zeros(vec![d, hid]),
            w_down: Tensor::zeros(vec![hid, d]),
        }
    }

    pub fn named(&self) -> [(&'static str, &Tensor<S>); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor<S>); 9] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("mlp_norm", &mut self.mlp_norm),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }

    pub fn check(&self, geom: &BlockGeometry) -> Result<()> {
        let d = geom.d_model;
        let kvw = geom.kv_width();
        let hid = geom.mlp_hidden;
        let expect: [(&str, &Tensor<S>, Vec<usize>); 9] = [
            ("attn_norm", &self.attn_norm, vec![d]),
            ("wq", &self.wq, vec![d, d]),
            ("wk", &self.wk, vec![d, kvw]),
            ("wv", &self.wv, vec![d, kvw]),
            ("wo", &self.wo, vec![d, d]),
            ("mlp_norm", &self.mlp_norm, vec![d]),
            ("w_gate", &self.w_gate, vec![d, hid]),
            ("w_up", &self.w_up, vec![d, hid]),
            ("w_down", &self.w_down, vec![hid, d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BlockVars {
        BlockVars {
            attn_norm: tape.leaf(&self.attn_norm),
            wq: tape.leaf(&self.wq),
            wk: tape.leaf(&self.wk),
            wv: tape.leaf(&self.wv),
            wo: tape.leaf(&self.wo),
            mlp_norm: tape.leaf(&self.mlp_norm),
            w_gate: tape.leaf(&self.w_gate),
            w_up: tape.leaf(&self.w_up),
            w_down: tape.leaf(&self.w_down),
        }
    }
}

/// Tape handles for a bound [`BlockParams`], in the same order as `named()`.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl BlockVars {
    pub fn vars(&self) -> [Var; 9] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.mlp_norm,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }
}

/// Rows of a batch of equal-length sequences, laid out sequence-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
}

impl SeqLayout {
    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| r % self.len).collect()
    }
}

pub struct BlockOutput {
    pub out: Var,
    /// Keys after rotation, `[rows × kv_width]`.
    pub k: Var,
    pub v: Var,
}

pub fn swiglu_on_tape<S: Scalar>(tape: &mut Tape<S>, p: &BlockVars, x: Var) -> Result<Var> {
    let gate = tape.matmul(x, p.w_gate, false)?;
    let up = tape.matmul(x, p.w_up, false)?;
    let act = tape.silu_mul(gate, up)?;
    tape.matmul(act, p.w_down, false)
}

/// Pre-norm block with separate query and key/value inputs:
/// `y = q_in + attn(norm(q_in), norm(kv_in))`, `out = y + mlp(norm(y))`.
/// `kv_in = None` is ordinary self-attention.
pub fn block_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BlockVars,
    geom: &BlockGeometry,
    q_in: Var,
    kv_in: Option<Var>,
    layout: SeqLayout,
    causal: bool,
) -> Result<BlockOutput> {
    if layout.rows() == 0 {
        return Err(Error::Empty("attention block input"));
    }
    let hd = geom.head_dim();
    let positions = layout.positions();
    let hq = tape.rms_norm(q_in, Some(p.attn_norm), RMS_EPS)?;
    let hkv = match kv_in {
        Some(kv) => {
            if tape.shape(kv) != tape.shape(q_in) {
                return Err(Error::Shape(format!(
                    "q_in {:?} vs kv_in {:?}",
                    tape.shape(q_in),
                    tape.shape(kv)
                )));
            }
            tape.rms_norm(kv, Some(p.attn_norm), RMS_EPS)?
        }
        None => hq,
    };
    let q = tape.matmul(hq, p.wq, false)?;
    let k = tape.matmul(hkv, p.wk, false)?;
    let v = tape.matmul(hkv, p.wv, false)?;
    let q = tape.rope(q, geom.n_q, hd, &positions)?;
    let k = tape.rope(k, geom.n_kv, hd, &positions)?;
    let shape = AttnShape {
        batch: layout.batch,
        q_len: layout.len,
        kv_len: layout.len,
        n_q: geom.n_q,
        n_kv: geom.n_kv,
        head_dim: hd,
        causal,
        q_offset: 0,
    };
    let a = tape.attention(q, k, v, shape)?;
    let o = tape.matmul(a, p.wo, false)?;
    let y = tape.add(q_in, o)?;
    let hm = tape.rms_norm(y, Some(p.mlp_norm), RMS_EPS)?;
    let m = swiglu_on_tape(tape, p, hm)?;
    let out = tape.add(y, m)?;
    Ok(BlockOutput { out, k, v })
}

/// `gain[d] · x[t,d] / sqrt(mean_d x[t,·]² + eps)`.
pub fn rms_norm<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Config(format!("rms_norm eps must be ≥ 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let gv = tape.leaf(gain);
    let out = tape.rms_norm(xv, Some(gv), eps)?;
    Ok(tape.tensor(out))
}

/// `down(silu(gate(x)) ⊙ up(x))` using the block's MLP weights.
pub fn swiglu_mlp<S: Scalar>(x: &Tensor<S>, params: &BlockParams<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let p = params.bind(&mut tape);
    let out = swiglu_on_tape(&mut tape, &p, xv)?;
    Ok(tape.tensor(out))
}

/// Rotates query and key rows (`[T × heads·head_dim]`) by their positions.
pub fn rope_apply<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    head_dim: usize,
    positions: &[usize],
) -> Result<(Tensor<S>, Tensor<S>)> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::Shape(format!("rope needs an even head dimension, got {head_dim}")));
    }
    let mut tape = Tape::new();
    let (_, qw) = q.dims2()?;
    let (_, kw) = k.dims2()?;
    if qw % head_dim != 0 || kw % head_dim != 0 {
        return Err(Error::Shape(format!("widths {qw}/{kw} not multiples of head dim {head_dim}")));
    }
    let qv = tape.leaf(q);
    let kv = tape.leaf(k);
    let qr = tape.rope(qv, qw / head_dim, head_dim, positions)?;
    let kr = tape.rope(kv, kw / head_dim, head_dim, positions)?;
    Ok((tape.tensor(qr), tape.tensor(kr)))
}

/// Full block on a single sequence.
pub fn attention_block<S: Scalar>(
    q_in: &Tensor<S>,
    kv_in: &Tensor<S>,
    params: &BlockParams<S>,
    geom: &BlockGeometry,
    causal: bool,
) -> Result<Tensor<S>> {
    let (t, d) = q_in.dims2()?;
    if kv_in.dims2()? != (t, d) {
        return Err(Error::Shape(format!("q_in {:?} vs kv_in {:?}", q_in.shape(), kv_in.shape())));
    }
    if t == 0 {
        return Err(Error::Empty("attention block input"));
    }
    params.check(geom)?;
    let mut tape = Tape::new();
    let qv = tape.leaf(q_in);
    let kv = tape.leaf(kv_in);
    let p = params.bind(&mut tape);
    let out = block_on_tape(&mut tape, &p, geom, qv, Some(kv), SeqLayout { batch: 1, len: t }, causal)?;
    Ok(tape.tensor(out.out))
}

/// Mean over positions of `−log softmax(logits)[t, target_t]`.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<S> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let ce = tape.cross_entropy(l, targets)?;
    Ok(tape.scalar(ce))
}

/// Compares the tape gradient of the scalar built by `f` with central
/// differences `(f(x+h·e_i) − f(x−h·e_i)) / 2h`, returning the largest
/// elementwise error relative to the gradient's max magnitude.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let y = f(&mut tape, xv)?;
    let analytic = tape.backward(y).get_or_zeros(xv, x.len());

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let out = f(&mut t, v)?;
        Ok(t.scalar(out))
    };
    let mut numeric = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * h);
    }
    Ok(relative_error(&analytic, &numeric))
}

/// `max_i |a_i − b_i| / max(‖a‖∞, ‖b‖∞)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
