//! The latent encoder: one non-causal block whose queries are a learned
//! vector `ζ` replicated over positions and whose keys/values are the
//! first-half decoder activations, followed by a readout to bit logits.
//! Also the KL of the factorized code against the uniform prior and the
//! token-wise free-bits penalty.

use std::f64::consts::LN_2;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::log_sigmoid;
use crate::mapper::BitLogits;
use crate::nn::{self, BlockGeometry, BlockParams, BlockVars, SeqLayout};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

const P_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<S> {
    /// `[1 × D]`
    pub zeta: Tensor<S>,
    pub block: BlockParams<S>,
    /// `[D × H]`
    pub readout: Tensor<S>,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub zeta: Var,
    pub block: BlockVars,
    pub readout: Var,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn init(geom: &BlockGeometry, bits: usize, rng: &mut impl Rng) -> Self {
        Self {
            zeta: nn::normal_matrix(1, geom.d_model, rng),
            block: BlockParams::init(geom, rng),
            readout: Tensor::zeros(vec![geom.d_model, bits]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.zeta.len() + self.block.named().iter().map(|(_, t)| t.len()).sum::<usize>() + self.readout.len()
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> EncoderVars {
        EncoderVars {
            zeta: tape.leaf(&self.zeta),
            block: self.block.bind(tape),
            readout: tape.leaf(&self.readout),
        }
    }
}

/// Bit logits `readout(norm(block(q = ζ·1_T, kv = x_half)))` on a tape.
/// The readout norm has no trainable gain.
pub fn encode_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    p: &EncoderVars,
    geom: &BlockGeometry,
    x_half: Var,
    layout: SeqLayout,
) -> Result<Var> {
    if layout.rows() == 0 {
        return Err(Error::Empty("encoder input"));
    }
    let queries = tape.broadcast_rows(p.zeta, layout.rows())?;
    let y = nn::block_on_tape(tape, &p.block, geom, queries, Some(x_half), layout, false)?;
    let h = tape.rms_norm(y.out, None, nn::RMS_EPS)?;
    tape.matmul(h, p.readout, false)
}

/// Encodes one sequence of first-half activations `[T × D]`.
pub fn encode<S: Scalar>(x_half: &Tensor<S>, params: &EncoderParams<S>, geom: &BlockGeometry) -> Result<BitLogits<S>> {
    let (t, _) = x_half.dims2()?;
    if t == 0 {
        return Err(Error::Empty("encoder input"));
    }
    params.block.check(geom)?;
    let mut tape = Tape::new();
    let x = tape.leaf(x_half);
    let p = params.bind(&mut tape);
    let logits = encode_on_tape(&mut tape, &p, geom, x, SeqLayout { batch: 1, len: t })?;
    BitLogits::new(tape.tensor(logits))
}

/// Free-bits threshold in nats per token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeBitsConfig {
    pub kappa: f64,
}

impl FreeBitsConfig {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be finite and ≥ 0, got {kappa}")));
        }
        Ok(Self { kappa })
    }
}

fn clamped_probs(logit: f64) -> (f64, f64) {
    let p1 = log_sigmoid(logit).exp().clamp(P_CLAMP, 1.0 - P_CLAMP);
    let p0 = log_sigmoid(-logit).exp().clamp(P_CLAMP, 1.0 - P_CLAMP);
    (p1, p0)
}

/// KL contribution of one bit: `log 2 + p log p + (1−p) log(1−p)`.
pub fn kl_bit(logit: f64) -> f64 {
    let (p1, p0) = clamped_probs(logit);
    (LN_2 + p1 * p1.ln() + p0 * p0.ln()).clamp(0.0, LN_2)
}

/// `d kl_bit / d logit = p(1−p)·logit`, zero where the clamp is active.
pub fn kl_bit_derivative(logit: f64) -> f64 {
    let p = log_sigmoid(logit).exp();
    if !(P_CLAMP..=1.0 - P_CLAMP).contains(&p) {
        return 0.0;
    }
    let q = log_sigmoid(-logit).exp();
    p * q * logit
}

pub(crate) fn kl_rows<S: Scalar>(logits: &[S], bits: usize) -> Vec<S> {
    logits
        .chunks_exact(bits)
        .map(|row| S::lit(row.iter().map(|l| kl_bit(l.f64())).sum()))
        .collect()
}

/// `KL(Q(Z_t|S) ‖ uniform)` per position, from the factorized Bernoulli form.
pub fn kl_per_token<S: Scalar>(logits: &BitLogits<S>) -> Vec<S> {
    kl_rows(logits.tensor().data(), logits.bits())
}

/// `(1/T) Σ_t max(0, KL_t − κ)`.
pub fn free_bits_penalty<S: Scalar>(kl: &[S], cfg: &FreeBitsConfig) -> S {
    if kl.is_empty() {
        return S::zero();
    }
    let k = S::lit(cfg.kappa);
    kl.iter().map(|&x| (x - k).max(S::zero())).sum::<S>() / S::lit(kl.len() as f64)
}
