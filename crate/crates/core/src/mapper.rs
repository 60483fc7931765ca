//! Binary Mapper: turns `H` per-position bit logits into a sampled one-hot
//! code of width `2^H`, passing gradients through the exact code
//! probabilities `G`.
//!
//! Codes are 0-indexed: bit `h` (0-based) contributes `2^h`, so the index is
//! `Σ_h 2^h · B_h` and the 1-based code number is `index + 1`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::log_sigmoid;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

pub const MAX_BITS: usize = 16;

/// Bit logits, one row of `H` values per position.
#[derive(Clone, Debug, PartialEq)]
pub struct BitLogits<S> {
    values: Tensor<S>,
}

impl<S: Scalar> BitLogits<S> {
    pub fn new(values: Tensor<S>) -> Result<Self> {
        let (_, h) = values.dims2()?;
        if !(1..=MAX_BITS).contains(&h) {
            return Err(Error::Config(format!("latent bits must be in 1..={MAX_BITS}, got {h}")));
        }
        values.ensure_finite("bit logits")?;
        let values = if values.shape().len() == 1 {
            Tensor::matrix(1, h, values.into_data())?
        } else {
            values
        };
        Ok(Self { values })
    }

    pub fn from_rows(rows: usize, bits: usize, data: Vec<S>) -> Result<Self> {
        Self::new(Tensor::matrix(rows, bits, data)?)
    }

    pub fn positions(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bits(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.values
    }
}

/// Sampled bits, `positions × bits`, each 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    pub positions: usize,
    pub bits: usize,
    pub data: Vec<u8>,
}

impl BitMatrix {
    pub fn row(&self, t: usize) -> &[u8] {
        &self.data[t * self.bits..(t + 1) * self.bits]
    }
}

/// Per-position latent code indices in `[0, 2^bits)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentSeq {
    pub indices: Vec<usize>,
    pub bits: usize,
}

impl LatentSeq {
    pub fn width(&self) -> usize {
        1 << self.bits
    }

    pub fn to_bits(&self) -> BitMatrix {
        let data = self.indices.iter().flat_map(|&i| bits_of_index(i, self.bits)).collect();
        BitMatrix { positions: self.indices.len(), bits: self.bits, data }
    }
}

/// `P(bit = 1) = σ(logit)`, drawn independently per position and bit.
pub fn sample_bits<S: Scalar>(logits: &BitLogits<S>, rng: &mut impl Rng) -> BitMatrix {
    let data = logits
        .values
        .data()
        .iter()
        .map(|l| u8::from(rng.random::<f64>() < log_sigmoid(l.f64()).exp()))
        .collect();
    BitMatrix { positions: logits.positions(), bits: logits.bits(), data }
}

pub fn index_of_bits(bits: &BitMatrix) -> LatentSeq {
    let indices = (0..bits.positions)
        .map(|t| bits.row(t).iter().enumerate().fold(0, |acc, (h, &b)| acc | (usize::from(b) << h)))
        .collect();
    LatentSeq { indices, bits: bits.bits }
}

pub fn bits_of_index(index: usize, bits: usize) -> Vec<u8> {
    (0..bits).map(|h| ((index >> h) & 1) as u8).collect()
}

/// Code probabilities `G[t, d] = Π_h P(B_h = U_h(d))`, summed in log space.
/// Rows are `[positions × 2^bits]`.
pub fn g_table<S: Scalar>(logits: &[S], bits: usize) -> Vec<S> {
    let width = 1usize << bits;
    let mut out = Vec::with_capacity(logits.len() / bits * width);
    let mut log_g = vec![0.0f64; width];
    for row in logits.chunks_exact(bits) {
        log_g[0] = 0.0;
        for (h, l) in row.iter().enumerate() {
            let l = l.f64();
            let (lp1, lp0) = (log_sigmoid(l), log_sigmoid(-l));
            let half = 1usize << h;
            for d in 0..half {
                log_g[d + half] = log_g[d] + lp1;
                log_g[d] += lp0;
            }
        }
        out.extend(log_g.iter().map(|&v| S::lit(v.exp())));
    }
    out
}

/// Accumulates `Σ_d dY[t,d] · ∂G[t,d]/∂L[t,h]` into `dlogits`, using
/// `∂G_d/∂L_h = G_d · (U_h(d) − σ(L_h))`.
pub fn g_backward<S: Scalar>(logits: &[S], g: &[S], dy: &[S], bits: usize, dlogits: &mut [S]) {
    let width = 1usize << bits;
    for (t, row) in logits.chunks_exact(bits).enumerate() {
        let g_row = &g[t * width..(t + 1) * width];
        let dy_row = &dy[t * width..(t + 1) * width];
        let mut weighted = vec![0.0f64; bits];
        let mut total = 0.0f64;
        for d in 0..width {
            let w = dy_row[d].f64() * g_row[d].f64();
            total += w;
            for (h, acc) in weighted.iter_mut().enumerate() {
                if (d >> h) & 1 == 1 {
                    *acc += w;
                }
            }
        }
        for (h, l) in row.iter().enumerate() {
            let p = log_sigmoid(l.f64()).exp();
            dlogits[t * bits + h] += S::lit(weighted[h] - p * total);
        }
    }
}

/// Forward value of the mapper: the exact one-hot of the sampled code.
/// Gradients (on a tape) flow as `∂G/∂L`.
pub fn gumbel_free_pass_through<S: Scalar>(logits: &BitLogits<S>, bits: &BitMatrix) -> Result<Tensor<S>> {
    check_bits(logits, bits)?;
    let mut tape = Tape::new();
    let l = tape.leaf(&logits.values);
    let b = bits_constant(&mut tape, bits);
    let out = tape.binary_mapper(l, b)?;
    Ok(tape.tensor(out))
}

pub(crate) fn bits_constant<S: Scalar>(tape: &mut Tape<S>, bits: &BitMatrix) -> crate::tape::Var {
    tape.constant(
        vec![bits.positions, bits.bits],
        bits.data.iter().map(|&b| S::lit(f64::from(b))).collect(),
    )
}

fn check_bits<S: Scalar>(logits: &BitLogits<S>, bits: &BitMatrix) -> Result<()> {
    if bits.positions != logits.positions() || bits.bits != logits.bits() {
        return Err(Error::Shape(format!(
            "bits {}×{} vs logits {}×{}",
            bits.positions,
            bits.bits,
            logits.positions(),
            logits.bits()
        )));
    }
    Ok(())
}

/// Checks that the tape gradient of `Σ_{t,d} w[t,d] · out[t,d]` with respect
/// to the logits equals the finite-difference gradient of `Σ w · G` (the
/// sampled one-hot is constant under perturbation). Returns the max
/// relative error.
pub fn grad_of_g_check(logits: &BitLogits<f64>, bits: &BitMatrix, weights: &[f64], h: f64) -> Result<f64> {
    check_bits(logits, bits)?;
    if logits.bits() > 8 {
        return Err(Error::Config("gradient check limited to 8 bits".into()));
    }
    let mut tape = Tape::new();
    let l = tape.leaf(&logits.values);
    let b = bits_constant(&mut tape, bits);
    let out = tape.binary_mapper(l, b)?;
    let s = tape.weighted_sum(out, weights)?;
    let analytic = tape.backward(s).get_or_zeros(l, logits.values.len());

    let bits_n = logits.bits();
    let objective = |vals: &[f64]| -> f64 {
        g_table(vals, bits_n).iter().zip(weights).map(|(g, w)| g * w).sum()
    };
    let mut probe = logits.values.data().to_vec();
    let numeric: Vec<f64> = (0..probe.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = objective(&probe);
            probe[i] = orig - h;
            let fm = objective(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect();
    Ok(crate::nn::relative_error(&analytic, &numeric))
}
