//! Slice-level forward and backward kernels shared by the autodiff tape
//! and the incremental (KV-cached) decoding path.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const ROPE_BASE: f64 = 10_000.0;

/// `c = a·b + beta·c` where `a` is logically `m×k` and `b` is `k×n`.
/// `ta`/`tb` mean the operand is stored transposed (row-major `k×m`, `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<S: Scalar>(
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    c: &mut [S],
    m: usize,
    k: usize,
    n: usize,
    beta: S,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "matmul operand sizes");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn rms_norm_forward<S: Scalar>(
    x: &[S],
    gain: &[S],
    eps: S,
    out: &mut [S],
    inv_rms: &mut [S],
) {
    let d = gain.len();
    for (r, (xr, yr)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let ms = xr.iter().map(|&v| v * v).sum::<S>() / S::lit(d as f64);
        let inv = S::one() / (ms + eps).sqrt();
        inv_rms[r] = inv;
        for ((y, &v), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *y = g * v * inv;
        }
    }
}

/// Accumulates into `dx` and `dgain`.
pub fn rms_norm_backward<S: Scalar>(
    x: &[S],
    gain: &[S],
    inv_rms: &[S],
    dy: &[S],
    dx: &mut [S],
    dgain: &mut [S],
) {
    let d = gain.len();
    let dn = S::lit(d as f64);
    for (r, ((xr, dyr), dxr)) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let inv = inv_rms[r];
        let mut dot = S::zero();
        for j in 0..d {
            dot += gain[j] * dyr[j] * xr[j];
            dgain[j] += dyr[j] * xr[j] * inv;
        }
        let coef = inv * inv * inv * dot / dn;
        for j in 0..d {
            dxr[j] += inv * gain[j] * dyr[j] - coef * xr[j];
        }
    }
}

/// Rotates consecutive channel pairs of every head in place. `inverse`
/// applies the transposed rotation, which is the backward pass.
pub fn rope<S: Scalar>(
    x: &mut [S],
    n_heads: usize,
    head_dim: usize,
    positions: &[usize],
    inverse: bool,
) {
    let width = n_heads * head_dim;
    let half = head_dim / 2;
    let mut table = vec![(S::one(), S::zero()); half];
    for (row, &pos) in x.chunks_exact_mut(width).zip(positions) {
        for (i, entry) in table.iter_mut().enumerate() {
            let freq = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            let s = if inverse { -angle.sin() } else { angle.sin() };
            *entry = (S::lit(angle.cos()), S::lit(s));
        }
        for head in row.chunks_exact_mut(head_dim) {
            for (i, &(c, s)) in table.iter().enumerate() {
                let a = head[2 * i];
                let b = head[2 * i + 1];
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn silu_mul_forward<S: Scalar>(gate: &[S], up: &[S], out: &mut [S]) {
    for ((o, &g), &u) in out.iter_mut().zip(gate).zip(up) {
        *o = g * sigmoid(g) * u;
    }
}

pub fn silu_mul_backward<S: Scalar>(
    gate: &[S],
    up: &[S],
    dy: &[S],
    dgate: &mut [S],
    dup: &mut [S],
) {
    for i in 0..gate.len() {
        let g = gate[i];
        let s = sigmoid(g);
        let silu = g * s;
        dup[i] += dy[i] * silu;
        dgate[i] += dy[i] * up[i] * s * (S::one() + g * (S::one() - s));
    }
}

/// Geometry of a (possibly grouped-query) attention call over a batch.
///
/// Queries are `batch·q_len` rows of width `n_q·head_dim`; keys and values
/// are `batch·kv_len` rows of width `n_kv·head_dim`. Query `i` sits at
/// absolute position `q_offset + i` and, when causal, sees keys `0..=q_offset+i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub n_q: usize,
    pub n_kv: usize,
    pub head_dim: usize,
    pub causal: bool,
    pub q_offset: usize,
}

impl AttnShape {
    pub fn q_width(&self) -> usize {
        self.n_q * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv * self.head_dim
    }

    pub fn probs_len(&self) -> usize {
        self.batch * self.n_q * self.q_len * self.kv_len
    }

    fn visible(&self, i: usize) -> usize {
        if self.causal {
            (self.q_offset + i + 1).min(self.kv_len)
        } else {
            self.kv_len
        }
    }

    fn group(&self) -> usize {
        self.n_q / self.n_kv
    }
}

/// Scaled dot-product attention. Writes the output rows and the softmax
/// probabilities (`[batch, n_q, q_len, kv_len]`, exact zeros where masked).
pub fn attention_forward<S: Scalar>(
    shape: &AttnShape,
    q: &[S],
    k: &[S],
    v: &[S],
    out: &mut [S],
    probs: &mut [S],
) -> Result<()> {
    let AttnShape { batch, q_len, kv_len, n_q, head_dim: hd, .. } = *shape;
    let qw = shape.q_width() as isize;
    let kvw = shape.kv_width() as isize;
    let scale = S::one() / S::lit(hd as f64).sqrt();
    let plane = q_len * kv_len;
    for b in 0..batch {
        for h in 0..n_q {
            let kvh = h / shape.group();
            let p = &mut probs[(b * n_q + h) * plane..(b * n_q + h + 1) * plane];
            let q_ptr = q[(b * q_len) * qw as usize + h * hd..].as_ptr();
            let k_ptr = k[(b * kv_len) * kvw as usize + kvh * hd..].as_ptr();
            let v_ptr = v[(b * kv_len) * kvw as usize + kvh * hd..].as_ptr();
            // SAFETY: pointers are offset into live slices; strides walk rows
            // of the documented widths and stay within each (b, h) block.
            unsafe {
                S::gemm_raw(
                    q_len, hd, kv_len, scale, q_ptr, qw, 1, k_ptr, 1, kvw, S::zero(),
                    p.as_mut_ptr(), kv_len as isize, 1,
                );
            }
            for i in 0..q_len {
                let row = &mut p[i * kv_len..(i + 1) * kv_len];
                let vis = shape.visible(i);
                let mut max = S::neg_infinity();
                for &s in &row[..vis] {
                    if !s.is_finite() {
                        return Err(Error::NonFinite("attention logits"));
                    }
                    max = max.max(s);
                }
                let mut sum = S::zero();
                for s in &mut row[..vis] {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in &mut row[..vis] {
                    *s = *s / sum;
                }
                for s in &mut row[vis..] {
                    *s = S::zero();
                }
            }
            let o_ptr = out[(b * q_len) * qw as usize + h * hd..].as_mut_ptr();
            // SAFETY: as above; output rows have width `qw`.
            unsafe {
                S::gemm_raw(
                    q_len, kv_len, hd, S::one(), p.as_ptr(), kv_len as isize, 1, v_ptr, kvw, 1,
                    S::zero(), o_ptr, qw, 1,
                );
            }
        }
    }
    Ok(())
}

/// Accumulates gradients into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<S: Scalar>(
    shape: &AttnShape,
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dout: &[S],
    dq: &mut [S],
    dk: &mut [S],
    dv: &mut [S],
) {
    let AttnShape { batch, q_len, kv_len, n_q, head_dim: hd, .. } = *shape;
    let qw = shape.q_width();
    let kvw = shape.kv_width();
    let scale = S::one() / S::lit(hd as f64).sqrt();
    let plane = q_len * kv_len;
    let mut dp = vec![S::zero(); plane];
    for b in 0..batch {
        for h in 0..n_q {
            let kvh = h / shape.group();
            let p = &probs[(b * n_q + h) * plane..(b * n_q + h + 1) * plane];
            let q_off = (b * q_len) * qw + h * hd;
            let kv_off = (b * kv_len) * kvw + kvh * hd;
            // SAFETY (all gemm calls below): offsets index live slices and the
            // strides walk `q_len`/`kv_len` rows of widths `qw`/`kvw`.
            unsafe {
                // dP = dO · Vᵀ
                S::gemm_raw(
                    q_len, hd, kv_len, S::one(), dout[q_off..].as_ptr(), qw as isize, 1,
                    v[kv_off..].as_ptr(), 1, kvw as isize, S::zero(), dp.as_mut_ptr(),
                    kv_len as isize, 1,
                );
                // dV += Pᵀ · dO
                S::gemm_raw(
                    kv_len, q_len, hd, S::one(), p.as_ptr(), 1, kv_len as isize,
                    dout[q_off..].as_ptr(), qw as isize, 1, S::one(),
                    dv[kv_off..].as_mut_ptr(), kvw as isize, 1,
                );
            }
            // dS = P ⊙ (dP − rowsum(P ⊙ dP)), folded with the score scale.
            for i in 0..q_len {
                let pr = &p[i * kv_len..(i + 1) * kv_len];
                let dr = &mut dp[i * kv_len..(i + 1) * kv_len];
                let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pp) in dr.iter_mut().zip(pr) {
                    *d = pp * (*d - dot) * scale;
                }
            }
            unsafe {
                // dQ += dS · K
                S::gemm_raw(
                    q_len, kv_len, hd, S::one(), dp.as_ptr(), kv_len as isize, 1,
                    k[kv_off..].as_ptr(), kvw as isize, 1, S::one(),
                    dq[q_off..].as_mut_ptr(), qw as isize, 1,
                );
                // dK += dSᵀ · Q
                S::gemm_raw(
                    kv_len, q_len, hd, S::one(), dp.as_ptr(), 1, kv_len as isize,
                    q[q_off..].as_ptr(), qw as isize, 1, S::one(),
                    dk[kv_off..].as_mut_ptr(), kvw as isize, 1,
                );
            }
        }
    }
}

/// Row-wise log-sum-exp.
pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let lse = log_sum_exp(row);
    for x in row.iter_mut() {
        *x = (*x - lse).exp();
    }
}

/// Numerically stable `log σ(x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0]; // stored 3×2
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3×2
        let bt = [1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0]; // stored 2×3
        let mut c1 = [0.0; 4];
        let mut c2 = [0.0; 4];
        matmul(&a, false, &b, false, &mut c1, 2, 3, 2, 0.0);
        matmul(&at, true, &bt, true, &mut c2, 2, 3, 2, 0.0);
        assert_eq!(c1, [4.0, 5.0, 10.0, 11.0]);
        assert_eq!(c1, c2);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
    }
}
