//! Exact probabilities for the latent coin-flip process: `Z ~ B(0.5)` and
//! `X_t` equal to `Z` with independent flips of probability `ε`.
//!
//! Convention: `P(X_t = 1 | Z = 1) = 1 − ε`. Swapping the labels of `Z`
//! gives the same marginal law over `X`, so posteriors and entropy floors
//! do not depend on this choice.

use crate::error::{Error, Result};

pub fn check_epsilon(epsilon: f64) -> Result<()> {
    if (0.0..=0.5).contains(&epsilon) {
        Ok(())
    } else {
        Err(Error::Config(format!("flip probability must lie in [0, 1/2], got {epsilon}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoinFlipProcess {
    pub epsilon: f64,
}

impl CoinFlipProcess {
    pub fn new(epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(Self { epsilon })
    }

    pub fn posterior(&self, prefix: &[u8]) -> Result<f64> {
        autoregressive_posterior(prefix, self.epsilon)
    }

    pub fn process_floor(&self, len: usize) -> f64 {
        process_ce_floor(self.epsilon, len)
    }

    pub fn latent_floor(&self) -> f64 {
        latent_ce_floor(self.epsilon)
    }
}

/// `P(X = 1 | Z = z)`.
pub fn cond_prob_latent(z: u8, epsilon: f64) -> f64 {
    if z == 1 {
        1.0 - epsilon
    } else {
        epsilon
    }
}

fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `n log p`, with `0 log 0 = 0`.
fn count_log(n: usize, p: f64) -> f64 {
    if n == 0 {
        0.0
    } else {
        n as f64 * ln_or_neg_inf(p)
    }
}

/// `P(X_{t+1} = 1 | x_1..x_t)` by summing over both values of `Z`.
pub fn autoregressive_posterior(prefix: &[u8], epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    let ones = prefix.iter().filter(|&&x| x == 1).count();
    let zeros = prefix.len() - ones;
    // log P(Z = z) + Σ_s log P(x_s | z)
    let joint = |z: u8| {
        let p1 = cond_prob_latent(z, epsilon);
        0.5f64.ln() + count_log(ones, p1) + count_log(zeros, 1.0 - p1)
    };
    let (j0, j1) = (joint(0), joint(1));
    let evidence = log_add(j0, j1);
    if evidence == f64::NEG_INFINITY {
        return Err(Error::ZeroProbability(format!(
            "prefix with {ones} ones and {zeros} zeros at ε = {epsilon}"
        )));
    }
    let num = log_add(
        j0 + ln_or_neg_inf(cond_prob_latent(0, epsilon)),
        j1 + ln_or_neg_inf(cond_prob_latent(1, epsilon)),
    );
    Ok((num - evidence).exp())
}

/// Closed form of the posterior as a function of the number of ones `ones`
/// among the first `t` values:
///
/// `(r^c (1−ε)^{t+1} + r^{−c} ε^{t+1}) / (r^c (1−ε)^t + r^{−c} ε^t)`,
/// `r = ε/(1−ε)`, evaluated at the zero count `c = t − ones`. Needs `0 < ε < 1`.
pub fn posterior_closed_form(ones: usize, t: usize, epsilon: f64) -> f64 {
    assert!(ones <= t, "count of ones exceeds prefix length");
    let c = (t - ones) as f64;
    let t = t as f64;
    let lr = (epsilon / (1.0 - epsilon)).ln();
    let (le, l1e) = (epsilon.ln(), (1.0 - epsilon).ln());
    let num = log_add(c * lr + (t + 1.0) * l1e, -c * lr + (t + 1.0) * le);
    let den = log_add(c * lr + t * l1e, -c * lr + t * le);
    (num - den).exp()
}

/// `H_b(p)` in nats, with `0 log 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Per-token conditional entropy given `Z`: `H_b(ε)`.
pub fn latent_ce_floor(epsilon: f64) -> f64 {
    binary_entropy(epsilon)
}

/// `(1/T) Σ_t E[−log P(X_t | X_{<t})]` for the true autoregressive law,
/// by exact enumeration over the count of ones in each prefix.
pub fn process_ce_floor(epsilon: f64, len: usize) -> f64 {
    if len == 0 {
        return 0.0;
    }
    let mut ln_fact = vec![0.0f64; len + 1];
    for i in 1..=len {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let (le, l1e) = (ln_or_neg_inf(epsilon), ln_or_neg_inf(1.0 - epsilon));
    let mut total = 0.0;
    for t in 0..len {
        for ones in 0..=t {
            let zeros = t - ones;
            let ln_choose = ln_fact[t] - ln_fact[ones] - ln_fact[zeros];
            let prefix_given = |l_one: f64, l_zero: f64| {
                let a = if ones > 0 { ones as f64 * l_one } else { 0.0 };
                let b = if zeros > 0 { zeros as f64 * l_zero } else { 0.0 };
                a + b
            };
            let ln_p = 0.5f64.ln() + ln_choose + log_add(prefix_given(l1e, le), prefix_given(le, l1e));
            if ln_p == f64::NEG_INFINITY {
                continue;
            }
            let p_next = match autoregressive_posterior_counts(ones, zeros, epsilon) {
                Some(p) => p,
                None => continue,
            };
            total += ln_p.exp() * binary_entropy(p_next);
        }
    }
    total / len as f64
}

fn autoregressive_posterior_counts(ones: usize, zeros: usize, epsilon: f64) -> Option<f64> {
    let prefix: Vec<u8> = std::iter::repeat_n(1u8, ones).chain(std::iter::repeat_n(0u8, zeros)).collect();
    autoregressive_posterior(&prefix, epsilon).ok()
}
