#![allow(dead_code)]

pub mod checks;

use free_transformer::model::{FreeTransformer, ModelConfig, Variant};
use free_transformer::rng::{stream, Stream};
use free_transformer::tensor::Scalar;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 2,
        d_model: 8,
        n_q_heads: 2,
        n_kv_heads: 1,
        vocab_size: 5,
        latent_bits: 2,
        max_seq_len: 16,
        kappa: 0.05,
        weight_tying: false,
    }
}

pub fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 4,
        d_model: 32,
        n_q_heads: 4,
        n_kv_heads: 2,
        vocab_size: 30,
        latent_bits: 4,
        max_seq_len: 48,
        kappa: std::f64::consts::LN_2,
        weight_tying: false,
    }
}

/// Model with every tensor drawn from `N(0, std²)`, gains near one.
pub fn random_model<S: Scalar>(config: ModelConfig, seed: u64, std: f64) -> FreeTransformer<S> {
    let mut rng = stream(seed, Stream::Init);
    let mut m = FreeTransformer::init(config, &mut rng).unwrap();
    let normal = Normal::new(0.0, std).unwrap();
    for (name, t) in m.params_mut().named_mut() {
        let gain = name.ends_with("norm");
        for v in t.data_mut() {
            let x = normal.sample(&mut rng);
            *v = S::lit(if gain { 1.0 + 0.5 * x } else { x });
        }
    }
    m
}

pub fn random_tokens(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

pub fn max_abs_diff<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).abs()).fold(0.0, f64::max)
}
