//! Measurements shared by the focused test files and the acceptance report.
//! Each returns the worst observed error; callers decide the tolerance.

use super::{max_abs_diff, random_model, random_tokens, small_config, tiny_config};
use free_transformer::data::TokenBatch;
use free_transformer::kernels::AttnShape;
use free_transformer::mapper::{self, BitLogits};
use free_transformer::model::{FreeTransformer, Variant};
use free_transformer::nn::{self, grad_check, relative_error, BlockGeometry, BlockParams, SeqLayout};
use free_transformer::rng::{stream, substream, Stream};
use free_transformer::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const H: f64 = 1e-5;

pub type Named = Vec<(String, f64)>;

pub fn randn(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, Stream::Init);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn probe(n: usize, seed: u64) -> Vec<f64> {
    randn(vec![n], seed).into_data()
}

pub fn matmul() -> Named {
    let w = randn(vec![4, 3], 1);
    let wt = randn(vec![3, 4], 2);
    let x = randn(vec![5, 4], 3);
    let p = probe(15, 4);
    let mut out = Vec::new();
    for trans in [false, true] {
        let w = if trans { wt.clone() } else { w.clone() };
        let ex = grad_check(
            |t, v| {
                let wv = t.leaf(&w);
                let y = t.matmul(v, wv, trans)?;
                t.weighted_sum(y, &p)
            },
            &x,
            H,
        )
        .unwrap();
        let ew = grad_check(
            |t, v| {
                let xv = t.leaf(&x);
                let y = t.matmul(xv, v, trans)?;
                t.weighted_sum(y, &p)
            },
            &w,
            H,
        )
        .unwrap();
        out.push((format!("matmul(trans={trans}) d/dx"), ex));
        out.push((format!("matmul(trans={trans}) d/dw"), ew));
    }
    out
}

pub fn rms_norm() -> Named {
    let x = randn(vec![3, 6], 5);
    let g = randn(vec![6], 6);
    let p = probe(18, 7);
    let ex = grad_check(
        |t, v| {
            let gv = t.leaf(&g);
            let y = t.rms_norm(v, Some(gv), 1e-5)?;
            t.weighted_sum(y, &p)
        },
        &x,
        H,
    )
    .unwrap();
    let eg = grad_check(
        |t, v| {
            let xv = t.leaf(&x);
            let y = t.rms_norm(xv, Some(v), 1e-5)?;
            t.weighted_sum(y, &p)
        },
        &g,
        H,
    )
    .unwrap();
    let en = grad_check(
        |t, v| {
            let y = t.rms_norm(v, None, 1e-5)?;
            t.weighted_sum(y, &p)
        },
        &x,
        H,
    )
    .unwrap();
    vec![("rms_norm d/dx".into(), ex), ("rms_norm d/dgain".into(), eg), ("rms_norm gainless".into(), en)]
}

pub fn rope_add_broadcast_embedding() -> Named {
    let x = randn(vec![4, 8], 8);
    let p = probe(32, 9);
    let rope = grad_check(
        |t, v| {
            let y = t.rope(v, 2, 4, &[0, 1, 2, 7])?;
            t.weighted_sum(y, &p)
        },
        &x,
        H,
    )
    .unwrap();
    let row = randn(vec![1, 8], 10);
    let add = grad_check(
        |t, v| {
            let b = t.broadcast_rows(v, 4)?;
            let xv = t.leaf(&x);
            let s = t.add(b, xv)?;
            let s2 = t.add(s, s)?;
            t.weighted_sum(s2, &p)
        },
        &row,
        H,
    )
    .unwrap();
    let table = randn(vec![5, 8], 11);
    let emb = grad_check(
        |t, v| {
            let y = t.embedding(v, &[3, 0, 3, 4])?;
            t.weighted_sum(y, &p)
        },
        &table,
        H,
    )
    .unwrap();
    vec![("rope".into(), rope), ("add+broadcast".into(), add), ("embedding".into(), emb)]
}

pub fn attention() -> Named {
    let (b, len, nq, nkv, hd) = (2, 5, 4, 2, 3);
    let mut out = Vec::new();
    for (causal, seed) in [(true, 20), (false, 30)] {
        let shape = AttnShape { batch: b, q_len: len, kv_len: len, n_q: nq, n_kv: nkv, head_dim: hd, causal, q_offset: 0 };
        let q = randn(vec![b * len, nq * hd], seed);
        let k = randn(vec![b * len, nkv * hd], seed + 1);
        let v = randn(vec![b * len, nkv * hd], seed + 2);
        let p = probe(b * len * nq * hd, seed + 3);
        for (which, name) in ["q", "k", "v"].into_iter().enumerate() {
            let target = [&q, &k, &v][which].clone();
            let e = grad_check(
                |t, x| {
                    let mut vars = [t.leaf(&q), t.leaf(&k), t.leaf(&v)];
                    vars[which] = x;
                    let y = t.attention(vars[0], vars[1], vars[2], shape)?;
                    t.weighted_sum(y, &p)
                },
                &target,
                H,
            )
            .unwrap();
            out.push((format!("attention(causal={causal}) d/d{name}"), e));
        }
    }
    out
}

pub fn silu_mul_and_cross_entropy() -> Named {
    let gate = randn(vec![3, 4], 40);
    let up = randn(vec![3, 4], 41);
    let p = probe(12, 42);
    let eg = grad_check(
        |t, v| {
            let u = t.leaf(&up);
            let y = t.silu_mul(v, u)?;
            t.weighted_sum(y, &p)
        },
        &gate,
        H,
    )
    .unwrap();
    let eu = grad_check(
        |t, v| {
            let g = t.leaf(&gate);
            let y = t.silu_mul(g, v)?;
            t.weighted_sum(y, &p)
        },
        &up,
        H,
    )
    .unwrap();
    let logits = randn(vec![4, 6], 43);
    let ce = grad_check(|t, v| t.cross_entropy(v, &[0, 5, 2, 2]), &logits, H).unwrap();
    vec![("silu_mul d/dgate".into(), eg), ("silu_mul d/dup".into(), eu), ("cross_entropy".into(), ce)]
}

pub fn kl_and_free_bits() -> Named {
    let logits = randn(vec![6, 3], 50);
    let p = probe(6, 51);
    let kl = grad_check(
        |t, v| {
            let kl = t.kl_per_token(v)?;
            t.weighted_sum(kl, &p)
        },
        &logits,
        H,
    )
    .unwrap();
    let fb = grad_check(
        |t, v| {
            let kl = t.kl_per_token(v)?;
            t.free_bits(kl, 0.3)
        },
        &logits,
        H,
    )
    .unwrap();
    vec![("kl_per_token".into(), kl), ("free_bits".into(), fb)]
}

/// The mapper's backward against finite differences of `G`.
pub fn binary_mapper() -> Named {
    let mut rng = stream(60, Stream::Init);
    (1..=6)
        .map(|bits| {
            let logits = BitLogits::new(randn(vec![4, bits], 61 + bits as u64)).unwrap();
            let sampled = mapper::sample_bits(&logits, &mut rng);
            let w: Vec<f64> = (0..4 << bits).map(|_| rng.random_range(-1.0..1.0)).collect();
            (format!("binary_mapper H={bits}"), mapper::grad_of_g_check(&logits, &sampled, &w, H).unwrap())
        })
        .collect()
}

pub fn block_with_separate_kv() -> Named {
    let geom = BlockGeometry::new(8, 4, 2).unwrap();
    let mut rng = stream(70, Stream::Init);
    let mut params: BlockParams<f64> = BlockParams::init(&geom, &mut rng);
    for (_, t) in params.named_mut() {
        for v in t.data_mut() {
            *v += 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
    let layout = SeqLayout { batch: 2, len: 3 };
    let x = randn(vec![6, 8], 71);
    let kv = randn(vec![6, 8], 72);
    let p = probe(48, 73);
    [(0, &x, "q input"), (1, &kv, "kv input")]
        .into_iter()
        .map(|(which, input, name)| {
            let e = grad_check(
                |t, v| {
                    let b = params.bind(t);
                    let (q_in, kv_in) = if which == 0 { (v, t.leaf(&kv)) } else { (t.leaf(&x), v) };
                    let o = nn::block_on_tape(t, &b, &geom, q_in, Some(kv_in), layout, true)?;
                    t.weighted_sum(o.out, &p)
                },
                input,
                H,
            )
            .unwrap();
            (format!("block {name}"), e)
        })
        .collect()
}

pub fn all_ops() -> Named {
    [matmul(), rms_norm(), rope_add_broadcast_embedding(), attention(), silu_mul_and_cross_entropy(), kl_and_free_bits(), binary_mapper(), block_with_separate_kv()]
        .concat()
}

/// Finite differences over every parameter of a small Free Transformer,
/// with the latent draws frozen by replaying the same stream. The loss is
/// evaluated through the surrogate mapper so the pass-through path is
/// visible to the differences.
pub fn full_model_relative_error() -> f64 {
    let mut model = random_model::<f64>(tiny_config(Variant::Free), 80, 0.4);
    let mut rng = stream(81, Stream::Data);
    let seqs: Vec<Vec<usize>> = (0..2).map(|_| random_tokens(&mut rng, 5, 6)).collect();
    let batch = TokenBatch::new(&seqs).unwrap();
    let latent = stream(82, Stream::Latent);
    let (parts, analytic) = model.loss_and_grads(&batch, &mut latent.clone()).unwrap();
    let mut anchor = None;
    let at_anchor = model.surrogate_loss(&batch, &mut latent.clone(), &mut anchor).unwrap();
    assert_eq!(at_anchor.total, parts.total);
    let mut numeric = Vec::new();
    let mut exact = Vec::new();
    let n_tensors = model.params().named().len();
    for ti in 0..n_tensors {
        let len = model.params().named()[ti].1.len();
        for i in 0..len {
            let bump = |m: &mut FreeTransformer<f64>, delta: f64| {
                m.params_mut().named_mut()[ti].1.data_mut()[i] += delta;
            };
            bump(&mut model, H);
            let fp = model.surrogate_loss(&batch, &mut latent.clone(), &mut anchor).unwrap().total;
            bump(&mut model, -2.0 * H);
            let fm = model.surrogate_loss(&batch, &mut latent.clone(), &mut anchor).unwrap().total;
            bump(&mut model, H);
            numeric.push((fp - fm) / (2.0 * H));
            exact.push(analytic[ti][i]);
        }
    }
    relative_error(&exact, &numeric)
}

fn zeroed_injection(seed: u64) -> (FreeTransformer<f32>, FreeTransformer<f32>) {
    let mut free = random_model::<f32>(small_config(Variant::Free), seed, 0.15);
    free.params_mut().post_sampler.as_mut().unwrap().data_mut().fill(0.0);
    let base = free.to_baseline();
    (free, base)
}

/// Largest deviation between the Free Transformer with a zero post-sampler
/// and the weight-shared baseline over train, prefill and generate modes.
pub fn zero_injection_gap(seed: u64) -> f64 {
    let (free, base) = zeroed_injection(seed);
    let mut rng = stream(seed, Stream::Data);
    let mut worst = 0.0f64;
    for trial in 0..5u32 {
        let len = rng.random_range(2..30);
        let tokens = random_tokens(&mut rng, 30, len);
        let full = base.forward_baseline(&tokens).unwrap();
        let train = free.forward_train(&tokens, &mut substream(seed, Stream::Latent, trial)).unwrap();
        worst = worst.max(max_abs_diff(train.logits.data(), full.data()));

        let split = rng.random_range(1..len);
        let mut lat = substream(seed, Stream::Latent, 100 + trial);
        let mut pf = free.forward_prefill(&tokens[..split], &mut lat).unwrap();
        let mut pb = base.forward_prefill(&tokens[..split], &mut lat).unwrap();
        worst = worst.max(max_abs_diff(&pf.last_logits, &pb.last_logits));
        worst = worst.max(max_abs_diff(&pf.last_logits, full.row(split - 1)));
        for (t, &tok) in tokens.iter().enumerate().skip(split) {
            let lf = free.forward_generate_step(tok, &mut pf.cache, &mut lat).unwrap();
            let lb = base.forward_generate_step(tok, &mut pb.cache, &mut lat).unwrap();
            worst = worst.max(max_abs_diff(&lf, &lb));
            worst = worst.max(max_abs_diff(&lf, full.row(t)));
        }
    }
    worst
}

/// Largest deviation between cached incremental logits and a full
/// recomputation with the same latent codes, over `prompts` random prompts.
pub fn prefill_recompute_gap(prompts: u32, seed: u64) -> f64 {
    let model = random_model::<f32>(small_config(Variant::Free), seed, 0.15);
    let mut rng = stream(seed, Stream::Data);
    let mut worst = 0.0f64;
    for i in 0..prompts {
        let prompt_len = rng.random_range(1..16);
        let extra = rng.random_range(1..16);
        let tokens = random_tokens(&mut rng, 30, prompt_len + extra);
        let mut lat = substream(seed, Stream::Latent, i);
        let mut pre = model.forward_prefill(&tokens[..prompt_len], &mut lat).unwrap();
        let mut step_logits = vec![pre.last_logits.clone()];
        for &tok in &tokens[prompt_len..tokens.len() - 1] {
            step_logits.push(model.forward_generate_step(tok, &mut pre.cache, &mut lat).unwrap());
        }
        let codes = pre.cache.latents.clone();
        assert_eq!(codes.len(), tokens.len() - 1);
        assert!(codes.iter().all(|&z| z < 16));
        let full = model.forward_with_latents(&tokens[..tokens.len() - 1], &codes).unwrap();
        for (k, logits) in step_logits.iter().enumerate() {
            worst = worst.max(max_abs_diff(logits, full.row(prompt_len - 1 + k)));
        }
    }
    worst
}
