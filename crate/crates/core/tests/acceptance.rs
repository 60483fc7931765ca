//! One pass/fail line per acceptance criterion.
//!
//! Criteria 6 to 8 train several toy models and take on the order of hours
//! on one core. They run only when asked:
//!
//! ```text
//! cargo test --release -p free-transformer --test acceptance -- --include-ignored
//! ```
//!
//! Trained runs are cached under the cargo target tmp dir and reused.

mod common;

use std::f64::consts::LN_2;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::checks;
use free_transformer::checkpoint::Checkpoint;
use free_transformer::cli;
use free_transformer::data::{CharVocab, DataSource};
use free_transformer::encoder::kl_per_token;
use free_transformer::mapper::{g_table, BitLogits};
use free_transformer::model::{FreeTransformer, ModelConfig, Variant};
use free_transformer::oracle;
use free_transformer::rng::{stream, Stream};
use free_transformer::sample::{self, eval_model, GroupReport, ZMode};
use free_transformer::tensor::Tensor;
use free_transformer::train::{self, detect_collapse, late_mean_kl, StepMetrics, TrainConfig, Trainer};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- light

fn c1_gradients() -> Outcome {
    let ops = checks::all_ops();
    let (worst_name, worst) = ops.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let full = checks::full_model_relative_error();
    let pass = worst < 1e-5 && full < 1e-4;
    outcome(pass, format!("{} op checks, worst {worst:.2e} ({worst_name}) < 1e-5; full loss {full:.2e} < 1e-4", ops.len()))
}

/// KL(Q ‖ uniform) by summing over every code of the factorized `Q`.
fn kl_enumerated(row: &[f64]) -> f64 {
    let h = row.len();
    g_table(row, h).iter().filter(|&&q| q > 0.0).map(|&q| q * (q.ln() + h as f64 * LN_2)).sum()
}

fn c2_kl() -> Outcome {
    let mut rng = stream(2, Stream::Init);
    let (mut worst, mut violations) = (0.0f64, 0);
    for m in 0..1000 {
        let bits = 1 + m % 8;
        let rows = rng.random_range(1..6);
        let scale = [0.1, 1.0, 5.0, 20.0][m % 4];
        let data: Vec<f64> = (0..rows * bits).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let logits = BitLogits::new(Tensor::new(vec![rows, bits], data.clone()).unwrap()).unwrap();
        for (r, &k) in kl_per_token(&logits).iter().enumerate() {
            if !(0.0..=bits as f64 * LN_2).contains(&k) {
                violations += 1;
            }
            worst = worst.max((k - kl_enumerated(&data[r * bits..(r + 1) * bits])).abs());
        }
    }
    outcome(worst < 1e-9 && violations == 0, format!("1000 matrices, H 1..=8: max |factorized - enumerated| {worst:.2e}, bound violations {violations}"))
}

/// Mixture over the two coin biases, summed in log space.
fn posterior_by_enumeration(prefix: &[u8], eps: f64) -> f64 {
    let log_joint = |z: u8| {
        prefix.iter().map(|&x| if (x == 1) == (z == 1) { (1.0 - eps).ln() } else { eps.ln() }).sum::<f64>()
    };
    let (l0, l1) = (log_joint(0), log_joint(1));
    let m = l0.max(l1);
    let (w0, w1) = ((l0 - m).exp(), (l1 - m).exp());
    (w0 * eps + w1 * (1.0 - eps)) / (w0 + w1)
}

fn c3_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for eps in [0.05, 0.1, 0.2, 0.4] {
        for len in 0..=12usize {
            for code in 0..1u32 << len {
                let prefix: Vec<u8> = (0..len).map(|i| ((code >> i) & 1) as u8).collect();
                let ones = prefix.iter().filter(|&&x| x == 1).count();
                let closed = oracle::posterior_closed_form(ones, len, eps);
                let auto = oracle::autoregressive_posterior(&prefix, eps).unwrap();
                let enumerated = posterior_by_enumeration(&prefix, eps);
                worst = worst.max((closed - enumerated).abs()).max((auto - enumerated).abs());
                checked += 1;
            }
        }
    }
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let args = ["free-transformer", "oracle", "--epsilon", "0.2", "--prefix", "11"];
    let code = cli::run(args, &mut out, &mut err);
    let printed = String::from_utf8_lossy(&out).lines().next().unwrap_or_default().trim().to_string();
    let pass = worst < 1e-12 && code == 0 && printed == "0.764706";
    outcome(pass, format!("{checked} prefixes, max error {worst:.2e} < 1e-12; CLI printed {printed:?}"))
}

fn c4_zero_injection() -> Outcome {
    let gap = (0..4).map(|s| checks::zero_injection_gap(40 + s)).fold(0.0, f64::max);
    outcome(gap < 1e-5, format!("max |logit diff| over train/prefill/generate {gap:.2e} < 1e-5"))
}

fn c5_prefill() -> Outcome {
    let gap = checks::prefill_recompute_gap(100, 5);
    outcome(gap < 1e-5, format!("100 prompts, max |logit diff| {gap:.2e} < 1e-5"))
}

fn c9_determinism() -> Outcome {
    let cfg = ModelConfig { max_seq_len: 67, vocab_size: 30, ..common::tiny_config(Variant::Free) };
    let tc = TrainConfig { steps: 10, batch_size: 4, warmup: 2, lr: 3e-3, seed: 9, eval_interval: 4, eval_batches: 1, ..TrainConfig::default() };
    let det = |m: &[StepMetrics]| m.iter().map(StepMetrics::deterministic).collect::<Vec<_>>();
    let a = train::train(cfg.clone(), tc.clone(), DataSource::default(), None).unwrap();
    let b = train::train(cfg.clone(), tc.clone(), DataSource::default(), None).unwrap();
    let identical = det(&a.metrics) == det(&b.metrics) && a.model == b.model;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let mut first = Trainer::new(cfg, tc, DataSource::default()).unwrap();
    let mut metrics = Vec::new();
    first.run(6, None, |m| Ok(metrics.push(m.clone()))).unwrap();
    first.checkpoint().save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    resumed.run(10, None, |m| Ok(metrics.push(m.clone()))).unwrap();
    let resumes = det(&metrics) == det(&a.metrics) && resumed.model() == &a.model;
    outcome(identical && resumes, format!("rerun bit-identical: {identical}; save at step 6 then resume matches unbroken run: {resumes}"))
}

/// Scalars in one block, counted from the geometry.
fn block_scalars(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let hd = d / cfg.n_q_heads;
    let hidden = (8 * d).div_ceil(3).div_ceil(8) * 8;
    2 * d + d * cfg.n_q_heads * hd * 2 + 2 * d * cfg.n_kv_heads * hd + 3 * d * hidden
}

fn c10_overhead() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for cfg in [ModelConfig::toy(30), ModelConfig { latent_bits: 4, ..common::small_config(Variant::Free) }] {
        let free = FreeTransformer::<f32>::init(cfg.clone(), &mut stream(1, Stream::Init)).unwrap();
        let base = FreeTransformer::<f32>::init(cfg.clone().with_variant(Variant::Baseline), &mut stream(1, Stream::Init)).unwrap();
        let (d, h) = (cfg.d_model, cfg.latent_bits);
        let expected = block_scalars(&cfg) + d + d * h + (1 << h) * d;
        let diff = free.param_count() - base.param_count();
        pass &= diff == expected && free.latent_overhead() == expected;
        lines.push(format!("D={d} H={h}: difference {diff}, expected {expected}"));
    }
    outcome(pass, lines.join("; "))
}

// ---------------------------------------------------------------- heavy

fn runs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-runs")
}

struct Run {
    name: String,
    kappa: f64,
    model: FreeTransformer<f32>,
    metrics: Vec<StepMetrics>,
    data: DataSource,
}

/// Trains (or reloads a finished run of) the toy model.
fn run(name: &str, cfg: ModelConfig, tc: TrainConfig, data: DataSource) -> Run {
    let dir = runs_dir().join(name);
    let kappa = cfg.kappa;
    let ck = train::checkpoint_path(&dir);
    if let Ok(c) = Checkpoint::load(&ck) {
        let done = c.meta.get("step").and_then(|s| s.as_u64()) == Some(tc.steps);
        if done && c.config == cfg && c.meta.get("train") == serde_json::to_value(&tc).ok().as_ref() {
            let metrics = train::read_metrics(&dir.join("metrics.jsonl")).unwrap();
            eprintln!("reusing {}", dir.display());
            return Run { name: name.into(), kappa, model: c.model().unwrap(), metrics, data };
        }
    }
    let t0 = Instant::now();
    eprintln!("training {name} ({} steps)", tc.steps);
    let out = train::train(cfg, tc, data.clone(), Some(&dir)).unwrap();
    eprintln!("trained {name} in {:.0}s", t0.elapsed().as_secs_f64());
    Run { name: name.into(), kappa, model: out.model, metrics: out.metrics, data }
}

fn coin_data() -> DataSource {
    DataSource::CoinFlip { epsilon: 0.2, len: 64 }
}

fn coin_runs() -> (Run, Run) {
    let tc = TrainConfig { steps: 3000, batch_size: 32, lr: 1e-3, warmup: 200, seed: 6, ..TrainConfig::default() };
    let base = run("coin-baseline", ModelConfig::toy(3).with_variant(Variant::Baseline), tc.clone(), coin_data());
    let free = run("coin-free", ModelConfig { kappa: LN_2, ..ModelConfig::toy(3) }, tc, coin_data());
    (base, free)
}

fn fig4_runs() -> Vec<Run> {
    let tc = TrainConfig { steps: 4000, batch_size: 32, lr: 1e-3, warmup: 200, seed: 7, ..TrainConfig::default() };
    sample::fig4_kappas()
        .iter()
        .enumerate()
        .map(|(i, &kappa)| run(&format!("fig4-{i}"), ModelConfig { kappa, ..ModelConfig::toy(30) }, tc.clone(), DataSource::default()))
        .collect()
}

fn c6_coin(base: &Run, free: &Run) -> Outcome {
    let b = eval_model(&base.model, &base.data, 16, 64, 66).unwrap();
    let f = eval_model(&free.model, &free.data, 16, 64, 66).unwrap();
    let latent = oracle::latent_ce_floor(0.2) + LN_2 / 64.0;
    let base_ok = (b.ce - b.process_floor).abs() <= 0.03;
    let free_ok = f.ce < b.ce && (f.ce - latent).abs() <= 0.05;
    outcome(
        base_ok && free_ok,
        format!(
            "baseline ce {:.4} vs process floor {:.4} (|gap| {:.4} <= 0.03: {base_ok}); free ce {:.4} vs latent target {latent:.4} (|gap| {:.4} <= 0.05, below baseline: {}); free KL {:.4}, prior-Z ce {:.4}",
            b.ce,
            b.process_floor,
            (b.ce - b.process_floor).abs(),
            f.ce,
            (f.ce - latent).abs(),
            f.ce < b.ce,
            f.kl,
            f.prior_ce
        ),
    )
}

const SPREAD_GROUPS: u64 = 8;
const SPREAD_SIZE: usize = 10;

struct Spread {
    independent: GroupReport,
    shared: Vec<GroupReport>,
}

fn spread(model: &FreeTransformer<f32>, seed: u64) -> Spread {
    let vocab = CharVocab::synth();
    let mut rng = stream(seed, Stream::Data);
    let prompt = format!("{}>", (b'A' + rng.random_range(0..26u8)) as char);
    let independent = sample::sample_group(model, &vocab, &prompt, SPREAD_SIZE * 2, &ZMode::Independent, 1.0, seed, seed).unwrap();
    let shared = (1..=SPREAD_GROUPS)
        .map(|g| sample::sample_group(model, &vocab, &prompt, SPREAD_SIZE, &ZMode::Shared, 1.0, seed + g, seed + g).unwrap())
        .collect();
    Spread { independent, shared }
}

fn variance(xs: &[f64]) -> Option<(f64, usize)> {
    (xs.len() >= 2).then(|| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64, xs.len() - 1)
    })
}

/// Two-sided F test of the pooled within-shared-group variance against the
/// independent-group variance.
fn spread_p_value(s: &Spread) -> Option<f64> {
    let as_f = |g: &GroupReport| g.positions().iter().map(|&p| p as f64).collect::<Vec<_>>();
    let (vi, di) = variance(&as_f(&s.independent))?;
    let (mut ss, mut dof) = (0.0, 0usize);
    for g in &s.shared {
        if let Some((v, d)) = variance(&as_f(g)) {
            ss += v * d as f64;
            dof += d;
        }
    }
    if dof == 0 || vi == 0.0 {
        return None;
    }
    let vs = ss / dof as f64;
    let f = FisherSnedecor::new(dof as f64, di as f64).ok()?;
    let one_sided = f.cdf(vs / vi);
    Some(2.0 * one_sided.min(1.0 - one_sided))
}

fn c7_fig4(runs: &[Run]) -> Outcome {
    let s: Vec<Spread> = runs.iter().enumerate().map(|(i, r)| spread(&r.model, 700 + i as u64)).collect();
    let mut notes = Vec::new();

    let p = spread_p_value(&s[0]);
    let a = p.is_some_and(|p| p > 0.01);
    notes.push(format!("(a) κ=ln2/64 F-test p={}", p.map_or("n/a".into(), |p| format!("{p:.3}"))));

    let mut b = true;
    for i in [1, 2] {
        let shared_max = s[i].shared.iter().filter_map(|g| g.position_range).max();
        let indep = s[i].independent.position_range;
        b &= s[i].shared.iter().all(|g| g.position_range.is_some_and(|r| r <= 2)) && indep.is_some_and(|r| r >= 20);
        let mut ranges: Vec<usize> = s[i].shared.iter().filter_map(|g| g.position_range).collect();
        ranges.sort_unstable();
        let median = ranges.get(ranges.len() / 2);
        notes.push(format!(
            "(b) {}: shared max range {:?} (median {:?}), independent range {:?}",
            runs[i].name, shared_max, median, indep
        ));
    }

    let wf_high = s[3].independent.well_formed_fraction;
    let wf_mid = s[2].independent.well_formed_fraction;
    let floor = runs[3].data.entropy_floor();
    let collapsed = detect_collapse(&runs[3].metrics, floor);
    let c = wf_high < 0.5 && wf_mid > 0.9 && collapsed;
    notes.push(format!("(c) well-formed κ=8ln2 {wf_high:.2}, κ=ln2 {wf_mid:.2}, collapse flagged {collapsed}"));

    let panels: Vec<_> = runs.iter().map(|r| (r.kappa, &r.model)).collect();
    if let Ok(p) = sample::fig4_experiment(&panels, 4, sample::GROUP_SIZE, 1.0) {
        let text = sample::render_fig4(&p);
        let _ = std::fs::write(runs_dir().join("fig4.txt"), text);
    }
    outcome(a && b && c, notes.join("; "))
}

fn c8_free_bits(runs: &[&Run]) -> Outcome {
    let mut pass = true;
    let notes: Vec<String> = runs
        .iter()
        .map(|r| {
            let kl = late_mean_kl(&r.metrics);
            let ok = kl <= 1.1 * r.kappa;
            pass &= ok;
            format!("{} KL {kl:.4} vs 1.1κ {:.4}", r.name, 1.1 * r.kappa)
        })
        .collect();
    outcome(pass, notes.join("; "))
}

fn report(n: usize, title: &str, o: &Outcome) -> bool {
    println!("[{}] {n:>2} {title}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let heavy = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let mut ok = true;
    ok &= report(1, "gradient correctness", &c1_gradients());
    ok &= report(2, "KL factorization", &c2_kl());
    ok &= report(3, "oracle agreement", &c3_oracle());
    ok &= report(4, "zero-injection reduction", &c4_zero_injection());
    ok &= report(5, "prefill equivalence", &c5_prefill());
    if heavy {
        let (base, free) = coin_runs();
        ok &= report(6, "coin-flip learning", &c6_coin(&base, &free));
        let fig4 = fig4_runs();
        ok &= report(7, "latent sweep behaviour", &c7_fig4(&fig4));
        let mut all: Vec<&Run> = fig4.iter().collect();
        all.push(&free);
        ok &= report(8, "free-bits containment", &c8_free_bits(&all));
    } else {
        for (n, title) in [(6, "coin-flip learning"), (7, "latent sweep behaviour"), (8, "free-bits containment")] {
            println!("[SKIP] {n:>2} {title}: trains toy models; rerun with --release and -- --include-ignored");
        }
    }
    ok &= report(9, "determinism and resume", &c9_determinism());
    ok &= report(10, "overhead accounting", &c10_overhead());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
