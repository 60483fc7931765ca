//! Generation groups, the κ-sweep experiment, and held-out evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{well_formedness, CharVocab, DataSource, WellFormedness, SEQ_CHARS};
use crate::error::{Error, Result};
use crate::model::FreeTransformer;
use crate::oracle;
use crate::rng::{stream, substream, Stream, StreamRng};
use crate::tensor::Scalar;

/// Temperatures at or below this decode greedily.
pub const GREEDY_BELOW: f64 = 1e-6;

/// How latent codes are drawn across the sequences of a group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "codes")]
pub enum ZMode {
    /// A fresh latent stream per sequence.
    Independent,
    /// One latent stream, replayed for every sequence of the group.
    Shared,
    /// Caller-supplied codes, one per position.
    Pinned(Vec<usize>),
}

impl ZMode {
    pub fn name(&self) -> &'static str {
        match self {
            ZMode::Independent => "independent",
            ZMode::Shared => "shared",
            ZMode::Pinned(_) => "pinned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub mode: String,
    pub sequences: Vec<String>,
    pub reports: Vec<WellFormedness>,
    /// Codes per sequence (positions in token order, BOS first).
    pub latents: Vec<Vec<usize>>,
    pub valid: usize,
    pub invalid: usize,
    pub well_formed_fraction: f64,
    pub position_mean: Option<f64>,
    pub position_std: Option<f64>,
    pub position_range: Option<usize>,
}

impl GroupReport {
    /// Statistics recomputed from the text alone.
    pub fn from_sequences(mode: &str, sequences: Vec<String>, latents: Vec<Vec<usize>>) -> Self {
        let reports: Vec<WellFormedness> = sequences.iter().map(|s| well_formedness(s)).collect();
        let positions: Vec<f64> = reports.iter().filter_map(|r| r.target_pos).map(|p| p as f64).collect();
        let valid = positions.len();
        let n = sequences.len();
        let mean = (valid > 0).then(|| positions.iter().sum::<f64>() / valid as f64);
        let std = mean.map(|m| (positions.iter().map(|p| (p - m).powi(2)).sum::<f64>() / valid as f64).sqrt());
        let range = (valid > 0).then(|| {
            let lo = positions.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = positions.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (hi - lo) as usize
        });
        Self {
            mode: mode.to_string(),
            well_formed_fraction: if n == 0 { 0.0 } else { valid as f64 / n as f64 },
            valid,
            invalid: n - valid,
            position_mean: mean,
            position_std: std,
            position_range: range,
            sequences,
            reports,
            latents,
        }
    }

    pub fn positions(&self) -> Vec<usize> {
        self.reports.iter().filter_map(|r| r.target_pos).collect()
    }
}

/// Draws a token id from `logits / temperature`, never the BOS id.
pub fn sample_token<S: Scalar>(logits: &[S], temperature: f64, bos: usize, rng: &mut impl Rng) -> usize {
    let allowed = |i: usize| i != bos;
    if temperature <= GREEDY_BELOW {
        let mut best = usize::MAX;
        for (i, &v) in logits.iter().enumerate().filter(|&(i, _)| allowed(i)) {
            if best == usize::MAX || v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v.f64() / temperature).collect();
    let max = scaled
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> =
        scaled.iter().enumerate().map(|(i, &v)| if allowed(i) { (v - max).exp() } else { 0.0 }).collect();
    let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

/// Generates one sequence of `length` characters (prompt included).
pub fn generate<S: Scalar>(
    model: &FreeTransformer<S>,
    vocab: &CharVocab,
    prompt: &str,
    length: usize,
    temperature: f64,
    latent: &mut StreamRng,
    pinned: Option<&[usize]>,
    token_rng: &mut StreamRng,
) -> Result<(String, Vec<usize>)> {
    let mut tokens = vocab.tokenize(prompt)?;
    let prompt_chars = tokens.len() - 1;
    if prompt_chars == 0 || prompt_chars >= length {
        return Err(Error::Config(format!("prompt of {prompt_chars} characters for a {length}-character sequence")));
    }
    if length > model.config().max_seq_len {
        return Err(Error::CacheFull(model.config().max_seq_len));
    }
    let mut pre = match pinned {
        Some(codes) => {
            if codes.len() < length {
                return Err(Error::Config(format!("{} pinned codes for {length} positions", codes.len())));
            }
            model.prefill_with_latents(&tokens, &codes[..tokens.len()])?
        }
        None => model.forward_prefill(&tokens, latent)?,
    };
    let mut logits = pre.last_logits;
    while tokens.len() < length + 1 {
        let t = sample_token(&logits, temperature, vocab.bos(), token_rng);
        tokens.push(t);
        if tokens.len() == length + 1 {
            break;
        }
        logits = match pinned {
            Some(codes) => {
                let z = model.config().is_free().then(|| codes[pre.cache.len()]);
                model.generate_step_with_latent(t, &mut pre.cache, z)?
            }
            None => model.forward_generate_step(t, &mut pre.cache, latent)?,
        };
    }
    Ok((vocab.detokenize(&tokens)?, pre.cache.latents))
}

/// Samples `n` sequences of the synthetic length from one prompt.
#[allow(clippy::too_many_arguments)]
pub fn sample_group<S: Scalar>(
    model: &FreeTransformer<S>,
    vocab: &CharVocab,
    prompt: &str,
    n: usize,
    mode: &ZMode,
    temperature: f64,
    latent_seed: u64,
    token_seed: u64,
) -> Result<GroupReport> {
    sample_group_len(model, vocab, prompt, SEQ_CHARS, n, mode, temperature, latent_seed, token_seed)
}

#[allow(clippy::too_many_arguments)]
pub fn sample_group_len<S: Scalar>(
    model: &FreeTransformer<S>,
    vocab: &CharVocab,
    prompt: &str,
    length: usize,
    n: usize,
    mode: &ZMode,
    temperature: f64,
    latent_seed: u64,
    token_seed: u64,
) -> Result<GroupReport> {
    if n == 0 {
        return Err(Error::Empty("sample group"));
    }
    let shared = stream(latent_seed, Stream::Latent);
    let mut sequences = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for i in 0..n as u32 {
        let mut latent = match mode {
            ZMode::Independent => substream(latent_seed, Stream::Latent, i + 1),
            ZMode::Shared | ZMode::Pinned(_) => shared.clone(),
        };
        let mut tok = substream(token_seed, Stream::Token, i);
        let pinned = match mode {
            ZMode::Pinned(codes) => Some(codes.as_slice()),
            _ => None,
        };
        let (text, z) = generate(model, vocab, prompt, length, temperature, &mut latent, pinned, &mut tok)?;
        sequences.push(text);
        latents.push(z);
    }
    Ok(GroupReport::from_sequences(mode.name(), sequences, latents))
}

/// One κ column of the sweep: a blue (independent) group and two green
/// (shared) groups on the same prompt.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Fig4Panel {
    pub kappa: f64,
    pub prompt: String,
    pub blue: GroupReport,
    pub green: Vec<GroupReport>,
}

pub const GROUP_SIZE: usize = 5;

/// The four free-bits thresholds of the sweep, nats per token.
pub fn fig4_kappas() -> [f64; 4] {
    let ln2 = std::f64::consts::LN_2;
    [ln2 / 64.0, ln2 / 8.0, ln2, 8.0 * ln2]
}

/// Runs the sweep on trained models, each paired with its κ. One random
/// prompt is drawn per panel.
pub fn fig4_experiment<S: Scalar>(
    models: &[(f64, &FreeTransformer<S>)],
    seed: u64,
    group_size: usize,
    temperature: f64,
) -> Result<Vec<Fig4Panel>> {
    let vocab = CharVocab::synth();
    let mut prompt_rng = substream(seed, Stream::Data, 7);
    let mut panels = Vec::with_capacity(models.len());
    for (k, &(kappa, model)) in models.iter().enumerate() {
        let letter = (b'A' + prompt_rng.random_range(0..26u8)) as char;
        let prompt = format!("{letter}>");
        let base = seed.wrapping_add(1000 * k as u64);
        let blue = sample_group(model, &vocab, &prompt, group_size, &ZMode::Independent, temperature, base, base)?;
        let green = (1..=2)
            .map(|g| sample_group(model, &vocab, &prompt, group_size, &ZMode::Shared, temperature, base + g, base + g))
            .collect::<Result<Vec<_>>>()?;
        panels.push(Fig4Panel { kappa, prompt, blue, green });
    }
    Ok(panels)
}

fn describe_kappa(kappa: f64) -> String {
    let bits = kappa / std::f64::consts::LN_2;
    if bits >= 1.0 {
        format!("κ = {bits} bit{}", if bits == 1.0 { "" } else { "s" })
    } else {
        format!("κ = 1/{} bit", (1.0 / bits).round())
    }
}

/// Plain-text rendering: sequences one per line, groups separated by a
/// blank line.
pub fn render_group(g: &GroupReport) -> String {
    let mut s = String::new();
    for line in &g.sequences {
        s.push_str(line);
        s.push('\n');
    }
    s
}

pub fn render_fig4(panels: &[Fig4Panel]) -> String {
    let mut out = String::new();
    for p in panels {
        out.push_str(&format!("# {} ({:.6} nats/token), prompt {}\n", describe_kappa(p.kappa), p.kappa, p.prompt));
        out.push_str("# independent Z\n");
        out.push_str(&render_group(&p.blue));
        for (i, g) in p.green.iter().enumerate() {
            out.push_str(&format!("# shared Z, group {}\n", i + 1));
            out.push_str(&render_group(g));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Held-out ce, nats/token; latents from the encoder for the free variant.
    pub ce: f64,
    /// Held-out ce with latents from the uniform prior.
    pub prior_ce: f64,
    pub kl: f64,
    /// Entropy rate of the data without latent access.
    pub process_floor: f64,
    pub gap_to_process_floor: f64,
    /// Coin-flip only: `H_b(ε)`.
    pub latent_floor: Option<f64>,
    pub gap_to_latent_floor: Option<f64>,
}

/// Evaluates on fresh held-out sequences drawn from `seed`'s data stream.
pub fn eval_model<S: Scalar>(
    model: &FreeTransformer<S>,
    data: &DataSource,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_batches == 0 || batch_size == 0 {
        return Err(Error::Empty("evaluation batches"));
    }
    let mut data_rng = substream(seed, Stream::Data, 2);
    let mut latent_rng = substream(seed, Stream::Latent, 2);
    let (mut ce, mut prior, mut kl) = (0.0, 0.0, 0.0);
    for _ in 0..n_batches {
        let b = data.sample_batch(&mut data_rng, batch_size)?;
        let parts = model.loss(&b, &mut latent_rng)?;
        ce += parts.ce;
        kl += parts.kl;
        prior += model.prior_ce(&b, &mut latent_rng)?;
    }
    let n = n_batches as f64;
    let (ce, prior_ce, kl) = (ce / n, prior / n, kl / n);
    let process_floor = data.entropy_floor();
    let latent_floor = match *data {
        DataSource::CoinFlip { epsilon, .. } => Some(oracle::latent_ce_floor(epsilon)),
        DataSource::Synth { .. } => None,
    };
    Ok(EvalReport {
        ce,
        prior_ce,
        kl,
        process_floor,
        gap_to_process_floor: ce - process_floor,
        latent_floor,
        gap_to_latent_floor: latent_floor.map(|f| ce - f),
    })
}
