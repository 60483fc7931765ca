//! Synthetic training data: the letter-target sequences, the latent
//! coin-flip process, and a character-level vocabulary.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle;

pub const BODY_LEN: usize = 64;
pub const TARGET_LEN: usize = 8;
pub const SEQ_CHARS: usize = BODY_LEN + 2;
pub const MAX_TARGET_POS: usize = BODY_LEN - TARGET_LEN;
pub const NOISE_PROB: f64 = 1.0 / 16.0;
/// Minimum surviving target letters for a body to count as well formed.
pub const MIN_TARGET_LETTERS: usize = 6;

const SYNTH_CHARSET: &str = "_!>ABCDEFGHIJKLMNOPQRSTUVWXYZ";
const COIN_CHARSET: &str = "01";

/// Character vocabulary with a trailing beginning-of-sequence id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
}

impl CharVocab {
    pub fn new(charset: &str) -> Self {
        Self { chars: charset.chars().collect() }
    }

    /// `'_'`, `'!'`, `'>'`, `A`–`Z`, then BOS.
    pub fn synth() -> Self {
        Self::new(SYNTH_CHARSET)
    }

    /// `'0'`, `'1'`, then BOS.
    pub fn coin() -> Self {
        Self::new(COIN_CHARSET)
    }

    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn bos(&self) -> usize {
        self.chars.len()
    }

    pub fn id(&self, c: char) -> Result<usize> {
        self.chars.iter().position(|&x| x == c).ok_or(Error::UnknownChar(c))
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }

    /// BOS followed by one id per character.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        std::iter::once(Ok(self.bos())).chain(text.chars().map(|c| self.id(c))).collect()
    }

    /// Inverse of [`tokenize`](Self::tokenize); BOS ids are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .filter(|&&id| id != self.bos())
            .map(|&id| {
                self.char_of(id).ok_or(Error::TokenOutOfRange { token: id, vocab: self.size() })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSequence {
    pub text: String,
    pub target_letter: char,
    pub target_pos: usize,
}

/// Draws one 66-character sequence: prompt `L>` then a 64-character body of
/// underscores holding one run of eight `L`s, with each body character
/// replaced by `'!'` with probability `noise`.
pub fn gen_sequence_with_noise(rng: &mut impl Rng, noise: f64) -> SynthSequence {
    let letter = char::from(b'A' + rng.random_range(0..26u8));
    let pos = rng.random_range(0..=MAX_TARGET_POS);
    let mut body = ['_'; BODY_LEN];
    body[pos..pos + TARGET_LEN].fill(letter);
    for c in body.iter_mut() {
        if rng.random::<f64>() < noise {
            *c = '!';
        }
    }
    let mut text = String::with_capacity(SEQ_CHARS);
    text.push(letter);
    text.push('>');
    text.extend(body);
    SynthSequence { text, target_letter: letter, target_pos: pos }
}

pub fn gen_sequence(rng: &mut impl Rng) -> SynthSequence {
    gen_sequence_with_noise(rng, NOISE_PROB)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WellFormedness {
    pub valid: bool,
    pub target_letter: Option<char>,
    pub target_pos: Option<usize>,
    pub noise_count: usize,
}

/// Checks a sequence against the synthetic grammar.
///
/// Valid iff the text is 66 characters, starts with `L>`, the body holds only
/// `'_'`, `'!'` and `L`, and some 8-character window contains every `L` of the
/// body, nothing but `L` or `'!'`, and at least six `L`s. The reported
/// position is the first such window.
pub fn well_formedness(text: &str) -> WellFormedness {
    let chars: Vec<char> = text.chars().collect();
    let noise_count = chars.iter().skip(2).filter(|&&c| c == '!').count();
    let invalid = |letter: Option<char>| WellFormedness {
        valid: false,
        target_letter: letter,
        target_pos: None,
        noise_count,
    };
    if chars.len() != SEQ_CHARS || chars[1] != '>' || !chars[0].is_ascii_uppercase() {
        return invalid(None);
    }
    let letter = chars[0];
    let body = &chars[2..];
    if body.iter().any(|&c| c != '_' && c != '!' && c != letter) {
        return invalid(Some(letter));
    }
    let hits: Vec<usize> = body.iter().enumerate().filter(|(_, &c)| c == letter).map(|(i, _)| i).collect();
    let (Some(&first), Some(&last)) = (hits.first(), hits.last()) else {
        return invalid(Some(letter));
    };
    if hits.len() < MIN_TARGET_LETTERS || last - first >= TARGET_LEN {
        return invalid(Some(letter));
    }
    let lo = (last + 1).saturating_sub(TARGET_LEN);
    let hi = first.min(MAX_TARGET_POS);
    let start = (lo..=hi).find(|&s| body[s..s + TARGET_LEN].iter().all(|&c| c == letter || c == '!'));
    match start {
        Some(s) => WellFormedness { valid: true, target_letter: Some(letter), target_pos: Some(s), noise_count },
        None => invalid(Some(letter)),
    }
}

/// `Z ~ B(0.5)`, then `X_t = Z xor F_t` with `F_t ~ B(ε)` independent.
pub fn gen_coinflip_sequence(rng: &mut impl Rng, epsilon: f64, len: usize) -> Result<Vec<u8>> {
    oracle::check_epsilon(epsilon)?;
    let z = u8::from(rng.random::<f64>() < 0.5);
    Ok((0..len).map(|_| z ^ u8::from(rng.random::<f64>() < epsilon)).collect())
}

pub fn coinflip_text(bits: &[u8]) -> String {
    bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
}

/// One sequence per line, LF-terminated.
pub fn write_dataset(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for line in lines {
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Equal-length token sequences, sequence-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        let len = seqs.first().map_or(0, Vec::len);
        if seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Shape("sequences in a batch must share a length".into()));
        }
        Ok(Self { tokens: seqs.concat(), batch: seqs.len(), len })
    }

    pub fn single(tokens: Vec<usize>) -> Self {
        let len = tokens.len();
        Self { tokens, batch: 1, len }
    }

    pub fn seq(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.len..(b + 1) * self.len]
    }

    /// Model inputs `tokens[0..len−1]` of every sequence.
    pub fn inputs(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|b| self.seq(b)[..self.len - 1].iter().copied()).collect()
    }

    /// Next-token targets `tokens[1..len]` of every sequence.
    pub fn targets(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|b| self.seq(b)[1..].iter().copied()).collect()
    }
}

/// Where training and evaluation sequences come from. Both kinds stream
/// fresh samples; there is no fixed training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synth {
        #[serde(default = "default_noise")]
        noise: f64,
    },
    CoinFlip {
        epsilon: f64,
        len: usize,
    },
}

fn default_noise() -> f64 {
    NOISE_PROB
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth { noise: NOISE_PROB }
    }
}

impl DataSource {
    pub fn vocab(&self) -> CharVocab {
        match self {
            DataSource::Synth { .. } => CharVocab::synth(),
            DataSource::CoinFlip { .. } => CharVocab::coin(),
        }
    }

    /// Tokens per sequence including BOS.
    pub fn seq_tokens(&self) -> usize {
        match self {
            DataSource::Synth { .. } => SEQ_CHARS + 1,
            DataSource::CoinFlip { len, .. } => len + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DataSource::Synth { noise } if !(0.0..=1.0).contains(&noise) => {
                Err(Error::Config(format!("noise probability {noise} outside [0, 1]")))
            }
            DataSource::CoinFlip { epsilon, len } => {
                oracle::check_epsilon(epsilon)?;
                if len == 0 {
                    return Err(Error::Config("coin-flip length must be ≥ 1".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn sample_text(&self, rng: &mut impl Rng) -> Result<String> {
        match *self {
            DataSource::Synth { noise } => Ok(gen_sequence_with_noise(rng, noise).text),
            DataSource::CoinFlip { epsilon, len } => Ok(coinflip_text(&gen_coinflip_sequence(rng, epsilon, len)?)),
        }
    }

    pub fn sample_batch(&self, rng: &mut impl Rng, batch: usize) -> Result<TokenBatch> {
        let vocab = self.vocab();
        let seqs = (0..batch)
            .map(|_| vocab.tokenize(&self.sample_text(rng)?))
            .collect::<Result<Vec<_>>>()?;
        TokenBatch::new(&seqs)
    }

    /// Per-token cross-entropy of the generating process, the floor a
    /// model without latent access can reach. For synthetic data this is
    /// `(64·H_b(noise) + ln 57 + ln 26) / 66`, which slightly overstates the
    /// entropy when noise erases a target.
    pub fn entropy_floor(&self) -> f64 {
        match *self {
            DataSource::Synth { noise } => {
                let body = BODY_LEN as f64 * oracle::binary_entropy(noise);
                (body + ((MAX_TARGET_POS + 1) as f64).ln() + 26f64.ln()) / SEQ_CHARS as f64
            }
            DataSource::CoinFlip { epsilon, len } => oracle::process_ce_floor(epsilon, len),
        }
    }
}
