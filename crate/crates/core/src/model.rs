//! The baseline decoder and the Free Transformer.
//!
//! Both share one parameter layout; the Free Transformer adds an encoder
//! (ζ, one non-causal block, a `D→H` readout) and a `2^H→D` post-sampler.
//! The latent enters at block `L/2` (0-based), whose queries read the
//! residual stream `x` while its keys and values read `x + R`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::encoder::{self, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::kernels::{self, AttnShape};
use crate::mapper::{self, BitLogits, LatentSeq, MAX_BITS};
use crate::nn::{self, BlockGeometry, BlockParams, BlockVars, SeqLayout, RMS_EPS};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Free,
}

fn default_variant() -> Variant {
    Variant::Free
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    pub layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub vocab_size: usize,
    pub latent_bits: usize,
    pub max_seq_len: usize,
    /// Free-bits threshold, nats per token.
    pub kappa: f64,
    #[serde(default)]
    pub weight_tying: bool,
}

impl ModelConfig {
    /// L=8, D=64, 4 query and 4 kv heads, H=8, 128 positions.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            variant: Variant::Free,
            layers: 8,
            d_model: 64,
            n_q_heads: 4,
            n_kv_heads: 4,
            vocab_size,
            latent_bits: 8,
            max_seq_len: 128,
            kappa: std::f64::consts::LN_2,
            weight_tying: false,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.layers % 2 != 0 {
            return Err(Error::Config(format!("layer count must be even and ≥ 2, got {}", self.layers)));
        }
        if !(1..=MAX_BITS).contains(&self.latent_bits) {
            return Err(Error::Config(format!("latent bits must be in 1..={MAX_BITS}, got {}", self.latent_bits)));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("vocab size and max length must be positive".into()));
        }
        encoder::FreeBitsConfig::new(self.kappa)?;
        self.geometry_unchecked().validate()
    }

    fn geometry_unchecked(&self) -> BlockGeometry {
        BlockGeometry {
            d_model: self.d_model,
            n_q: self.n_q_heads,
            n_kv: self.n_kv_heads,
            mlp_hidden: nn::default_mlp_hidden(self.d_model),
        }
    }

    pub fn geometry(&self) -> BlockGeometry {
        self.geometry_unchecked()
    }

    pub fn latent_width(&self) -> usize {
        1 << self.latent_bits
    }

    pub fn injection_layer(&self) -> usize {
        self.layers / 2
    }

    pub fn is_free(&self) -> bool {
        self.variant == Variant::Free
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    /// `[V × D]`
    pub embed: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub encoder: Option<EncoderParams<S>>,
    /// `[2^H × D]`
    pub post_sampler: Option<Tensor<S>>,
    pub final_norm: Tensor<S>,
    /// `[D × V]`; absent when tied to the embedding table.
    pub readout: Option<Tensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Parameters in canonical (checkpoint and optimizer) order.
    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        if let Some(enc) = &self.encoder {
            out.push(("encoder.zeta".into(), &enc.zeta));
            out.extend(enc.block.named().into_iter().map(|(n, t)| (format!("encoder.block.{n}"), t)));
            out.push(("encoder.readout".into(), &enc.readout));
        }
        if let Some(ps) = &self.post_sampler {
            out.push(("post_sampler".into(), ps));
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(r) = &self.readout {
            out.push(("readout".into(), r));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        if let Some(enc) = &mut self.encoder {
            out.push(("encoder.zeta".into(), &mut enc.zeta));
            out.extend(enc.block.named_mut().into_iter().map(|(n, t)| (format!("encoder.block.{n}"), t)));
            out.push(("encoder.readout".into(), &mut enc.readout));
        }
        if let Some(ps) = &mut self.post_sampler {
            out.push(("post_sampler".into(), ps));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        if let Some(r) = &mut self.readout {
            out.push(("readout".into(), r));
        }
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

struct Bound {
    vars: Vec<Var>,
    embed: Var,
    blocks: Vec<BlockVars>,
    encoder: Option<EncoderVars>,
    post_sampler: Option<Var>,
    final_norm: Var,
    readout: Option<Var>,
}

fn block_vars(v: &[Var]) -> BlockVars {
    BlockVars {
        attn_norm: v[0],
        wq: v[1],
        wk: v[2],
        wv: v[3],
        wo: v[4],
        mlp_norm: v[5],
        w_gate: v[6],
        w_up: v[7],
        w_down: v[8],
    }
}

/// Where the latent code comes from in a tape forward.
pub enum LatentMode<'a, S> {
    /// No injection: the plain decoder.
    Off,
    /// Sample from the encoder's posterior (training, prefill).
    Encoder(&'a mut StreamRng),
    /// Encoder sampling through the mapper surrogate anchored at the given
    /// table; a missing anchor is filled from the current logits.
    Surrogate(&'a mut StreamRng, &'a mut Option<Vec<S>>),
    /// Use the given code index at every row.
    Fixed(&'a [usize]),
}

struct Graph {
    logits: Var,
    kl: Option<Var>,
    latents: Option<LatentSeq>,
    kv: Vec<(Var, Var)>,
    injected: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct TrainForward<S> {
    pub logits: Tensor<S>,
    pub kl: Vec<S>,
    pub latents: LatentSeq,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub penalty: f64,
    /// Mean KL per token, nats.
    pub kl: f64,
}

/// Per-layer rotated keys and values for incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache<S> {
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
    capacity: usize,
    kv_width: usize,
    /// Latent code used at each cached position (free variant only).
    pub latents: Vec<usize>,
    /// `x + R` rows fed to the injection block's keys and values.
    pub injected: Vec<S>,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); config.layers],
            values: vec![Vec::new(); config.layers],
            len: 0,
            capacity: config.max_seq_len,
            kv_width: config.geometry().kv_width(),
            latents: Vec::new(),
            injected: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn layer(&self, l: usize) -> (&[S], &[S]) {
        (&self.keys[l], &self.values[l])
    }

    fn check_consistent(&self) -> bool {
        self.keys.iter().chain(&self.values).all(|k| k.len() == self.len * self.kv_width)
    }
}

/// Result of running the encoder path over a prompt.
#[derive(Clone, Debug)]
pub struct Prefill<S> {
    pub cache: KvCache<S>,
    pub latents: Option<LatentSeq>,
    /// Logits predicting the token after the prompt.
    pub last_logits: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreeTransformer<S> {
    config: ModelConfig,
    params: ModelParams<S>,
}

impl<S: Scalar> FreeTransformer<S> {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let geom = config.geometry();
        let d = config.d_model;
        let embed = nn::normal_matrix(config.vocab_size, d, rng);
        let blocks = (0..config.layers).map(|_| BlockParams::init(&geom, rng)).collect();
        let (encoder, post_sampler) = if config.is_free() {
            let enc = EncoderParams::init(&geom, config.latent_bits, rng);
            (Some(enc), Some(nn::normal_matrix(config.latent_width(), d, rng)))
        } else {
            (None, None)
        };
        let readout = (!config.weight_tying).then(|| Tensor::zeros(vec![d, config.vocab_size]));
        let params = ModelParams {
            embed,
            blocks,
            encoder,
            post_sampler,
            final_norm: Tensor::full(vec![d], S::one()),
            readout,
        };
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<S>) -> Result<Self> {
        config.validate()?;
        let geom = config.geometry();
        let d = config.d_model;
        let shape_err = |what: &str| Error::Shape(format!("{what} does not match the configuration"));
        if params.embed.shape() != [config.vocab_size, d] {
            return Err(shape_err("embedding"));
        }
        if params.blocks.len() != config.layers {
            return Err(shape_err("block count"));
        }
        for b in &params.blocks {
            b.check(&geom)?;
        }
        if config.is_free() {
            let enc = params.encoder.as_ref().ok_or_else(|| shape_err("missing encoder"))?;
            enc.block.check(&geom)?;
            if enc.zeta.shape() != [1, d] || enc.readout.shape() != [d, config.latent_bits] {
                return Err(shape_err("encoder"));
            }
            match &params.post_sampler {
                Some(ps) if ps.shape() == [config.latent_width(), d] => {}
                _ => return Err(shape_err("post-sampler")),
            }
        } else if params.encoder.is_some() || params.post_sampler.is_some() {
            return Err(shape_err("baseline with latent parameters"));
        }
        if params.final_norm.shape() != [d] {
            return Err(shape_err("final norm"));
        }
        match (&params.readout, config.weight_tying) {
            (None, true) => {}
            (Some(r), false) if r.shape() == [d, config.vocab_size] => {}
            _ => return Err(shape_err("readout")),
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<S> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Trainable scalars specific to the latent path.
    pub fn latent_overhead(&self) -> usize {
        self.params.encoder.as_ref().map_or(0, EncoderParams::param_count)
            + self.params.post_sampler.as_ref().map_or(0, Tensor::len)
    }

    /// The decoder alone, sharing every decoder weight.
    pub fn to_baseline(&self) -> Self {
        let mut params = self.params.clone();
        params.encoder = None;
        params.post_sampler = None;
        Self { config: self.config.clone().with_variant(Variant::Baseline), params }
    }

    pub fn cast<T: Scalar>(&self) -> FreeTransformer<T> {
        let cast_block = |b: &BlockParams<S>| BlockParams {
            attn_norm: b.attn_norm.cast(),
            wq: b.wq.cast(),
            wk: b.wk.cast(),
            wv: b.wv.cast(),
            wo: b.wo.cast(),
            mlp_norm: b.mlp_norm.cast(),
            w_gate: b.w_gate.cast(),
            w_up: b.w_up.cast(),
            w_down: b.w_down.cast(),
        };
        let p = &self.params;
        FreeTransformer {
            config: self.config.clone(),
            params: ModelParams {
                embed: p.embed.cast(),
                blocks: p.blocks.iter().map(cast_block).collect(),
                encoder: p.encoder.as_ref().map(|e| EncoderParams {
                    zeta: e.zeta.cast(),
                    block: cast_block(&e.block),
                    readout: e.readout.cast(),
                }),
                post_sampler: p.post_sampler.as_ref().map(Tensor::cast),
                final_norm: p.final_norm.cast(),
                readout: p.readout.as_ref().map(Tensor::cast),
            },
        }
    }

    fn bind(&self, tape: &mut Tape<S>) -> Bound {
        let vars: Vec<Var> = self.params.named().into_iter().map(|(_, t)| tape.leaf(t)).collect();
        let mut i = 1;
        let blocks = (0..self.config.layers)
            .map(|_| {
                i += 9;
                block_vars(&vars[i - 9..i])
            })
            .collect();
        let encoder = self.params.encoder.as_ref().map(|_| {
            let e = EncoderVars { zeta: vars[i], block: block_vars(&vars[i + 1..i + 10]), readout: vars[i + 10] };
            i += 11;
            e
        });
        let post_sampler = self.params.post_sampler.as_ref().map(|_| {
            i += 1;
            vars[i - 1]
        });
        let final_norm = vars[i];
        let readout = self.params.readout.as_ref().map(|_| vars[i + 1]);
        Bound { embed: vars[0], blocks, encoder, post_sampler, final_norm, readout, vars }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    fn build(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        inputs: &[usize],
        layout: SeqLayout,
        latent: LatentMode<'_, S>,
    ) -> Result<Graph> {
        self.check_tokens(inputs)?;
        if layout.len > self.config.max_seq_len {
            return Err(Error::Config(format!(
                "sequence of {} exceeds max length {}",
                layout.len, self.config.max_seq_len
            )));
        }
        let geom = self.config.geometry();
        let half = self.config.injection_layer();
        let mut kv = Vec::with_capacity(self.config.layers);
        let mut x = tape.embedding(p.embed, inputs)?;
        for b in &p.blocks[..half] {
            let o = nn::block_on_tape(tape, b, &geom, x, None, layout, true)?;
            kv.push((o.k, o.v));
            x = o.out;
        }

        let mut kl = None;
        let mut latents = None;
        let mut injected = None;
        let r = match (latent, &p.encoder, p.post_sampler) {
            (LatentMode::Off, _, _) | (_, None, _) | (_, _, None) => None,
            (LatentMode::Encoder(rng), Some(enc), Some(ps)) => {
                let bit_logits = encoder::encode_on_tape(tape, enc, &geom, x, layout)?;
                let logits = BitLogits::new(tape.tensor(bit_logits))?;
                let bits = mapper::sample_bits(&logits, rng);
                latents = Some(mapper::index_of_bits(&bits));
                let bits = mapper::bits_constant(tape, &bits);
                let z = tape.binary_mapper(bit_logits, bits)?;
                kl = Some(tape.kl_per_token(bit_logits)?);
                Some(tape.matmul(z, ps, false)?)
            }
            (LatentMode::Surrogate(rng, anchor), Some(enc), Some(ps)) => {
                let bit_logits = encoder::encode_on_tape(tape, enc, &geom, x, layout)?;
                let logits = BitLogits::new(tape.tensor(bit_logits))?;
                let bits = mapper::sample_bits(&logits, rng);
                latents = Some(mapper::index_of_bits(&bits));
                let bits = mapper::bits_constant(tape, &bits);
                let table = anchor.get_or_insert_with(|| mapper::g_table(logits.tensor().data(), logits.bits()));
                let z = tape.binary_mapper_surrogate(bit_logits, bits, table)?;
                kl = Some(tape.kl_per_token(bit_logits)?);
                Some(tape.matmul(z, ps, false)?)
            }
            (LatentMode::Fixed(indices), Some(_), Some(ps)) => {
                if indices.len() != layout.rows() {
                    return Err(Error::Shape(format!("{} latent codes for {} positions", indices.len(), layout.rows())));
                }
                latents = Some(LatentSeq { indices: indices.to_vec(), bits: self.config.latent_bits });
                // Row gather equals one-hot times the post-sampler weights.
                Some(tape.embedding(ps, indices)?)
            }
        };
        let kv_in = match r {
            Some(r) => {
                let v = tape.add(x, r)?;
                injected = Some(v);
                Some(v)
            }
            None => None,
        };
        let o = nn::block_on_tape(tape, &p.blocks[half], &geom, x, kv_in, layout, true)?;
        kv.push((o.k, o.v));
        x = o.out;
        for b in &p.blocks[half + 1..] {
            let o = nn::block_on_tape(tape, b, &geom, x, None, layout, true)?;
            kv.push((o.k, o.v));
            x = o.out;
        }
        let h = tape.rms_norm(x, Some(p.final_norm), RMS_EPS)?;
        let logits = match p.readout {
            Some(r) => tape.matmul(h, r, false)?,
            None => tape.matmul(h, p.embed, true)?,
        };
        Ok(Graph { logits, kl, latents, kv, injected })
    }

    /// Plain causal decoding of one sequence; latent parts are ignored.
    pub fn forward_baseline(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let g = self.build(&mut tape, &p, tokens, SeqLayout { batch: 1, len: tokens.len() }, LatentMode::Off)?;
        Ok(tape.tensor(g.logits))
    }

    /// Training-mode forward of one sequence: the encoder samples `Z`.
    pub fn forward_train(&self, tokens: &[usize], rng: &mut StreamRng) -> Result<TrainForward<S>> {
        if !self.config.is_free() {
            return Err(Error::Config("training-mode forward needs the free variant".into()));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let layout = SeqLayout { batch: 1, len: tokens.len() };
        let g = self.build(&mut tape, &p, tokens, layout, LatentMode::Encoder(rng))?;
        Ok(TrainForward {
            logits: tape.tensor(g.logits),
            kl: g.kl.map(|k| tape.value(k).to_vec()).unwrap_or_default(),
            latents: g.latents.expect("encoder path yields latents"),
        })
    }

    /// Full forward of one sequence with the given code at every position.
    pub fn forward_with_latents(&self, tokens: &[usize], latents: &[usize]) -> Result<Tensor<S>> {
        self.check_latents(latents)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let g = self.build(
            &mut tape,
            &p,
            tokens,
            SeqLayout { batch: 1, len: tokens.len() },
            LatentMode::Fixed(latents),
        )?;
        Ok(tape.tensor(g.logits))
    }

    fn check_latents(&self, latents: &[usize]) -> Result<()> {
        let w = self.config.latent_width();
        match latents.iter().find(|&&z| z >= w) {
            Some(z) => Err(Error::Config(format!("latent code {z} outside [0, {w})"))),
            None => Ok(()),
        }
    }

    /// Runs the prompt through the train-mode graph (encoder-sampled `Z`
    /// for the free variant) and fills a cache for incremental decoding.
    pub fn forward_prefill(&self, prompt: &[usize], rng: &mut StreamRng) -> Result<Prefill<S>> {
        self.prefill_with(prompt, LatentMode::Encoder(rng))
    }

    /// Prefill with caller-chosen codes instead of the encoder.
    pub fn prefill_with_latents(&self, prompt: &[usize], latents: &[usize]) -> Result<Prefill<S>> {
        self.check_latents(latents)?;
        self.prefill_with(prompt, LatentMode::Fixed(latents))
    }

    fn prefill_with(&self, prompt: &[usize], mode: LatentMode<'_, S>) -> Result<Prefill<S>> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        if prompt.len() > self.config.max_seq_len {
            return Err(Error::CacheFull(self.config.max_seq_len));
        }
        let mode = if self.config.is_free() { mode } else { LatentMode::Off };
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let g = self.build(&mut tape, &p, prompt, SeqLayout { batch: 1, len: prompt.len() }, mode)?;
        let mut cache = KvCache::new(&self.config);
        for (l, &(k, v)) in g.kv.iter().enumerate() {
            cache.keys[l] = tape.value(k).to_vec();
            cache.values[l] = tape.value(v).to_vec();
        }
        cache.len = prompt.len();
        if let Some(z) = &g.latents {
            cache.latents = z.indices.clone();
        }
        if let Some(inj) = g.injected {
            cache.injected = tape.value(inj).to_vec();
        }
        debug_assert!(cache.check_consistent());
        let v = self.config.vocab_size;
        let logits = tape.value(g.logits);
        Ok(Prefill { cache, latents: g.latents, last_logits: logits[logits.len() - v..].to_vec() })
    }

    /// Appends one token, drawing its code uniformly from `2^H` values.
    pub fn forward_generate_step(&self, token: usize, cache: &mut KvCache<S>, rng: &mut StreamRng) -> Result<Vec<S>> {
        let z = self.config.is_free().then(|| rng.random_range(0..self.config.latent_width()));
        self.generate_step_with_latent(token, cache, z)
    }

    /// Appends one token with an explicit code (ignored by the baseline).
    pub fn generate_step_with_latent(&self, token: usize, cache: &mut KvCache<S>, z: Option<usize>) -> Result<Vec<S>> {
        self.check_tokens(&[token])?;
        let pos = cache.len;
        if pos >= cache.capacity {
            return Err(Error::CacheFull(cache.capacity));
        }
        let cfg = &self.config;
        let geom = cfg.geometry();
        let d = cfg.d_model;
        let eps = S::lit(RMS_EPS);
        let mut x = self.params.embed.row(token).to_vec();
        let mut latent_used = None;
        for (l, block) in self.params.blocks.iter().enumerate() {
            let kv_src = match (l == cfg.injection_layer(), &self.params.post_sampler, z) {
                (true, Some(ps), Some(z)) => {
                    if z >= cfg.latent_width() {
                        return Err(Error::Config(format!("latent code {z} outside [0, {})", cfg.latent_width())));
                    }
                    latent_used = Some(z);
                    let kv: Vec<S> = x.iter().zip(ps.row(z)).map(|(&a, &b)| a + b).collect();
                    cache.injected.extend_from_slice(&kv);
                    Some(kv)
                }
                _ => None,
            };
            x = self.block_step(block, &geom, &x, kv_src.as_deref(), l, cache, pos)?;
        }
        if let Some(z) = latent_used {
            cache.latents.push(z);
        }
        cache.len += 1;
        let mut h = vec![S::zero(); d];
        let mut inv = [S::zero()];
        kernels::rms_norm_forward(&x, self.params.final_norm.data(), eps, &mut h, &mut inv);
        let v = cfg.vocab_size;
        let mut logits = vec![S::zero(); v];
        match &self.params.readout {
            Some(r) => kernels::matmul(&h, false, r.data(), false, &mut logits, 1, d, v, S::zero()),
            None => kernels::matmul(&h, false, self.params.embed.data(), true, &mut logits, 1, d, v, S::zero()),
        }
        Ok(logits)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_step(
        &self,
        p: &BlockParams<S>,
        geom: &BlockGeometry,
        x: &[S],
        kv_src: Option<&[S]>,
        layer: usize,
        cache: &mut KvCache<S>,
        pos: usize,
    ) -> Result<Vec<S>> {
        let d = geom.d_model;
        let hd = geom.head_dim();
        let kvw = geom.kv_width();
        let hid = geom.mlp_hidden;
        let eps = S::lit(RMS_EPS);
        let mut inv = [S::zero()];
        let mut hq = vec![S::zero(); d];
        kernels::rms_norm_forward(x, p.attn_norm.data(), eps, &mut hq, &mut inv);
        let hkv = match kv_src {
            Some(src) => {
                let mut h = vec![S::zero(); d];
                kernels::rms_norm_forward(src, p.attn_norm.data(), eps, &mut h, &mut inv);
                h
            }
            None => hq.clone(),
        };
        let mut q = vec![S::zero(); d];
        let mut k = vec![S::zero(); kvw];
        let mut v = vec![S::zero(); kvw];
        kernels::matmul(&hq, false, p.wq.data(), false, &mut q, 1, d, d, S::zero());
        kernels::matmul(&hkv, false, p.wk.data(), false, &mut k, 1, d, kvw, S::zero());
        kernels::matmul(&hkv, false, p.wv.data(), false, &mut v, 1, d, kvw, S::zero());
        kernels::rope(&mut q, geom.n_q, hd, &[pos], false);
        kernels::rope(&mut k, geom.n_kv, hd, &[pos], false);
        cache.keys[layer].extend_from_slice(&k);
        cache.values[layer].extend_from_slice(&v);
        let shape = AttnShape {
            batch: 1,
            q_len: 1,
            kv_len: pos + 1,
            n_q: geom.n_q,
            n_kv: geom.n_kv,
            head_dim: hd,
            causal: true,
            q_offset: pos,
        };
        let mut attn = vec![S::zero(); d];
        let mut probs = vec![S::zero(); shape.probs_len()];
        kernels::attention_forward(&shape, &q, &cache.keys[layer], &cache.values[layer], &mut attn, &mut probs)?;
        let mut y = x.to_vec();
        kernels::matmul(&attn, false, p.wo.data(), false, &mut y, 1, d, d, S::one());
        let mut hm = vec![S::zero(); d];
        kernels::rms_norm_forward(&y, p.mlp_norm.data(), eps, &mut hm, &mut inv);
        let mut gate = vec![S::zero(); hid];
        let mut up = vec![S::zero(); hid];
        kernels::matmul(&hm, false, p.w_gate.data(), false, &mut gate, 1, d, hid, S::zero());
        kernels::matmul(&hm, false, p.w_up.data(), false, &mut up, 1, d, hid, S::zero());
        let mut act = vec![S::zero(); hid];
        kernels::silu_mul_forward(&gate, &up, &mut act);
        kernels::matmul(&act, false, p.w_down.data(), false, &mut y, 1, hid, d, S::one());
        Ok(y)
    }

    fn loss_graph(&self, tape: &mut Tape<S>, p: &Bound, batch: &TokenBatch, mode: LatentMode<'_, S>) -> Result<(Var, LossParts)> {
        if batch.len < 2 {
            return Err(Error::Empty("loss needs at least two tokens per sequence"));
        }
        let layout = SeqLayout { batch: batch.batch, len: batch.len - 1 };
        let mode = if self.config.is_free() { mode } else { LatentMode::Off };
        let g = self.build(tape, p, &batch.inputs(), layout, mode)?;
        let ce = tape.cross_entropy(g.logits, &batch.targets())?;
        let (total, penalty, kl) = match g.kl {
            Some(kl) => {
                let kl_mean = tape.value(kl).iter().map(|v| v.f64()).sum::<f64>() / layout.rows() as f64;
                let pen = tape.free_bits(kl, self.config.kappa)?;
                (tape.add(ce, pen)?, tape.scalar(pen).f64(), kl_mean)
            }
            None => (ce, 0.0, 0.0),
        };
        let parts = LossParts { total: tape.scalar(total).f64(), ce: tape.scalar(ce).f64(), penalty, kl };
        if !parts.total.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok((total, parts))
    }

    /// `ce + free_bits(kl)` over a batch; inputs are `tokens[..len−1]`, targets `tokens[1..]`.
    pub fn loss(&self, batch: &TokenBatch, rng: &mut StreamRng) -> Result<LossParts> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        Ok(self.loss_graph(&mut tape, &p, batch, LatentMode::Encoder(rng))?.1)
    }

    /// The loss with the mapper replaced by its straight-through surrogate
    /// `one_hot + G(L) − G₀`. With the same `rng` state and the anchor `G₀`
    /// captured on the first call, its finite differences equal the
    /// gradients of [`FreeTransformer::loss_and_grads`].
    pub fn surrogate_loss(&self, batch: &TokenBatch, rng: &mut StreamRng, anchor: &mut Option<Vec<S>>) -> Result<LossParts> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        Ok(self.loss_graph(&mut tape, &p, batch, LatentMode::Surrogate(rng, anchor))?.1)
    }

    /// Loss and gradients in canonical parameter order.
    pub fn loss_and_grads(&self, batch: &TokenBatch, rng: &mut StreamRng) -> Result<(LossParts, Vec<Vec<S>>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let (total, parts) = self.loss_graph(&mut tape, &p, batch, LatentMode::Encoder(rng))?;
        let grads = tape.backward(total);
        let named = self.params.named();
        let out = p.vars.iter().zip(&named).map(|(&v, (_, t))| grads.get_or_zeros(v, t.len())).collect();
        Ok((parts, out))
    }

    /// Held-out cross-entropy with codes drawn from the uniform prior
    /// instead of the encoder (what generation sees).
    pub fn prior_ce(&self, batch: &TokenBatch, rng: &mut StreamRng) -> Result<f64> {
        let layout = SeqLayout { batch: batch.batch, len: batch.len - 1 };
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let g = if self.config.is_free() {
            let z: Vec<usize> = (0..layout.rows()).map(|_| rng.random_range(0..self.config.latent_width())).collect();
            self.build(&mut tape, &p, &batch.inputs(), layout, LatentMode::Fixed(&z))?
        } else {
            self.build(&mut tape, &p, &batch.inputs(), layout, LatentMode::Off)?
        };
        let ce = tape.cross_entropy(g.logits, &batch.targets())?;
        Ok(tape.scalar(ce).f64())
    }
}
