//! Training loop: AdamW with warmup and cosine decay, global-norm
//! clipping, JSON-lines metrics, resumable checkpoints, collapse detection.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::model::{FreeTransformer, ModelConfig};
use crate::rng::{stream, RngState, Stream, StreamRng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then cosine decay to `min_lr_ratio · lr`.
    Cosine,
    /// Linear warmup, then flat.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Tokens per sequence including BOS; must match the data source when set.
    pub seq_len: Option<usize>,
    pub lr: f64,
    pub warmup: u64,
    pub schedule: Schedule,
    pub min_lr_ratio: f64,
    pub seed: u64,
    /// Overrides the model's free-bits threshold when set.
    pub kappa: Option<f64>,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Steps between held-out evaluations; 0 disables.
    pub eval_interval: u64,
    pub eval_batches: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            seq_len: None,
            lr: 3e-4,
            warmup: 1_000,
            schedule: Schedule::Cosine,
            min_lr_ratio: 0.1,
            seed: 0,
            kappa: None,
            weight_decay: 0.1,
            clip_norm: 1.0,
            eval_interval: 0,
            eval_batches: 4,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, data: &DataSource) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup > self.steps {
            return bad(format!("warmup {} exceeds steps {}", self.warmup, self.steps));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("learning rate must be finite and non-negative, min ratio in [0, 1]".into());
        }
        if !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("clip norm must be positive and weight decay non-negative".into());
        }
        if let Some(len) = self.seq_len {
            if len != data.seq_tokens() {
                return bad(format!("sequence length {len} does not match data ({})", data.seq_tokens()));
            }
        }
        Ok(())
    }

    /// Learning rate used at 0-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = (self.steps - self.warmup).max(1) as f64;
                let progress = ((step - self.warmup) as f64 / span).min(1.0);
                let floor = self.lr * self.min_lr_ratio;
                floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Decoupled AdamW:
///
/// ```text
/// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
/// p ← p − lr·( m̂ / (√v̂ + eps) + wd·p )
/// ```
///
/// with bias-corrected `m̂ = m/(1−β1^t)`, `v̂ = v/(1−β2^t)`. Decay applies
/// only to tensors with two axes longer than one (weight matrices and the
/// embedding table); gains and ζ are not decayed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn zeros(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<S>> = sizes.into_iter().map(|n| vec![S::zero(); n]).collect();
        Self { v: m.clone(), m, t: 0 }
    }
}

pub fn decays(shape: &[usize]) -> bool {
    shape.len() == 2 && shape.iter().all(|&d| d > 1)
}

impl AdamW {
    pub fn step<S: Scalar>(&self, params: &mut [&mut Tensor<S>], grads: &[Vec<S>], state: &mut AdamState<S>, lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), state.m.len());
        state.t += 1;
        let t = state.t as i32;
        let c1 = S::lit(1.0 - self.beta1.powi(t));
        let c2 = S::lit(1.0 - self.beta2.powi(t));
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let (one, eps, lr_s) = (S::one(), S::lit(self.eps), S::lit(lr));
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if decays(p.shape()) { S::lit(self.weight_decay) } else { S::zero() };
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps) + wd * *w;
                *w = *w - lr_s * update;
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = S::lit(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub ce: f64,
    /// Mean KL per token, nats.
    pub kl: f64,
    pub penalty: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_ce: Option<f64>,
}

impl StepMetrics {
    /// The record without wall-clock time, for reproducibility checks.
    pub fn deterministic(&self) -> Self {
        Self { wall_ms: 0.0, ..self.clone() }
    }
}

/// Moving-average width used to smooth per-step ce before collapse checks.
pub const COLLAPSE_SMOOTHING: usize = 100;
pub const COLLAPSE_MARGIN: f64 = 0.05;
pub const COLLAPSE_SUSTAIN: usize = 500;

/// Flags a run whose (smoothed) training ce sits more than 0.05 nats below
/// the data's conditional floor for at least 500 consecutive steps while
/// the KL channel is open. Training ce is measured with encoder-sampled
/// latents, so dipping under the floor means the latent is carrying the
/// targets themselves.
pub fn detect_collapse(window: &[StepMetrics], floor: f64) -> bool {
    if window.len() < COLLAPSE_SUSTAIN {
        return false;
    }
    let mut run = 0;
    let (mut ce_sum, mut kl_sum) = (0.0, 0.0);
    for (i, m) in window.iter().enumerate() {
        ce_sum += m.ce;
        kl_sum += m.kl;
        if i >= COLLAPSE_SMOOTHING {
            ce_sum -= window[i - COLLAPSE_SMOOTHING].ce;
            kl_sum -= window[i - COLLAPSE_SMOOTHING].kl;
        }
        let n = (i + 1).min(COLLAPSE_SMOOTHING) as f64;
        if ce_sum / n < floor - COLLAPSE_MARGIN && kl_sum / n > 0.0 {
            run += 1;
            if run >= COLLAPSE_SUSTAIN {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}

/// Mean KL per token over the last half of the records.
pub fn late_mean_kl(metrics: &[StepMetrics]) -> f64 {
    let tail = &metrics[metrics.len() / 2..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(|m| m.kl).sum::<f64>() / tail.len() as f64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainerMeta {
    step: u64,
    adam_t: u64,
    data_rng: RngState,
    latent_rng: RngState,
    eval_rng: RngState,
    train: TrainConfig,
    data: DataSource,
    #[serde(default)]
    diverged: Option<String>,
}

/// A resumable training run.
pub struct Trainer {
    model: FreeTransformer<f32>,
    adam: AdamW,
    state: AdamState<f32>,
    cfg: TrainConfig,
    data: DataSource,
    step: u64,
    data_rng: StreamRng,
    latent_rng: StreamRng,
    eval_rng: StreamRng,
}

impl Trainer {
    pub fn new(mut model_cfg: ModelConfig, cfg: TrainConfig, data: DataSource) -> Result<Self> {
        data.validate()?;
        cfg.validate(&data)?;
        if let Some(k) = cfg.kappa {
            model_cfg.kappa = k;
        }
        if model_cfg.vocab_size != data.vocab().size() {
            return Err(Error::Config(format!(
                "model vocabulary {} does not match data vocabulary {}",
                model_cfg.vocab_size,
                data.vocab().size()
            )));
        }
        if model_cfg.max_seq_len + 1 < data.seq_tokens() {
            return Err(Error::Config(format!(
                "sequences of {} tokens exceed max length {}",
                data.seq_tokens(),
                model_cfg.max_seq_len
            )));
        }
        let model = FreeTransformer::init(model_cfg, &mut stream(cfg.seed, Stream::Init))?;
        Ok(Self::assemble(model, cfg, data))
    }

    fn assemble(model: FreeTransformer<f32>, cfg: TrainConfig, data: DataSource) -> Self {
        let state = AdamState::zeros(model.params().named().iter().map(|(_, t)| t.len()));
        let adam = AdamW { weight_decay: cfg.weight_decay, ..AdamW::default() };
        let seed = cfg.seed;
        Self {
            model,
            adam,
            state,
            data,
            step: 0,
            data_rng: stream(seed, Stream::Data),
            latent_rng: stream(seed, Stream::Latent),
            eval_rng: crate::rng::substream(seed, Stream::Data, 1),
            cfg,
        }
    }

    pub fn model(&self) -> &FreeTransformer<f32> {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn data(&self) -> &DataSource {
        &self.data
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    /// One optimizer update.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let start = Instant::now();
        let batch = self.data.sample_batch(&mut self.data_rng, self.cfg.batch_size)?;
        let (parts, mut grads) = self.model.loss_and_grads(&batch, &mut self.latent_rng).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged { step: self.step, msg: format!("non-finite {what}") },
            e => e,
        })?;
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step: self.step, msg: "non-finite gradient norm".into() });
        }
        let lr = self.cfg.lr_at(self.step);
        {
            let mut params: Vec<&mut Tensor<f32>> =
                self.model.params_mut().named_mut().into_iter().map(|(_, t)| t).collect();
            self.adam.step(&mut params, &grads, &mut self.state, lr);
        }
        let mut m = StepMetrics {
            step: self.step,
            ce: parts.ce,
            kl: parts.kl,
            penalty: parts.penalty,
            lr,
            grad_norm,
            wall_ms: 0.0,
            eval_ce: None,
        };
        self.step += 1;
        if self.cfg.eval_interval > 0 && self.step % self.cfg.eval_interval == 0 {
            m.eval_ce = Some(self.evaluate(self.cfg.eval_batches)?);
        }
        m.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(m)
    }

    /// Held-out ce with prior-sampled latents, on a data stream disjoint
    /// from training.
    pub fn evaluate(&mut self, batches: usize) -> Result<f64> {
        let mut total = 0.0;
        for _ in 0..batches.max(1) {
            let b = self.data.sample_batch(&mut self.eval_rng, self.cfg.batch_size)?;
            total += self.model.prior_ce(&b, &mut self.eval_rng)?;
        }
        Ok(total / batches.max(1) as f64)
    }

    /// Runs until `until` (capped at the configured steps), streaming
    /// metrics to `sink`. With `out`, checkpoints go to
    /// `out/checkpoint.bin` and a divergence leaves `out/diverged.bin`.
    pub fn run(&mut self, until: u64, out: Option<&Path>, mut sink: impl FnMut(&StepMetrics) -> Result<()>) -> Result<()> {
        let until = until.min(self.cfg.steps);
        while self.step < until {
            let m = match self.train_step() {
                Ok(m) => m,
                Err(e @ Error::Diverged { .. }) => {
                    if let Some(dir) = out {
                        self.checkpoint_with(Some(e.to_string())).save(&dir.join("diverged.bin"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            sink(&m)?;
            if let Some(dir) = out {
                if self.cfg.checkpoint_interval > 0 && self.step % self.cfg.checkpoint_interval == 0 {
                    self.checkpoint().save(&dir.join("checkpoint.bin"))?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.checkpoint_with(None)
    }

    fn checkpoint_with(&self, diverged: Option<String>) -> Checkpoint {
        let meta = TrainerMeta {
            step: self.step,
            adam_t: self.state.t,
            data_rng: RngState::capture(&self.data_rng),
            latent_rng: RngState::capture(&self.latent_rng),
            eval_rng: RngState::capture(&self.eval_rng),
            train: self.cfg.clone(),
            data: self.data.clone(),
            diverged,
        };
        let mut ck = Checkpoint::from_model(&self.model, serde_json::to_value(meta).expect("serializable meta"));
        let names: Vec<(String, Vec<usize>)> =
            self.model.params().named().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        for (kind, moments) in [("m", &self.state.m), ("v", &self.state.v)] {
            for ((name, shape), data) in names.iter().zip(moments) {
                let t = Tensor::new(shape.clone(), data.clone()).expect("moment shape");
                ck.tensors.push((format!("adam.{kind}.{name}"), t));
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: TrainerMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Checkpoint { offset: 0, msg: format!("not a training checkpoint: {e}") })?;
        let model = ck.model()?;
        let mut t = Self::assemble(model, meta.train, meta.data);
        let names: Vec<String> = t.model.params().named().into_iter().map(|(n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            for (kind, dst) in [("m", &mut t.state.m[i]), ("v", &mut t.state.v[i])] {
                let src = ck.tensor(&format!("adam.{kind}.{name}")).ok_or_else(|| Error::Checkpoint {
                    offset: 0,
                    msg: format!("missing optimizer moment {kind} for {name}"),
                })?;
                if src.len() != dst.len() {
                    return Err(Error::Checkpoint { offset: 0, msg: format!("moment {kind} for {name} has wrong size") });
                }
                dst.copy_from_slice(src.data());
            }
        }
        t.state.t = meta.adam_t;
        t.step = meta.step;
        t.data_rng = meta.data_rng.restore()?;
        t.latent_rng = meta.latent_rng.restore()?;
        t.eval_rng = meta.eval_rng.restore()?;
        Ok(t)
    }

    /// Extends the run to a new total step count.
    pub fn extend_to(&mut self, steps: u64) {
        self.cfg.steps = steps.max(self.cfg.steps);
    }
}

/// Outcome of a complete run.
pub struct TrainOutcome {
    pub model: FreeTransformer<f32>,
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: Checkpoint,
    pub collapse: bool,
}

/// Trains from scratch. With `out`, writes `metrics.jsonl` and
/// `checkpoint.bin` there.
pub fn train(model_cfg: ModelConfig, cfg: TrainConfig, data: DataSource, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model_cfg, cfg, data)?;
    let mut writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut metrics = Vec::with_capacity(trainer.cfg.steps as usize);
    let steps = trainer.cfg.steps;
    trainer.run(steps, out, |m| {
        if let Some(w) = writer.as_mut() {
            serde_json::to_writer(&mut *w, m)?;
            w.write_all(b"\n")?;
        }
        metrics.push(m.clone());
        Ok(())
    })?;
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out {
        checkpoint.save(&dir.join("checkpoint.bin"))?;
    }
    let collapse = trainer.model.config().is_free() && detect_collapse(&metrics, trainer.data.entropy_floor());
    Ok(TrainOutcome { model: trainer.model, metrics, checkpoint, collapse })
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.bin")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ce: f64, kl: f64) -> StepMetrics {
        StepMetrics { step: 0, ce, kl, penalty: 0.0, lr: 0.0, grad_norm: 0.0, wall_ms: 0.0, eval_ce: None }
    }

    #[test]
    fn schedule_shape() {
        let c = TrainConfig { steps: 100, warmup: 10, lr: 1.0, ..TrainConfig::default() };
        assert!((c.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(55) - 0.55).abs() < 1e-12);
        assert!((c.lr_at(100) - 0.1).abs() < 1e-12);
        let flat = TrainConfig { schedule: Schedule::Constant, ..c };
        assert_eq!(flat.lr_at(80), 1.0);
    }

    #[test]
    fn adam_fixed_points_and_first_step() {
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let mut p = Tensor::new(vec![2, 2], vec![1.0f64, -2.0, 3.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::zeros([4]);
        opt.step(&mut [&mut p], &[vec![0.0; 4]], &mut st, 1e-2);
        assert_eq!(p, before);

        let g = vec![0.3, -4.0, 1e-3, 0.0];
        let mut st = AdamState::zeros([4]);
        opt.step(&mut [&mut p], &[g.clone()], &mut st, 1e-2);
        for i in 0..4 {
            let expect = before.data()[i] - 1e-2 * g[i] / (g[i].abs() + 1e-8);
            assert!((p.data()[i] - expect).abs() < 1e-12);
        }

        let decayed = AdamW::default();
        let mut q = before.clone();
        let mut st = AdamState::zeros([4]);
        decayed.step(&mut [&mut q], &[g], &mut st, 0.0);
        assert_eq!(q, before);
    }

    #[test]
    fn decay_only_touches_matrices() {
        assert!(decays(&[4, 3]));
        assert!(!decays(&[4]));
        assert!(!decays(&[1, 8]));
        let opt = AdamW::default();
        let mut gain = Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap();
        let mut st = AdamState::zeros([2]);
        opt.step(&mut [&mut gain], &[vec![0.0, 0.0]], &mut st, 1.0);
        assert_eq!(gain.data(), &[1.0, 1.0]);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1f64]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn collapse_detector() {
        let floor = 0.5;
        let low: Vec<_> = (0..800).map(|_| rec(0.3, 2.0)).collect();
        assert!(detect_collapse(&low, floor));
        let no_kl: Vec<_> = (0..800).map(|_| rec(0.3, 0.0)).collect();
        assert!(!detect_collapse(&no_kl, floor));
        let healthy: Vec<_> = (0..800).map(|_| rec(0.52, 0.1)).collect();
        assert!(!detect_collapse(&healthy, floor));
        let short: Vec<_> = (0..400).map(|_| rec(0.3, 2.0)).collect();
        assert!(!detect_collapse(&short, floor));
    }

    #[test]
    fn config_checks() {
        let d = DataSource::Synth { noise: 1.0 / 16.0 };
        assert!(TrainConfig { warmup: 5, steps: 4, ..TrainConfig::default() }.validate(&d).is_err());
        assert!(TrainConfig { seq_len: Some(10), ..TrainConfig::default() }.validate(&d).is_err());
        assert!(TrainConfig { seq_len: Some(67), ..TrainConfig::default() }.validate(&d).is_ok());
    }
}
