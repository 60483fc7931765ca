//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{self, CharVocab, DataSource};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::oracle;
use crate::rng::{stream, Stream};
use crate::sample::{self, ZMode};
use crate::train::{self, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "free-transformer", version, about = "Free Transformer toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run configuration (`model`, `train`, `data` sections).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic or coin-flip sequences, one per line.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Sample a group of sequences from a checkpoint.
    Sample(SampleArgs),
    /// Run the free-bits sweep over four checkpoints.
    Fig4(Fig4Args),
    /// Held-out evaluation against the data's entropy floors.
    Eval(EvalArgs),
    /// Exact coin-flip posteriors and floors.
    Oracle(OracleArgs),
    /// Dump a checkpoint's configuration and tensor manifest.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Synth,
    Coinflip,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value = "synth")]
    pub kind: DataKind,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.2)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 64)]
    pub len: usize,
    /// Validate an existing synthetic file instead of generating.
    #[arg(long)]
    pub check: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from `<out>/checkpoint.bin`.
    #[arg(long)]
    pub resume: bool,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Baseline,
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Independent,
    Shared,
    Pinned,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Defaults to `<out>/checkpoint.bin`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "A>")]
    pub prompt: String,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "independent")]
    pub mode: ModeArg,
    /// Comma-separated codes for `--mode pinned`.
    #[arg(long, value_delimiter = ',')]
    pub codes: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Characters per sequence, prompt included.
    #[arg(long, default_value_t = data::SEQ_CHARS)]
    pub length: usize,
    #[arg(long)]
    pub latent_seed: Option<u64>,
    #[arg(long)]
    pub token_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct Fig4Args {
    /// Four checkpoints; each one's κ is read from its configuration.
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = sample::GROUP_SIZE)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub batches: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long)]
    pub epsilon: f64,
    /// Prefix bits, e.g. `0110`; empty by default.
    #[arg(long, default_value = "")]
    pub prefix: String,
    /// Also print the process entropy rate for sequences of this length.
    #[arg(long)]
    pub len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Contents of a `--config` file; every section is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub data: DataSource,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// The model configuration, defaulting to the toy model sized for the data.
    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| {
            let mut c = ModelConfig::toy(self.data.vocab().size());
            c.max_seq_len = c.max_seq_len.max(self.data.seq_tokens());
            c
        })
    }
}

/// Formats with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Parses and dispatches, returning the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(&cli, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn out_dir(g: &GlobalArgs) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn checkpoint_arg(p: &Option<PathBuf>, g: &GlobalArgs) -> PathBuf {
    p.clone().unwrap_or_else(|| out_dir(g).join("checkpoint.bin"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let g = &cli.global;
    let run_cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = g.seed.unwrap_or(run_cfg.train.seed);
    match &cli.command {
        Command::GenData(a) => gen_data(a, g, seed, out),
        Command::Train(a) => train_cmd(a, g, run_cfg, seed, out, err),
        Command::Sample(a) => sample_cmd(a, g, seed, out),
        Command::Fig4(a) => fig4_cmd(a, g, seed, out),
        Command::Eval(a) => eval_cmd(a, g, &run_cfg, seed, out),
        Command::Oracle(a) => oracle_cmd(a, out),
        Command::Inspect(a) => {
            let bytes = fs::read(checkpoint_arg(&a.checkpoint, g))?;
            let header = Checkpoint::header(&bytes)?;
            let model = Checkpoint::from_bytes(&bytes)?.model()?;
            let summary = serde_json::json!({
                "config": header.config,
                "param_count": model.param_count(),
                "latent_overhead": model.latent_overhead(),
                "tensors": header.tensors,
                "meta": header.meta,
            });
            writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
            Ok(())
        }
    }
}

fn gen_data(a: &GenDataArgs, g: &GlobalArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    if let Some(path) = &a.check {
        let lines = data::read_dataset(path)?;
        let valid = lines.iter().filter(|l| data::well_formedness(l).valid).count();
        writeln!(out, "{valid}/{} well formed", lines.len())?;
        return Ok(());
    }
    let source = match a.kind {
        DataKind::Synth => DataSource::default(),
        DataKind::Coinflip => DataSource::CoinFlip { epsilon: a.epsilon, len: a.len },
    };
    source.validate()?;
    let mut rng = stream(seed, Stream::Data);
    let lines = (0..a.n).map(|_| source.sample_text(&mut rng)).collect::<Result<Vec<_>>>()?;
    let dir = out_dir(g);
    fs::create_dir_all(&dir)?;
    let name = match a.kind {
        DataKind::Synth => "synth.txt",
        DataKind::Coinflip => "coinflip.txt",
    };
    let path = dir.join(name);
    data::write_dataset(&path, &lines)?;
    writeln!(out, "wrote {} sequences to {}", lines.len(), path.display())?;
    Ok(())
}

fn train_cmd(
    a: &TrainArgs,
    g: &GlobalArgs,
    run_cfg: RunConfig,
    seed: u64,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let dir = out_dir(g);
    fs::create_dir_all(&dir)?;
    let mut trainer = if a.resume {
        let mut t = Trainer::from_checkpoint(&Checkpoint::load(&dir.join("checkpoint.bin"))?)?;
        if let Some(s) = a.steps {
            t.extend_to(s);
        }
        t
    } else {
        let mut model_cfg = run_cfg.model_config();
        if let Some(v) = a.variant {
            model_cfg.variant = match v {
                VariantArg::Baseline => Variant::Baseline,
                VariantArg::Free => Variant::Free,
            };
        }
        let mut cfg = run_cfg.train.clone();
        cfg.seed = seed;
        if let Some(s) = a.steps {
            cfg.steps = s;
            cfg.warmup = cfg.warmup.min(s);
        }
        if let Some(k) = a.kappa {
            cfg.kappa = Some(k);
        }
        if let Some(b) = a.batch_size {
            cfg.batch_size = b;
        }
        Trainer::new(model_cfg, cfg, run_cfg.data.clone())?
    };
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = if a.resume && metrics_path.exists() {
        let mut m = train::read_metrics(&metrics_path)?;
        m.truncate(trainer.step() as usize);
        m
    } else {
        Vec::new()
    };
    let mut file = std::io::BufWriter::new(fs::File::create(&metrics_path)?);
    for m in &metrics {
        serde_json::to_writer(&mut file, m)?;
        file.write_all(b"\n")?;
    }
    let total = trainer.config().steps;
    let quiet = a.quiet;
    trainer.run(total, Some(&dir), |m| {
        serde_json::to_writer(&mut file, m)?;
        file.write_all(b"\n")?;
        if !quiet && (m.step % 100 == 0 || m.step + 1 == total) {
            let _ = writeln!(err, "step {:>6}  ce {:.4}  kl {:.4}  lr {:.2e}", m.step, m.ce, m.kl, m.lr);
            file.flush()?;
        }
        metrics.push(m.clone());
        Ok(())
    })?;
    file.flush()?;
    let ck = trainer.checkpoint();
    ck.save(&dir.join("checkpoint.bin"))?;
    let floor = trainer.data().entropy_floor();
    let collapse = trainer.model().config().is_free() && train::detect_collapse(&metrics, floor);
    let summary = serde_json::json!({
        "steps": trainer.step(),
        "final_ce": metrics.last().map(|m| m.ce),
        "late_mean_kl": train::late_mean_kl(&metrics),
        "kappa": trainer.model().config().kappa,
        "entropy_floor": floor,
        "collapse": collapse,
        "param_count": trainer.model().param_count(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    writeln!(out, "{}", serde_json::to_string(&summary)?)?;
    Ok(())
}

fn sample_cmd(a: &SampleArgs, g: &GlobalArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let model = Checkpoint::load(&checkpoint_arg(&a.checkpoint, g))?.model()?;
    let mode = match a.mode {
        ModeArg::Independent => ZMode::Independent,
        ModeArg::Shared => ZMode::Shared,
        ModeArg::Pinned => {
            if a.codes.is_empty() {
                return Err(Error::Config("--mode pinned needs --codes".into()));
            }
            ZMode::Pinned(a.codes.clone())
        }
    };
    let vocab = vocab_for(model.config().vocab_size)?;
    let report = sample::sample_group_len(
        &model,
        &vocab,
        &a.prompt,
        a.length,
        a.n,
        &mode,
        a.temperature,
        a.latent_seed.unwrap_or(seed),
        a.token_seed.unwrap_or(seed),
    )?;
    write!(out, "{}", sample::render_group(&report))?;
    if let Some(dir) = &g.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("samples.json"), &report)?;
    }
    Ok(())
}

fn vocab_for(size: usize) -> Result<CharVocab> {
    [CharVocab::synth(), CharVocab::coin()]
        .into_iter()
        .find(|v| v.size() == size)
        .ok_or_else(|| Error::Config(format!("no built-in vocabulary has {size} tokens")))
}

fn fig4_cmd(a: &Fig4Args, g: &GlobalArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let models = a
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p)?.model())
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = models.iter().map(|m| (m.config().kappa, m)).collect();
    let panels = sample::fig4_experiment(&pairs, seed, a.n, a.temperature)?;
    let text = sample::render_fig4(&panels);
    write!(out, "{text}")?;
    if let Some(dir) = &g.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("fig4.txt"), &text)?;
        write_json(&dir.join("fig4.json"), &panels)?;
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs, g: &GlobalArgs, run_cfg: &RunConfig, seed: u64, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&checkpoint_arg(&a.checkpoint, g))?;
    let model = ck.model()?;
    let data = match (&g.config, ck.meta.get("data")) {
        (None, Some(d)) => serde_json::from_value(d.clone())?,
        _ => run_cfg.data.clone(),
    };
    let report = sample::eval_model(&model, &data, a.batches, a.batch_size, seed)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    if let Some(dir) = &g.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(())
}

fn oracle_cmd(a: &OracleArgs, out: &mut dyn Write) -> Result<()> {
    let bits = a
        .prefix
        .chars()
        .map(|c| match c {
            '0' => Ok(0u8),
            '1' => Ok(1u8),
            c => Err(Error::UnknownChar(c)),
        })
        .collect::<Result<Vec<_>>>()?;
    let p = oracle::autoregressive_posterior(&bits, a.epsilon)?;
    writeln!(out, "{}", sig6(p))?;
    writeln!(out, "latent_floor {}", sig6(oracle::latent_ce_floor(a.epsilon)))?;
    if let Some(len) = a.len {
        writeln!(out, "process_floor {}", sig6(oracle::process_ce_floor(a.epsilon, len)))?;
    }
    Ok(())
}
