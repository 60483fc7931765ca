//! C ABI over the Free Transformer.
//!
//! Models and generation sessions are opaque handles created and released
//! through this interface. Every fallible call returns an [`FtStatus`];
//! on failure, [`ft_last_error`] describes the most recent error on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use free_transformer::checkpoint::Checkpoint;
use free_transformer::data::CharVocab;
use free_transformer::model::{FreeTransformer, KvCache, ModelConfig, Variant};
use free_transformer::oracle;
use free_transformer::rng::{stream, Stream, StreamRng};
use free_transformer::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    CacheFull = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A loaded model.
pub struct FtModel {
    inner: FreeTransformer<f32>,
}

/// An incremental decoding session bound to one model.
pub struct FtSession {
    model: *const FtModel,
    cache: KvCache<f32>,
    latent: StreamRng,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FtStatus {
    match e {
        Error::Io(_) => FtStatus::Io,
        Error::Checkpoint { .. } | Error::Json(_) => FtStatus::Checkpoint,
        Error::CacheFull(_) => FtStatus::CacheFull,
        Error::NonFinite(_) | Error::Diverged { .. } | Error::ZeroProbability(_) => FtStatus::Numeric,
        _ => FtStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FtStatus, String)>) -> FtStatus {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(Ok(())) => FtStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FtStatus::Panic
        }
    }
}

fn lift<T>(r: free_transformer::Result<T>) -> Result<T, (FtStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (FtStatus, String) {
    (FtStatus::NullPointer, format!("{what} is null"))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ft_model_load(path: *const c_char, out: *mut *mut FtModel) -> FtStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| (FtStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let model = lift(Checkpoint::load(Path::new(path)).and_then(|c| c.model()))?;
        *out = Box::into_raw(Box::new(FtModel { inner: model }));
        Ok(())
    })
}

/// Creates a freshly initialized toy-sized model (zero readout).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ft_model_new_toy(vocab_size: usize, free_variant: bool, seed: u64, out: *mut *mut FtModel) -> FtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let variant = if free_variant { Variant::Free } else { Variant::Baseline };
        let cfg = ModelConfig::toy(vocab_size).with_variant(variant);
        let model = lift(FreeTransformer::init(cfg, &mut stream(seed, Stream::Init)))?;
        *out = Box::into_raw(Box::new(FtModel { inner: model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ft_model_free(model: *mut FtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the vocabulary size, trainable parameter count, and the part of
/// that count belonging to the latent path (encoder plus post-sampler).
///
/// # Safety
/// `model` must be a live handle; output pointers may be null to skip.
#[no_mangle]
pub unsafe extern "C" fn ft_model_info(
    model: *const FtModel,
    vocab_size: *mut usize,
    param_count: *mut usize,
    latent_overhead: *mut usize,
) -> FtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if let Some(v) = vocab_size.as_mut() {
            *v = m.inner.config().vocab_size;
        }
        if let Some(p) = param_count.as_mut() {
            *p = m.inner.param_count();
        }
        if let Some(o) = latent_overhead.as_mut() {
            *o = m.inner.latent_overhead();
        }
        Ok(())
    })
}

/// Full forward over `len` tokens. With `latents` null the latent path is
/// skipped (plain decoder); otherwise `latents[t]` is the code at position
/// `t`. Writes `len × vocab` logits.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ft_model_forward(
    model: *const FtModel,
    tokens: *const u32,
    len: usize,
    latents: *const u32,
    logits: *mut f32,
    logits_len: usize,
) -> FtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if tokens.is_null() || logits.is_null() {
            return Err(null("tokens or logits"));
        }
        let toks: Vec<usize> = std::slice::from_raw_parts(tokens, len).iter().map(|&t| t as usize).collect();
        let v = m.inner.config().vocab_size;
        if logits_len < len * v {
            return Err((FtStatus::BufferTooSmall, format!("need {} logits, buffer holds {logits_len}", len * v)));
        }
        let out = if latents.is_null() {
            lift(m.inner.forward_baseline(&toks))?
        } else {
            let z: Vec<usize> = std::slice::from_raw_parts(latents, len).iter().map(|&t| t as usize).collect();
            lift(m.inner.forward_with_latents(&toks, &z))?
        };
        std::slice::from_raw_parts_mut(logits, len * v).copy_from_slice(out.data());
        Ok(())
    })
}

/// Starts a decoding session: runs the prompt through the encoder path
/// and writes the logits for the next token.
///
/// # Safety
/// `model` must outlive the session; arrays must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ft_session_new(
    model: *const FtModel,
    prompt: *const u32,
    len: usize,
    latent_seed: u64,
    logits: *mut f32,
    logits_len: usize,
    out: *mut *mut FtSession,
) -> FtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if prompt.is_null() || logits.is_null() || out.is_null() {
            return Err(null("prompt, logits or out"));
        }
        let v = m.inner.config().vocab_size;
        if logits_len < v {
            return Err((FtStatus::BufferTooSmall, format!("need {v} logits")));
        }
        let toks: Vec<usize> = std::slice::from_raw_parts(prompt, len).iter().map(|&t| t as usize).collect();
        let mut latent = stream(latent_seed, Stream::Latent);
        let pre = lift(m.inner.forward_prefill(&toks, &mut latent))?;
        std::slice::from_raw_parts_mut(logits, v).copy_from_slice(&pre.last_logits);
        *out = Box::into_raw(Box::new(FtSession { model, cache: pre.cache, latent }));
        Ok(())
    })
}

/// Appends `token` with a code drawn from the uniform prior and writes the
/// next logits. Fails with `CACHE_FULL` at the model's maximum length.
///
/// # Safety
/// `session` must be live and its model not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ft_session_step(session: *mut FtSession, token: u32, logits: *mut f32, logits_len: usize) -> FtStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let m = s.model.as_ref().ok_or_else(|| null("session model"))?;
        if logits.is_null() {
            return Err(null("logits"));
        }
        let v = m.inner.config().vocab_size;
        if logits_len < v {
            return Err((FtStatus::BufferTooSmall, format!("need {v} logits")));
        }
        let out = lift(m.inner.forward_generate_step(token as usize, &mut s.cache, &mut s.latent))?;
        std::slice::from_raw_parts_mut(logits, v).copy_from_slice(&out);
        Ok(())
    })
}

/// Number of positions cached so far.
///
/// # Safety
/// `session` must be live or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn ft_session_len(session: *const FtSession) -> usize {
    session.as_ref().map_or(0, |s| s.cache.len())
}

/// Releases a session. Null is ignored.
///
/// # Safety
/// `session` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ft_session_free(session: *mut FtSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Converts synthetic-alphabet text to token ids (BOS first). On
/// `BUFFER_TOO_SMALL`, `*written` holds the required length.
///
/// # Safety
/// `text` must be NUL-terminated; `ids` must hold `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn ft_tokenize(text: *const c_char, ids: *mut u32, capacity: usize, written: *mut usize) -> FtStatus {
    guard(|| {
        if text.is_null() || written.is_null() {
            return Err(null("text or written"));
        }
        let s = CStr::from_ptr(text).to_str().map_err(|_| (FtStatus::InvalidArgument, "text is not UTF-8".into()))?;
        let toks = lift(CharVocab::synth().tokenize(s))?;
        *written = toks.len();
        if toks.len() > capacity || ids.is_null() {
            return Err((FtStatus::BufferTooSmall, format!("need {} ids", toks.len())));
        }
        for (d, t) in std::slice::from_raw_parts_mut(ids, toks.len()).iter_mut().zip(toks) {
            *d = t as u32;
        }
        Ok(())
    })
}

/// `P(X_{t+1} = 1 | prefix)` for the latent coin-flip process.
///
/// # Safety
/// `prefix` must hold `len` bytes (each 0 or 1) unless `len` is 0.
#[no_mangle]
pub unsafe extern "C" fn ft_oracle_posterior(prefix: *const u8, len: usize, epsilon: f64, out: *mut f64) -> FtStatus {
    guard(|| {
        if out.is_null() || (prefix.is_null() && len > 0) {
            return Err(null("prefix or out"));
        }
        let bits = if len == 0 { &[][..] } else { std::slice::from_raw_parts(prefix, len) };
        if bits.iter().any(|&b| b > 1) {
            return Err((FtStatus::InvalidArgument, "prefix values must be 0 or 1".into()));
        }
        *out = lift(oracle::autoregressive_posterior(bits, epsilon))?;
        Ok(())
    })
}
