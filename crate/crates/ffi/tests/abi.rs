use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use free_transformer_ffi::*;

fn toy(free: bool) -> *mut FtModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ft_model_new_toy(30, free, 7, &mut m) }, FtStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = ft_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn info_reports_latent_overhead() {
    let (ft, base) = (toy(true), toy(false));
    let (mut v, mut p, mut o) = (0, 0, 0);
    let (mut bp, mut bo) = (0, 0);
    unsafe {
        assert_eq!(ft_model_info(ft, &mut v, &mut p, &mut o), FtStatus::Ok);
        assert_eq!(ft_model_info(base, ptr::null_mut(), &mut bp, &mut bo), FtStatus::Ok);
        ft_model_free(ft);
        ft_model_free(base);
    }
    assert_eq!(v, 30);
    assert_eq!(bo, 0);
    assert_eq!(p, bp + o);
}

#[test]
fn forward_and_session_agree() {
    let m = toy(true);
    let text = CString::new("AB>CD").unwrap();
    let mut ids = [0u32; 16];
    let mut n = 0;
    unsafe {
        assert_eq!(ft_tokenize(text.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut n), FtStatus::Ok);
    }
    assert_eq!(n, 6);
    let mut logits = vec![0f32; 30];
    let mut session = ptr::null_mut();
    unsafe {
        assert_eq!(ft_session_new(m, ids.as_ptr(), n, 3, logits.as_mut_ptr(), logits.len(), &mut session), FtStatus::Ok);
        assert_eq!(ft_session_len(session), n);
        assert_eq!(ft_session_step(session, ids[1], logits.as_mut_ptr(), logits.len()), FtStatus::Ok);
        assert_eq!(ft_session_len(session), n + 1);
        ft_session_free(session);
    }
    // A freshly initialized readout is zero, so every logit is zero.
    assert!(logits.iter().all(|&x| x == 0.0));

    let zs = vec![0u32; n];
    let mut full = vec![1f32; n * 30];
    unsafe {
        assert_eq!(ft_model_forward(m, ids.as_ptr(), n, zs.as_ptr(), full.as_mut_ptr(), full.len()), FtStatus::Ok);
        assert_eq!(ft_model_forward(m, ids.as_ptr(), n, ptr::null(), full.as_mut_ptr(), 10), FtStatus::BufferTooSmall);
        ft_model_free(m);
    }
    assert!(full.iter().all(|&x| x == 0.0));
    assert!(last_error().contains("need"));
}

#[test]
fn errors_are_reported() {
    let mut m = ptr::null_mut();
    let missing = CString::new("/nonexistent/checkpoint.bin").unwrap();
    unsafe {
        assert_eq!(ft_model_load(missing.as_ptr(), &mut m), FtStatus::Io);
        assert!(m.is_null());
        assert_eq!(ft_model_load(ptr::null(), &mut m), FtStatus::NullPointer);
        assert_eq!(ft_model_new_toy(0, true, 1, &mut m), FtStatus::InvalidArgument);
        ft_model_free(ptr::null_mut());
        ft_session_free(ptr::null_mut());
    }
    assert!(!last_error().is_empty());

    let bad = CString::new("abc").unwrap();
    let mut n = 0;
    let mut ids = [0u32; 2];
    unsafe {
        assert_eq!(ft_tokenize(bad.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut n), FtStatus::InvalidArgument);
        let ok = CString::new("ABC").unwrap();
        assert_eq!(ft_tokenize(ok.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut n), FtStatus::BufferTooSmall);
    }
    assert_eq!(n, 4);
}

#[test]
fn cache_overflow_is_an_error() {
    let m = toy(false);
    let prompt = vec![1u32; 128];
    let mut logits = vec![0f32; 30];
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(ft_session_new(m, prompt.as_ptr(), prompt.len(), 0, logits.as_mut_ptr(), 30, &mut s), FtStatus::Ok);
        assert_eq!(ft_session_step(s, 1, logits.as_mut_ptr(), 30), FtStatus::CacheFull);
        ft_session_free(s);
        ft_model_free(m);
    }
}

#[test]
fn oracle_posterior_matches_closed_form() {
    let prefix = [1u8, 1, 1];
    let mut p = 0.0;
    unsafe {
        assert_eq!(ft_oracle_posterior(prefix.as_ptr(), 3, 0.25, &mut p), FtStatus::Ok);
    }
    // Two-component mixture with likelihoods 0.75^3 and 0.25^3.
    let (a, b) = (0.75f64.powi(3), 0.25f64.powi(3));
    let expect = (a * 0.75 + b * 0.25) / (a + b);
    assert!((p - expect).abs() < 1e-12);
    let bad = [2u8];
    unsafe {
        assert_eq!(ft_oracle_posterior(bad.as_ptr(), 1, 0.25, &mut p), FtStatus::InvalidArgument);
        assert_eq!(ft_oracle_posterior(ptr::null(), 0, 0.25, &mut p), FtStatus::Ok);
    }
    assert!((p - 0.5).abs() < 1e-12);
}

#[test]
fn round_trips_a_saved_checkpoint() {
    use free_transformer::checkpoint::Checkpoint;
    use free_transformer::model::{FreeTransformer, ModelConfig};
    use free_transformer::rng::{stream, Stream};

    let model = FreeTransformer::<f32>::init(ModelConfig::toy(30), &mut stream(5, Stream::Init)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    Checkpoint::from_model(&model, Default::default()).save(&path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    let mut p = 0;
    unsafe {
        assert_eq!(ft_model_load(c.as_ptr(), &mut m), FtStatus::Ok);
        assert_eq!(ft_model_info(m, ptr::null_mut(), &mut p, ptr::null_mut()), FtStatus::Ok);
        ft_model_free(m);
    }
    assert_eq!(p, model.param_count());
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/free_transformer.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["ft_model_load", "ft_session_step", "ft_oracle_posterior", "FT_STATUS_CACHE_FULL"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(compiler).args(["-fsyntax-only", "-x", lang]).arg(&header).output() else {
            eprintln!("{compiler} unavailable, skipping");
            continue;
        };
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
