use std::ffi::{CStr, CString};
use std::ptr;

use arcslot::config::ModelConfig;
use arcslot::model::ArcModel;
use arcslot_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn saved_model(dir: &tempfile::TempDir) -> CString {
    let model = ArcModel::new(ModelConfig::default()).unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path, &[]).unwrap();
    c(path.to_str().unwrap())
}

fn last_error() -> String {
    let p = arcslot_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn first_words(model: &ArcModel, n: usize) -> String {
    (0..n)
        .map(|i| model.vocab.word(model.vocab.content(i)).unwrap().to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn load_generate_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_model(&dir);
    let reference = ArcModel::load(std::path::Path::new(path.to_str().unwrap())).unwrap();
    let words = first_words(&reference, 3);
    let segs = c(&format!("{words};{words};{words}"));
    let q = c("");
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(arcslot_model_load(path.as_ptr(), &mut m), ArcslotStatus::Ok);
        assert!(!m.is_null());

        let mut stage = 9;
        assert_eq!(arcslot_model_stage(m, &mut stage), ArcslotStatus::Ok);
        assert_eq!(stage, -1);

        let mut buf = vec![0 as std::ffi::c_char; 4096];
        let mut written = 0usize;
        let st = arcslot_generate(
            m,
            segs.as_ptr(),
            q.as_ptr(),
            false,
            5,
            buf.as_mut_ptr(),
            buf.len(),
            &mut written,
        );
        assert_eq!(st, ArcslotStatus::Ok, "{}", last_error());
        let out = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        assert_eq!(out.len(), written);

        // too small a buffer reports the required size and writes nothing past it
        if written > 0 {
            let mut small = vec![0 as std::ffi::c_char; written];
            let mut need = 0usize;
            let st = arcslot_generate(
                m,
                segs.as_ptr(),
                q.as_ptr(),
                false,
                5,
                small.as_mut_ptr(),
                small.len(),
                &mut need,
            );
            assert_eq!(st, ArcslotStatus::BufferTooSmall);
            assert_eq!(need, written);
        }

        let mut trace = ptr::null_mut();
        assert_eq!(
            arcslot_trace_gates(m, segs.as_ptr(), q.as_ptr(), &mut trace),
            ArcslotStatus::Ok
        );
        let t = CStr::from_ptr(trace).to_str().unwrap().to_string();
        assert!(t.lines().all(|l| l.starts_with("layer=")), "{t}");
        arcslot_string_free(trace);

        arcslot_model_free(m);
    }
}

#[test]
fn errors_map_to_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = c(dir.path().join("nope.ckpt").to_str().unwrap());
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(arcslot_model_load(missing.as_ptr(), &mut m), ArcslotStatus::Io);
        assert!(m.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(arcslot_model_load(ptr::null(), &mut m), ArcslotStatus::NullArg);

        let garbage = dir.path().join("bad.ckpt");
        std::fs::write(&garbage, "not a checkpoint").unwrap();
        let g = c(garbage.to_str().unwrap());
        assert_eq!(arcslot_model_load(g.as_ptr(), &mut m), ArcslotStatus::Checkpoint);

        let path = saved_model(&dir);
        assert_eq!(arcslot_model_load(path.as_ptr(), &mut m), ArcslotStatus::Ok);
        let segs = c("zzz-not-a-word");
        let q = c("");
        let mut buf = [0 as std::ffi::c_char; 64];
        let mut w = 0usize;
        let st = arcslot_generate(
            m,
            segs.as_ptr(),
            q.as_ptr(),
            false,
            4,
            buf.as_mut_ptr(),
            buf.len(),
            &mut w,
        );
        assert_eq!(st, ArcslotStatus::Vocabulary);
        assert!(last_error().contains("vocabulary"));
        arcslot_model_free(m);
        arcslot_model_free(ptr::null_mut());
    }
}

#[test]
fn invalid_utf8_is_rejected() {
    let bad = CString::new(vec![0xff, 0xfe]).unwrap();
    let gold = c("x");
    let mut out = -1.0;
    let st = unsafe { arcslot_token_f1(bad.as_ptr(), gold.as_ptr(), &mut out) };
    assert_eq!(st, ArcslotStatus::InvalidUtf8);
}

#[test]
fn metrics_match_reference_cases() {
    let cases = [
        ("Paris", "paris", 1.0, 1.0),
        ("the answer is paris", "paris", 1.0, 0.4),
        ("a b c", "b c d", 0.0, 2.0 / 3.0),
        ("", "", 1.0, 1.0),
    ];
    for (p, g, em, f1) in cases {
        let (p, g) = (c(p), c(g));
        let (mut e, mut f) = (0.0, 0.0);
        unsafe {
            assert_eq!(arcslot_non_strict_em(p.as_ptr(), g.as_ptr(), &mut e), ArcslotStatus::Ok);
            assert_eq!(arcslot_token_f1(p.as_ptr(), g.as_ptr(), &mut f), ArcslotStatus::Ok);
        }
        assert_eq!(e, em);
        assert!((f - f1).abs() < 1e-12, "{f} vs {f1}");
    }
}

#[test]
fn header_declares_every_export() {
    let h = include_str!("../include/arcslot.h");
    for f in [
        "arcslot_model_load",
        "arcslot_model_free",
        "arcslot_model_stage",
        "arcslot_generate",
        "arcslot_trace_gates",
        "arcslot_string_free",
        "arcslot_non_strict_em",
        "arcslot_token_f1",
        "arcslot_last_error_message",
    ] {
        assert!(h.contains(&format!("{f}(")), "{f} missing");
    }
    assert!(h.contains("typedef struct ArcslotModel ArcslotModel;"));
}
