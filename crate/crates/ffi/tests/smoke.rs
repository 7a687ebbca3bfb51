//! Exercise the C ABI from Rust: the same call sequence a C client
//! would make, including error propagation.

use queueseq_ffi::*;
use std::ffi::{CStr, CString};

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn simulate_load_evaluate_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = c(dir.path().join("data.jsonl").to_str().unwrap());
    let system = c(r#"{"type":"mmn","lambdas":[0.5],"nus":[1.0],"n_servers":1}"#);
    unsafe {
        let status = qs_simulate(system.as_ptr(), 20, 50, 7, data_path.as_ptr());
        assert_eq!(status, QsStatus::Ok);

        let ds = qs_dataset_load(data_path.as_ptr());
        assert!(!ds.is_null());
        assert_eq!(qs_dataset_len(ds), 20);
        assert_eq!(qs_dataset_valid_fraction(ds), 1.0);

        let mut ev = 0.0f64;
        let mut tm = 0.0f64;
        assert_eq!(
            qs_mm1_optimal_losses(0.5, 1.0, &mut ev, &mut tm),
            QsStatus::Ok
        );
        assert!((ev - 0.4775).abs() < 0.001);
        assert!((tm - 1.3333).abs() < 0.001);

        qs_dataset_free(ds);
    }
}

#[test]
fn errors_set_messages_and_codes() {
    unsafe {
        let bad = c("{not json");
        let out = c("/tmp/never-written.jsonl");
        let status = qs_simulate(bad.as_ptr(), 1, 1, 0, out.as_ptr());
        assert_eq!(status, QsStatus::ParseError);
        let mut buf = [0i8; 256];
        let len = qs_last_error(buf.as_mut_ptr(), buf.len());
        assert!(len > 0);
        let msg = CStr::from_ptr(buf.as_ptr()).to_string_lossy();
        assert!(msg.contains("bad system config"), "message: {msg}");

        let mut ev = 0.0;
        let mut tm = 0.0;
        assert_eq!(
            qs_mm1_optimal_losses(-1.0, 1.0, &mut ev, &mut tm),
            QsStatus::InvalidArgument
        );

        let missing = c("/definitely/not/here.jsonl");
        assert!(qs_dataset_load(missing.as_ptr()).is_null());
    }
}

#[test]
fn version_is_accessible() {
    unsafe {
        let v = CStr::from_ptr(qs_version());
        assert!(!v.to_bytes().is_empty());
    }
}

#[test]
fn header_is_generated() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("queueseq.h");
    let text = std::fs::read_to_string(header).expect("cbindgen header exists");
    for symbol in [
        "qs_simulate",
        "qs_dataset_load",
        "qs_model_load",
        "qs_mm1_optimal_losses",
        "QsStatus",
    ] {
        assert!(text.contains(symbol), "header misses {symbol}");
    }
}
