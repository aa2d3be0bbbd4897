use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dkdl::mat::{parse_mat, read_mat, MatClass, MatError};
use serde::Deserialize;

#[derive(Deserialize)]
struct Expected {
    shape: [usize; 2],
    values: Vec<f64>,
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn bytes(name: &str) -> Vec<u8> {
    std::fs::read(fixtures().join(name)).unwrap()
}

fn sig15(v: f64) -> String {
    format!("{v:.14e}")
}

#[test]
fn fixtures_match_independent_writer() {
    let text = std::fs::read_to_string(fixtures().join("expected.json")).unwrap();
    let expected: BTreeMap<String, BTreeMap<String, Expected>> = serde_json::from_str(&text).unwrap();
    assert_eq!(expected.len(), 5);
    for (file, arrays) in &expected {
        let parsed = read_mat(&fixtures().join(file)).unwrap();
        for (name, want) in arrays {
            let got = parsed.get(name).unwrap_or_else(|| panic!("{file}: {name} missing"));
            assert_eq!([got.rows, got.cols], want.shape, "{file}:{name}");
            assert_eq!(got.data.len(), want.values.len());
            for (a, b) in got.data.iter().zip(&want.values) {
                assert_eq!(sig15(*a), sig15(*b), "{file}:{name}");
            }
        }
    }
}

#[test]
fn compressed_parses_like_plain() {
    for (plain, packed) in [("le_plain.mat", "le_compressed.mat"), ("be_plain.mat", "be_compressed.mat")] {
        let a = parse_mat(&bytes(plain)).unwrap();
        let b = parse_mat(&bytes(packed)).unwrap();
        assert_eq!(a.arrays, b.arrays);
    }
}

#[test]
fn element_classes_and_skips() {
    let m = parse_mat(&bytes("le_mixed.mat")).unwrap();
    assert_eq!(m.get("wide").unwrap().class, MatClass::Double);
    assert_eq!(m.get("ints").unwrap().class, MatClass::Int16);
    assert!(m.get("label").is_none());
    assert_eq!(m.skipped.len(), 1);
    assert!(m.skipped[0].contains("label"));
    // -0.0 survives.
    assert!(m.get("wide").unwrap().data[3].is_sign_negative());
}

#[test]
fn malformed_inputs_are_typed_errors() {
    assert!(matches!(parse_mat(&bytes("empty.mat")), Err(MatError::NotMat(_))));
    assert!(matches!(parse_mat(&bytes("bad_header.mat")), Err(MatError::NotMat(_))));
    let err = parse_mat(&bytes("truncated.mat")).unwrap_err();
    match &err {
        MatError::Truncated { offset } => assert!(*offset >= 128),
        other => panic!("expected truncation, got {other:?}"),
    }
    assert!(err.to_string().contains("offset"));
    assert_eq!(err.to_string(), format!("{err}"));
    let msg = MatError::NotMat("x").to_string();
    assert!(msg.starts_with("not a MAT-v5 file"));
}

#[test]
fn corrupted_compressed_stream_is_an_error() {
    let mut b = bytes("le_compressed.mat");
    // Zlib payload starts after the 128-byte header and 8-byte tag.
    for v in &mut b[140..150] {
        *v ^= 0x5a;
    }
    assert!(parse_mat(&b).is_err());
}

#[test]
fn every_prefix_fails_cleanly() {
    for name in ["le_plain.mat", "be_plain.mat", "le_compressed.mat", "be_compressed.mat", "le_mixed.mat"] {
        let b = bytes(name);
        for n in 0..b.len() {
            let _ = parse_mat(&b[..n]);
        }
    }
}

#[test]
fn read_mat_reports_path() {
    let p = fixtures().join("bad_header.mat");
    let err = read_mat(&p).unwrap_err();
    assert!(err.to_string().contains("bad_header.mat"));
    assert_eq!(err.exit_code(), 2);
}
