//! Reader output compared with nibabel on the fixture corpus.

use std::path::PathBuf;

use petseg_core::nifti::{read_volume, NiftiError};
use serde_json::Value;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/nifti")
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * b.abs().max(1.0)
}

#[test]
fn reader_matches_reference_on_fixtures() {
    let dir = fixture_dir();
    let expected: serde_json::Map<String, Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("expected.json")).unwrap()).unwrap();
    assert!(expected.len() >= 8);
    for (name, want) in &expected {
        let got = read_volume(dir.join(name));
        match want.get("error").and_then(Value::as_str) {
            Some("format") => assert!(matches!(got, Err(NiftiError::Format(_))), "{name}: {got:?}"),
            Some("orientation") => {
                assert!(
                    matches!(got, Err(NiftiError::UnsupportedOrientation(_))),
                    "{name}: {got:?}"
                )
            }
            Some(other) => panic!("unknown expectation {other}"),
            None => {
                let v = got.unwrap_or_else(|e| panic!("{name}: {e}"));
                let dims: Vec<usize> = want["dims"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|d| d.as_u64().unwrap() as usize)
                    .collect();
                assert_eq!(v.dims().to_vec(), dims, "{name}");
                for (label, got, want) in [
                    ("spacing", v.spacing(), floats(&want["spacing"])),
                    ("origin", v.origin(), floats(&want["origin"])),
                    ("direction", v.direction(), floats(&want["direction"])),
                ] {
                    for a in 0..3 {
                        assert!(
                            close(got[a], want[a]),
                            "{name} {label}: {got:?} vs {want:?}"
                        );
                    }
                }
                let data = floats(&want["data"]);
                assert_eq!(data.len(), v.len());
                for (i, (&g, &w)) in v.data().iter().zip(&data).enumerate() {
                    assert!(close(g as f64, w), "{name} voxel {i}: {g} vs {w}");
                }
            }
        }
    }
}

#[test]
fn scaled_int16_fixture_first_voxel() {
    let v = read_volume(fixture_dir().join("i16_scaled.nii")).unwrap();
    assert_eq!(v.data()[0], 7.0);
}
