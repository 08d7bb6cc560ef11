use std::path::PathBuf;

use occdir::formats::{decode_text, encode_text, load_text, save_text};
use occdir_core::text::stub_encode;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn hand_built_text_file_is_row_major() {
    let f = load_text(&fixture("hand_l3_d4.txtf")).unwrap();
    assert_eq!(f.values().shape(), [3, 4]);
    assert_eq!(
        f.values().data(),
        [0.5, -1.0, 2.0, 0.25, 3.0, -0.5, 1.5, 0.0, -2.0, 4.0, 0.75, -0.125]
    );
    let bytes = std::fs::read(fixture("hand_l3_d4.txtf")).unwrap();
    assert_eq!(encode_text(&decode_text(&bytes).unwrap()).unwrap(), bytes);
}

/// Frozen stub features; regenerate with `OCCDIR_BLESS=1` only when the
/// stub encoder is meant to change.
#[test]
fn stub_features_match_golden_file() {
    let path = fixture("vehicle_stops_d8_s0.txtf");
    let features = stub_encode("vehicle stops", 8, 0).unwrap();
    if std::env::var_os("OCCDIR_BLESS").is_some() {
        save_text(&path, &features).unwrap();
    }
    let golden = std::fs::read(&path).unwrap();
    assert_eq!(encode_text(&features).unwrap(), golden);
    assert_eq!(load_text(&path).unwrap().values().shape(), [2, 8]);
}
