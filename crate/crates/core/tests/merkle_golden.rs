//! Leaf and root digests against vectors produced by an independent hashlib
//! implementation (`fixtures/gen_merkle_golden.py`).

use tracecommit_core::merkle::GoldenFixture;

fn fixture() -> GoldenFixture {
    let text = include_str!("fixtures/merkle_golden.json");
    serde_json::from_str(text).expect("fixture parses")
}

#[test]
fn golden_vectors_match() {
    let f = fixture();
    assert_eq!(f.vectors.len(), 7);
    f.check().unwrap();
}

#[test]
fn altered_fixture_is_detected() {
    let mut f = fixture();
    f.vectors[3].t += 1;
    assert!(f.check().is_err());

    let mut f = fixture();
    f.vectors.swap(0, 1);
    assert!(f.check().is_err());

    let mut f = fixture();
    f.root.0[31] ^= 1;
    assert!(f.check().is_err());
}
