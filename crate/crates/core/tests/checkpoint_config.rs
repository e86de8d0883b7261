use proptest::prelude::*;
use ultravar::checkpoint::{Checkpoint, MAGIC, VERSION};
use ultravar::config::{canonicalize, RunConfig};
use ultravar::nn::ParamStore;
use ultravar::tensor::Tensor;
use ultravar::Error;

fn tiny_ckpt() -> Checkpoint {
    let mut params = ParamStore::new();
    params.insert("b.bias", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
    params.insert("a.w", Tensor::new(vec![1, 2], vec![0.25, 3.0]).unwrap());
    Checkpoint { config: "{\"k\":1}".into(), params }
}

#[test]
fn byte_layout_is_exact() {
    let bytes = tiny_ckpt().to_bytes();
    let mut expect = Vec::new();
    expect.extend_from_slice(b"UVARCKPT");
    expect.extend_from_slice(&1u32.to_le_bytes());
    expect.extend_from_slice(&7u64.to_le_bytes());
    expect.extend_from_slice(b"{\"k\":1}");
    expect.extend_from_slice(&2u32.to_le_bytes());
    // sorted by name: "a.w" then "b.bias"
    expect.extend_from_slice(&3u32.to_le_bytes());
    expect.extend_from_slice(b"a.w");
    expect.extend_from_slice(&2u32.to_le_bytes());
    expect.extend_from_slice(&1u64.to_le_bytes());
    expect.extend_from_slice(&2u64.to_le_bytes());
    expect.extend_from_slice(&0.25f32.to_le_bytes());
    expect.extend_from_slice(&3.0f32.to_le_bytes());
    expect.extend_from_slice(&6u32.to_le_bytes());
    expect.extend_from_slice(b"b.bias");
    expect.extend_from_slice(&1u32.to_le_bytes());
    expect.extend_from_slice(&2u64.to_le_bytes());
    expect.extend_from_slice(&1.5f32.to_le_bytes());
    expect.extend_from_slice(&(-2.0f32).to_le_bytes());
    let crc = crc32fast::hash(&expect);
    expect.extend_from_slice(&crc.to_le_bytes());
    assert_eq!(bytes, expect);
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(VERSION, 1);
}

#[test]
fn round_trip_is_byte_identical() {
    let c = tiny_ckpt();
    let bytes = c.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_bytes(), bytes);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    c.save(&p).unwrap();
    let again = Checkpoint::load(&p).unwrap();
    again.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
}

#[test]
fn every_single_bit_flip_is_detected() {
    let bytes = tiny_ckpt().to_bytes();
    for i in 0..bytes.len() * 8 {
        let mut b = bytes.clone();
        b[i / 8] ^= 1 << (i % 8);
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(_))), "bit {i}");
    }
}

#[test]
fn version_mismatch_is_rejected_even_with_valid_crc() {
    let mut b = tiny_ckpt().to_bytes();
    b.truncate(b.len() - 4);
    b[8..12].copy_from_slice(&2u32.to_le_bytes());
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    match Checkpoint::from_bytes(&b) {
        Err(Error::Checkpoint(m)) => assert!(m.contains("version"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn truncation_and_missing_files() {
    let b = tiny_ckpt().to_bytes();
    for n in [0, 5, 12, b.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&b[..n]), Err(Error::Checkpoint(_))));
    }
    assert!(matches!(Checkpoint::load(std::path::Path::new("/nonexistent/x.ckpt")), Err(Error::Io { .. })));
}

#[test]
fn canonical_json_sorts_keys_and_keeps_numbers() {
    let cfg = RunConfig::default();
    let j = cfg.to_canonical_json();
    assert_eq!(canonicalize(&j).unwrap(), j);
    let top = ["\"ablation\"", "\"classifier\"", "\"dataset\"", "\"eval\"", "\"pem\"", "\"sampler\"", "\"seed\"", "\"stage1\"", "\"stage2\"", "\"synth\"", "\"var\"", "\"vqvae\""];
    let pos: Vec<usize> = top.iter().map(|k| j.find(k).unwrap_or_else(|| panic!("{k} missing"))).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]), "{j}");
    assert!(j.contains("\"lr\":0.001"), "{j}");
    assert!(j.contains("\"top_p\":0.95"), "{j}");
    assert!(j.contains("\"epochs\":200"));
    assert!(j.contains("\"batch_size\":4"));
    assert!(j.contains("\"cfg_scale\":1.5"));
    assert!(j.contains("\"beta2\":0.999"));
    assert!(!j.contains(' '));
}

#[test]
fn config_round_trips_and_validates() {
    let mut cfg = RunConfig::default();
    cfg.seed = 42;
    cfg.ablation.disable_scl = true;
    let back = RunConfig::from_json(&cfg.to_canonical_json()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_ne!(RunConfig::default().hash(), cfg.hash());
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    assert!(matches!(RunConfig::from_json("{\"bogus\":1}"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_json("{\"synth\":{\"side\":16}}"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_json("{\"stage1\":{\"epochs\":0}}"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_json("{\"vqvae\":{\"schedule\":[1,4,4,8]}}"), Err(Error::Config(_))));
}

#[test]
fn config_file_errors_carry_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{not json").unwrap();
    assert!(matches!(RunConfig::load(&p), Err(Error::Parse { .. })));
    assert!(matches!(RunConfig::load(&dir.path().join("none.json")), Err(Error::Io { .. })));
}

proptest! {
    #[test]
    fn random_stores_round_trip(values in proptest::collection::vec(-1e6f32..1e6, 1..64), name in "[a-z]{1,8}(\\.[a-z0-9]{1,4}){0,3}") {
        let mut params = ParamStore::new();
        let n = values.len();
        params.insert(name, Tensor::new(vec![n], values).unwrap());
        let c = Checkpoint { config: RunConfig::default().to_canonical_json(), params };
        let b = c.to_bytes();
        prop_assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
    }
}
