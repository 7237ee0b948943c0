//! The on-disk checkpoint layout is pinned by a committed reference file.
//! Set `LPN_BLESS=1` to regenerate it after a deliberate format change.

use std::path::PathBuf;

use lpn::model::{ArchConfig, Model};
use lpn::nn::layers::StackConfig;
use lpn::persistence::{from_bytes, to_bytes, CheckpointMeta, FORMAT_VERSION};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden-v1.ckpt")
}

fn golden_model() -> Model {
    let stack = StackConfig {
        layers: 0,
        heads: 1,
        head_dim: 2,
        mlp_factor: 1.0,
    };
    let arch = ArchConfig {
        encoder: stack.clone(),
        decoder: stack,
        latent_dim: 1,
        max_rows: 2,
        max_cols: 2,
    };
    let mut m = Model::init(arch, 0).unwrap();
    let mut k = 0usize;
    for (_, t) in m.params.iter_mut() {
        for v in t.data_mut() {
            *v = ((k % 17) as f32 - 8.0) * 0.125;
            k += 1;
        }
    }
    m
}

fn golden_meta() -> CheckpointMeta {
    CheckpointMeta {
        step: 5,
        seed: 42,
        preset: None,
        config: serde_json::json!({"note": "golden"}),
    }
}

#[test]
fn golden_file_matches_current_writer() {
    let bytes = to_bytes(&golden_model(), None, &golden_meta());
    if std::env::var_os("LPN_BLESS").is_some() {
        std::fs::write(fixture(), &bytes).unwrap();
    }
    let stored = std::fs::read(fixture()).expect("golden fixture present");
    assert_eq!(stored, bytes, "checkpoint bytes changed; bump the format version or re-bless");
    let ck = from_bytes(&stored, None).unwrap();
    assert_eq!(ck.model, golden_model());
    assert_eq!(ck.meta, golden_meta());
}

/// Decodes the fixture following the documented layout, without the
/// library's reader.
#[test]
fn golden_file_follows_documented_layout() {
    let b = std::fs::read(fixture()).unwrap();
    assert_eq!(&b[..8], b"LPNCKPT\0");
    assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), FORMAT_VERSION);
    let len = u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&b[20..20 + len]).unwrap();
    let data = &b[20 + len..];
    let tensors = header["tensors"].as_array().unwrap();
    let names: Vec<&str> = tensors.iter().map(|t| t["name"].as_str().unwrap()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    let mut expect_offset = 0u64;
    let mut k = 0usize;
    for t in tensors {
        let numel: u64 = t["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product();
        assert_eq!(t["offset"].as_u64().unwrap(), expect_offset);
        assert_eq!(t["bytes"].as_u64().unwrap(), 4 * numel);
        for i in 0..numel as usize {
            let at = expect_offset as usize + 4 * i;
            let v = f32::from_le_bytes(data[at..at + 4].try_into().unwrap());
            assert_eq!(v, ((k % 17) as f32 - 8.0) * 0.125);
            k += 1;
        }
        expect_offset += 4 * numel;
    }
    assert_eq!(expect_offset as usize, data.len());
    assert_eq!(header["param_count"].as_u64().unwrap() as usize, k);
    assert_eq!(header["has_optimizer"], false);
    assert_eq!(header["meta"]["seed"], 42);
    let digest = header["data_sha256"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    assert!(digest.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
}
