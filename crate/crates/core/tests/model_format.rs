mod common;

use std::fs;

use snnc_core::model::format::{decode_f32_le, encode_f32_le};
use snnc_core::model::{load_model, save_model, LayerSpec, PoolMode};
use snnc_core::oracle::float_forward;
use snnc_core::{Error, Network, Network64};

#[test]
fn lenet_fixture_loads() {
    let net = common::lenet();
    assert_eq!(net.layers.len(), 7);
    assert_eq!(net.parameter_count(), 61_470);
    let names: Vec<String> = net.layers.iter().map(|l| l.notation()).collect();
    assert_eq!(names, ["6C5", "P2", "16C5", "P2", "120C5", "84", "10"]);
    assert_eq!(net.layers[4].out_dim(), 1);
    assert!(!net.has_bias());
}

#[test]
fn save_then_load_is_identity() {
    let net = common::lenet();
    let dir = tempfile::tempdir().unwrap();
    save_model(&net, dir.path().join("m")).unwrap();
    let back: Network = load_model(dir.path().join("m")).unwrap();
    assert_eq!(back, net);
    // Saving twice gives identical bytes.
    save_model(&back, dir.path().join("n")).unwrap();
    for entry in fs::read_dir(dir.path().join("m")).unwrap() {
        let p = entry.unwrap().path();
        let q = dir.path().join("n").join(p.file_name().unwrap());
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap(), "{}", p.display());
    }
}

#[test]
fn f64_load_matches_f32() {
    let n32: Network = common::lenet();
    let n64: Network64 = load_model(common::fixtures().join("lenet")).unwrap();
    let x = &common::calibration(&n32)[0];
    let a = float_forward(&n32, x).unwrap().logits;
    let b = float_forward(&n64, &x.map(|v| v as f64)).unwrap().logits;
    for (u, v) in a.iter().zip(&b) {
        assert!((*u as f64 - v).abs() < 1e-3, "{u} vs {v}");
    }
}

#[test]
fn blob_codec_roundtrip() {
    let v = vec![0.0f32, -1.5, 3.25e-7, f32::MAX];
    assert_eq!(decode_f32_le(&encode_f32_le(v.clone())).unwrap(), v);
    assert!(decode_f32_le(&[0, 1, 2]).is_err());
}

fn copy_lenet() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    save_model(&common::lenet(), dir.path()).unwrap();
    dir
}

#[test]
fn truncated_blob_is_rejected() {
    let dir = copy_lenet();
    let blob = dir.path().join("layer2.weight.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    let err = load_model::<f32>(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Shape(_) | Error::Parse(_)), "{err}");
}

#[test]
fn missing_blob_is_io_error() {
    let dir = copy_lenet();
    fs::remove_file(dir.path().join("layer0.weight.bin")).unwrap();
    assert!(matches!(load_model::<f32>(dir.path()).unwrap_err(), Error::Io(_)));
}

#[test]
fn bad_manifest_is_parse_error() {
    let dir = copy_lenet();
    fs::write(dir.path().join("manifest.json"), "{ not json").unwrap();
    assert!(matches!(load_model::<f32>(dir.path()).unwrap_err(), Error::Parse(_)));
}

#[test]
fn channel_mismatch_in_manifest_is_shape_error() {
    let dir = copy_lenet();
    let path = dir.path().join("manifest.json");
    let text = fs::read_to_string(&path).unwrap();
    let text = text.replacen("\"in_channels\": 6", "\"in_channels\": 5", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(load_model::<f32>(dir.path()).unwrap_err(), Error::Shape(_)));
}

#[test]
fn pool_modes_survive_roundtrip() {
    let mut net = common::lenet();
    net.layers[1] = LayerSpec::pool(PoolMode::Max, 2);
    let net = Network::new(net.name.clone(), net.input_shape, net.layers.clone(), net.params.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_model(&net, dir.path()).unwrap();
    let back: Network = load_model(dir.path()).unwrap();
    assert!(matches!(back.layers[1], LayerSpec::Pool2d(p) if p.mode == PoolMode::Max));
    assert!(matches!(back.layers[3], LayerSpec::Pool2d(p) if p.mode == PoolMode::Avg));
}
