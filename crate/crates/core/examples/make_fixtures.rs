//! Regenerates the LeNet-5 test fixture: a model directory with
//! deterministic He-uniform weights, calibration images and the design
//! variables used by the tests.
//!
//! cargo run -p snnc-core --example make_fixtures [out-dir]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnc_core::model::format::encode_f32_le;
use snnc_core::model::{save_model, FloatTensor, InputShape, LayerParams, LayerSpec, Network, PoolMode};

const SEED: u64 = 0x5eed_1e7e;

fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> FloatTensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    FloatTensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

/// Soft random blobs on a dark background, values in [0, 1].
fn image(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let mut img = vec![0f32; dim * dim];
    for _ in 0..rng.gen_range(2..5) {
        let (cy, cx) = (rng.gen_range(4.0..28.0f32), rng.gen_range(4.0..28.0f32));
        let r = rng.gen_range(2.0..6.0f32);
        for y in 0..dim {
            for x in 0..dim {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                img[y * dim + x] += (-d2 / (2.0 * r * r)).exp();
            }
        }
    }
    img.iter().map(|v| v.min(1.0)).collect()
}

fn main() {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
    });
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let layers = vec![
        LayerSpec::conv(1, 6, 5, 1, 0),
        LayerSpec::pool(PoolMode::Avg, 2),
        LayerSpec::conv(6, 16, 5, 1, 0),
        LayerSpec::pool(PoolMode::Avg, 2),
        LayerSpec::conv(16, 120, 5, 1, 0),
        LayerSpec::linear(120, 84),
        LayerSpec::linear(84, 10),
    ];
    let mut params = BTreeMap::new();
    for (i, spec) in layers.iter().enumerate() {
        if let Some(shape) = spec.weight_shape() {
            params.insert(i, LayerParams { weight: he_uniform(&mut rng, shape, spec.fan_in()), bias: None });
        }
    }
    let net = Network::new("lenet5", InputShape::square(1, 32), layers, params).unwrap();
    assert_eq!(net.parameter_count(), 61_470);
    save_model(&net, out.join("lenet")).unwrap();

    let calib = out.join("calibration");
    std::fs::create_dir_all(&calib).unwrap();
    for i in 0..16 {
        std::fs::write(calib.join(format!("sample{i:02}.bin")), encode_f32_le(image(&mut rng, 32))).unwrap();
    }
    let inputs = out.join("inputs");
    std::fs::create_dir_all(&inputs).unwrap();
    for i in 0..4 {
        std::fs::write(inputs.join(format!("input{i}.bin")), encode_f32_le(image(&mut rng, 32))).unwrap();
    }
    std::fs::write(out.join("lenet.toml"), "bits = 3\ntime_steps = 4\nclamp_range = 3.0\n\n[pm_width]\nconv5 = 31\n").unwrap();
    println!("fixtures written to {}", out.display());
}
