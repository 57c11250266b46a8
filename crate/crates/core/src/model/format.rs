//! On-disk model format: a directory holding `manifest.json` plus one
//! little-endian `f32` blob per parameter tensor.
//!
//! ```text
//! model/
//!   manifest.json
//!   layer0.weight.bin     # row-major (C_out, C_in, K, K)
//!   layer5.weight.bin     # row-major (F_out, F_in)
//!   layer5.bias.bin       # optional, (F_out)
//! ```
//!
//! Manifest (version 1):
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "name": "lenet5",
//!   "input_shape": [1, 32, 32],
//!   "activation": "relu",
//!   "flatten_before": 5,
//!   "layers": [
//!     { "kind": "conv2d", "in_channels": 1, "out_channels": 6, "kernel_size": 5,
//!       "stride": 1, "padding": 0,
//!       "weight": { "file": "layer0.weight.bin", "shape": [6, 1, 5, 5] } },
//!     { "kind": "pool2d", "mode": "avg", "kernel_size": 2, "stride": 2 },
//!     { "kind": "linear", "in_features": 120, "out_features": 84,
//!       "weight": { "file": "layer5.weight.bin", "shape": [84, 120] },
//!       "bias": { "file": "layer5.bias.bin", "shape": [84] } }
//!   ]
//! }
//! ```
//!
//! `activation` and `flatten_before` are attributes rather than layers:
//! ReLU is implied after every convolution and hidden linear layer, and the
//! flatten index (if given) must equal the position of the first linear layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{infer_shapes, FloatTensor, InputShape, LayerParams, LayerSpec, Network, PoolMode};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub input_shape: [usize; 3],
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flatten_before: Option<usize>,
    pub layers: Vec<ManifestLayer>,
}

fn default_activation() -> String {
    "relu".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ManifestLayer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        weight: BlobRef,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<BlobRef>,
    },
    Pool2d {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mode: Option<PoolMode>,
        kernel_size: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<usize>,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        weight: BlobRef,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<BlobRef>,
    },
}

fn one() -> usize {
    1
}

/// Loads a model directory; pooling layers without an explicit mode average.
pub fn load_model<F: Real>(dir: impl AsRef<Path>) -> Result<Network<F>> {
    load_model_with(dir, PoolMode::Avg)
}

pub fn load_model_with<F: Real>(dir: impl AsRef<Path>, default_pool: PoolMode) -> Result<Network<F>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", MANIFEST_FILE)))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.activation != "relu" {
        return Err(Error::Parse(format!("unsupported activation `{}`", manifest.activation)));
    }
    let [c, h, w] = manifest.input_shape;
    let input_shape = InputShape { channels: c, height: h, width: w };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut params = BTreeMap::new();
    for (i, layer) in manifest.layers.iter().enumerate() {
        match layer {
            ManifestLayer::Conv2d { in_channels, out_channels, kernel_size, stride, padding, weight, bias } => {
                layers.push(LayerSpec::conv(*in_channels, *out_channels, *kernel_size, *stride, *padding));
                params.insert(i, read_params(dir, weight, bias.as_ref())?);
            }
            ManifestLayer::Pool2d { mode, kernel_size, stride } => {
                let mut spec = LayerSpec::pool(mode.unwrap_or(default_pool), *kernel_size);
                if let (LayerSpec::Pool2d(p), Some(s)) = (&mut spec, stride) {
                    p.stride = *s;
                }
                layers.push(spec);
            }
            ManifestLayer::Linear { in_features, out_features, weight, bias } => {
                layers.push(LayerSpec::linear(*in_features, *out_features));
                params.insert(i, read_params(dir, weight, bias.as_ref())?);
            }
        }
    }
    if let Some(idx) = manifest.flatten_before {
        let first_linear = layers.iter().position(|l| !l.is_2d());
        if first_linear != Some(idx) {
            return Err(Error::Shape(format!(
                "flatten_before = {idx} but the first linear layer is at {first_linear:?}"
            )));
        }
    }
    let net = infer_shapes(Network { name: manifest.name, input_shape, layers, params })?;
    net.validate()?;
    Ok(net)
}

fn read_params<F: Real>(dir: &Path, weight: &BlobRef, bias: Option<&BlobRef>) -> Result<LayerParams<F>> {
    Ok(LayerParams {
        weight: read_blob(dir, weight)?,
        bias: bias.map(|b| read_blob(dir, b)).transpose()?,
    })
}

fn read_blob<F: Real>(dir: &Path, blob: &BlobRef) -> Result<FloatTensor<F>> {
    let bytes = fs::read(dir.join(&blob.file))?;
    let values = decode_f32_le(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", blob.file)))?;
    FloatTensor::new(blob.shape.clone(), values.into_iter().map(F::from_f32_lossy).collect())
}

/// Decodes a packed little-endian `f32` blob.
pub fn decode_f32_le(bytes: &[u8]) -> std::result::Result<Vec<f32>, String> {
    if !bytes.len().is_multiple_of(4) {
        return Err(format!("blob length {} is not a multiple of 4", bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn encode_f32_le(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

/// Writes a model directory (creating it if needed).
pub fn save_model<F: Real>(net: &Network<F>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let blob = |suffix: &str, t: &FloatTensor<F>| -> Result<BlobRef> {
            let file = format!("layer{i}.{suffix}.bin");
            fs::write(dir.join(&file), encode_f32_le(t.data().iter().map(|v| v.to_f32_lossy())))?;
            Ok(BlobRef { file, shape: t.shape().to_vec() })
        };
        let entry = match layer {
            LayerSpec::Conv2d(c) => {
                let p = net.params.get(&i).ok_or(Error::MissingParams { layer: i })?;
                ManifestLayer::Conv2d {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel_size: c.kernel,
                    stride: c.stride,
                    padding: c.padding,
                    weight: blob("weight", &p.weight)?,
                    bias: p.bias.as_ref().map(|b| blob("bias", b)).transpose()?,
                }
            }
            LayerSpec::Pool2d(p) => {
                ManifestLayer::Pool2d { mode: Some(p.mode), kernel_size: p.kernel, stride: Some(p.stride) }
            }
            LayerSpec::Linear(l) => {
                let p = net.params.get(&i).ok_or(Error::MissingParams { layer: i })?;
                ManifestLayer::Linear {
                    in_features: l.in_features,
                    out_features: l.out_features,
                    weight: blob("weight", &p.weight)?,
                    bias: p.bias.as_ref().map(|b| blob("bias", b)).transpose()?,
                }
            }
        };
        layers.push(entry);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: net.name.clone(),
        input_shape: [net.input_shape.channels, net.input_shape.height, net.input_shape.width],
        activation: default_activation(),
        flatten_before: net.layers.iter().position(|l| !l.is_2d()),
        layers,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(())
}
