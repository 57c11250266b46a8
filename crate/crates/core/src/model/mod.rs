//! Network intermediate representation.
//!
//! A [`Network`] is an ordered list of [`LayerSpec`]s (2D convolution and
//! pooling layers followed by fully-connected layers) plus the float
//! parameters of every weight-carrying layer. Feature maps are square;
//! `infer_shapes` fills in the per-layer dimensions and checks that
//! consecutive layers agree.

pub mod format;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use format::{load_model, load_model_with, save_model, Manifest, FORMAT_VERSION};

/// Row-major dense float tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> FloatTensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "tensor shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("non-finite tensor value at index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![F::zero(); len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<G: Real>(&self, f: impl Fn(F) -> G) -> FloatTensor<G> {
        FloatTensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Input feature-map shape: channels × height × width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn square(channels: usize, dim: usize) -> Self {
        Self { channels, height: dim, width: dim }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    #[default]
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Filled by [`infer_shapes`].
    pub in_dim: usize,
    /// Filled by [`infer_shapes`].
    pub out_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool2d {
    pub mode: PoolMode,
    pub kernel: usize,
    pub stride: usize,
    /// Filled by [`infer_shapes`] (pooling keeps the channel count).
    pub channels: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
}

/// One layer of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d(Conv2d),
    Pool2d(Pool2d),
    Linear(Linear),
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d(Conv2d { in_channels, out_channels, kernel, stride, padding, in_dim: 0, out_dim: 0 })
    }

    /// Pooling with kernel size equal to stride.
    pub fn pool(mode: PoolMode, kernel: usize) -> Self {
        LayerSpec::Pool2d(Pool2d { mode, kernel, stride: kernel, channels: 0, in_dim: 0, out_dim: 0 })
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear(Linear { in_features, out_features })
    }

    pub fn is_2d(&self) -> bool {
        !matches!(self, LayerSpec::Linear(_))
    }

    pub fn has_weights(&self) -> bool {
        !matches!(self, LayerSpec::Pool2d(_))
    }

    pub fn kernel(&self) -> usize {
        match self {
            LayerSpec::Conv2d(c) => c.kernel,
            LayerSpec::Pool2d(p) => p.kernel,
            LayerSpec::Linear(_) => 1,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            LayerSpec::Conv2d(c) => c.stride,
            LayerSpec::Pool2d(p) => p.stride,
            LayerSpec::Linear(_) => 1,
        }
    }

    pub fn padding(&self) -> usize {
        match self {
            LayerSpec::Conv2d(c) => c.padding,
            _ => 0,
        }
    }

    /// Input channels (2D) or input features (linear).
    pub fn in_channels(&self) -> usize {
        match self {
            LayerSpec::Conv2d(c) => c.in_channels,
            LayerSpec::Pool2d(p) => p.channels,
            LayerSpec::Linear(l) => l.in_features,
        }
    }

    /// Output channels (2D) or output features (linear).
    pub fn out_channels(&self) -> usize {
        match self {
            LayerSpec::Conv2d(c) => c.out_channels,
            LayerSpec::Pool2d(p) => p.channels,
            LayerSpec::Linear(l) => l.out_features,
        }
    }

    /// Input feature-map side length; 1 for linear layers.
    pub fn in_dim(&self) -> usize {
        match self {
            LayerSpec::Conv2d(c) => c.in_dim,
            LayerSpec::Pool2d(p) => p.in_dim,
            LayerSpec::Linear(_) => 1,
        }
    }

    /// Output feature-map side length; 1 for linear layers.
    pub fn out_dim(&self) -> usize {
        match self {
            LayerSpec::Conv2d(c) => c.out_dim,
            LayerSpec::Pool2d(p) => p.out_dim,
            LayerSpec::Linear(_) => 1,
        }
    }

    pub fn input_len(&self) -> usize {
        self.in_channels() * self.in_dim() * self.in_dim()
    }

    pub fn output_len(&self) -> usize {
        self.out_channels() * self.out_dim() * self.out_dim()
    }

    /// Expected weight tensor shape, `None` for pooling.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            LayerSpec::Conv2d(c) => Some(vec![c.out_channels, c.in_channels, c.kernel, c.kernel]),
            LayerSpec::Pool2d(_) => None,
            LayerSpec::Linear(l) => Some(vec![l.out_features, l.in_features]),
        }
    }

    /// Number of accumulated terms per output (C_in·K² or F_in).
    pub fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Conv2d(c) => c.in_channels * c.kernel * c.kernel,
            LayerSpec::Pool2d(p) => p.kernel * p.kernel,
            LayerSpec::Linear(l) => l.in_features,
        }
    }

    /// Short architecture notation (`6C5`, `P2`, `84`).
    pub fn notation(&self) -> String {
        match self {
            LayerSpec::Conv2d(c) => format!("{}C{}", c.out_channels, c.kernel),
            LayerSpec::Pool2d(p) => format!("P{}", p.kernel),
            LayerSpec::Linear(l) => format!("{}", l.out_features),
        }
    }
}

/// Float parameters of one weight-carrying layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub weight: FloatTensor<F>,
    /// Optional per-output-channel bias (format extension, unused unless enabled).
    pub bias: Option<FloatTensor<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<F> {
    pub name: String,
    pub input_shape: InputShape,
    pub layers: Vec<LayerSpec>,
    pub params: BTreeMap<usize, LayerParams<F>>,
}

impl<F: Real> Network<F> {
    /// Builds a network, infers shapes and validates parameters.
    pub fn new(
        name: impl Into<String>,
        input_shape: InputShape,
        layers: Vec<LayerSpec>,
        params: BTreeMap<usize, LayerParams<F>>,
    ) -> Result<Self> {
        let net = Network { name: name.into(), input_shape, layers, params };
        let net = infer_shapes(net)?;
        net.validate()?;
        Ok(net)
    }

    /// Checks every invariant: non-empty, shape chaining, 2D-before-1D,
    /// parameter presence and dimensions.
    pub fn validate(&self) -> Result<()> {
        let inferred = infer_shapes(self.clone())?;
        if inferred.layers != self.layers {
            return Err(Error::Shape("layer dimensions are stale; run infer_shapes".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.weight_shape() {
                Some(shape) => {
                    let p = self.params.get(&i).ok_or(Error::MissingParams { layer: i })?;
                    if p.weight.shape() != shape.as_slice() {
                        return Err(Error::Shape(format!(
                            "layer {i}: weight shape {:?}, expected {shape:?}",
                            p.weight.shape()
                        )));
                    }
                    if let Some(b) = &p.bias {
                        if b.shape() != [layer.out_channels()] {
                            return Err(Error::Shape(format!(
                                "layer {i}: bias shape {:?}, expected [{}]",
                                b.shape(),
                                layer.out_channels()
                            )));
                        }
                    }
                }
                None => {
                    if self.params.contains_key(&i) {
                        return Err(Error::Shape(format!("pooling layer {i} carries parameters")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .values()
            .map(|p| p.weight.len() + p.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }

    pub fn has_bias(&self) -> bool {
        self.params.values().any(|p| p.bias.is_some())
    }

    /// Copy with all bias tensors removed.
    pub fn without_biases(&self) -> Self {
        let mut net = self.clone();
        for p in net.params.values_mut() {
            p.bias = None;
        }
        net
    }

    /// Flattened output length of the final layer.
    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::output_len)
    }

    /// Converts parameters to another scalar type.
    pub fn cast<G: Real>(&self) -> Network<G> {
        let conv = |t: &FloatTensor<F>| t.map(|v| G::from_f64_lossy(v.to_f64_lossless()));
        Network {
            name: self.name.clone(),
            input_shape: self.input_shape,
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|(&i, p)| (i, LayerParams { weight: conv(&p.weight), bias: p.bias.as_ref().map(conv) }))
                .collect(),
        }
    }
}

/// Populates `in_dim`/`out_dim` (and pooling channel counts) for every layer
/// and checks that layer shapes chain. Idempotent.
pub fn infer_shapes<F>(mut net: Network<F>) -> Result<Network<F>> {
    if net.layers.is_empty() {
        return Err(Error::Shape("network has no layers".into()));
    }
    let input = net.input_shape;
    if input.height != input.width {
        return Err(Error::Shape(format!(
            "feature maps must be square, input is {}x{}",
            input.height, input.width
        )));
    }
    if input.channels == 0 || input.height == 0 {
        return Err(Error::Shape("input shape has a zero dimension".into()));
    }
    let mut channels = input.channels;
    let mut dim = input.height;
    let mut flat: Option<usize> = None;
    for (i, layer) in net.layers.iter_mut().enumerate() {
        match layer {
            LayerSpec::Conv2d(c) => {
                if flat.is_some() {
                    return Err(Error::Shape(format!("layer {i}: 2D layer after a linear layer")));
                }
                if c.kernel == 0 || c.stride == 0 || c.out_channels == 0 {
                    return Err(Error::Shape(format!("layer {i}: kernel, stride and channels must be >= 1")));
                }
                if c.in_channels != channels {
                    return Err(Error::Shape(format!(
                        "layer {i}: expects {} input channels, previous layer produces {channels}",
                        c.in_channels
                    )));
                }
                let padded = dim + 2 * c.padding;
                if padded < c.kernel {
                    return Err(Error::Shape(format!("layer {i}: kernel {} larger than padded input {padded}", c.kernel)));
                }
                c.in_dim = dim;
                c.out_dim = (padded - c.kernel) / c.stride + 1;
                channels = c.out_channels;
                dim = c.out_dim;
            }
            LayerSpec::Pool2d(p) => {
                if flat.is_some() {
                    return Err(Error::Shape(format!("layer {i}: 2D layer after a linear layer")));
                }
                if p.kernel == 0 || p.stride != p.kernel {
                    return Err(Error::Shape(format!(
                        "layer {i}: pooling needs kernel == stride >= 1 (got K={}, str={})",
                        p.kernel, p.stride
                    )));
                }
                if p.mode == PoolMode::Avg && !p.kernel.is_power_of_two() {
                    return Err(Error::Shape(format!(
                        "layer {i}: average pooling divides by shifting, kernel {} is not a power of two",
                        p.kernel
                    )));
                }
                p.channels = channels;
                p.in_dim = dim;
                p.out_dim = dim / p.stride;
                if p.out_dim < 1 {
                    return Err(Error::Shape(format!("layer {i}: pooling output would be empty")));
                }
                dim = p.out_dim;
            }
            LayerSpec::Linear(l) => {
                let features = flat.unwrap_or(channels * dim * dim);
                if l.in_features != features || l.out_features == 0 {
                    return Err(Error::Shape(format!(
                        "layer {i}: expects {} input features, previous layer produces {features}",
                        l.in_features
                    )));
                }
                flat = Some(l.out_features);
            }
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lenet_layers() -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv(1, 6, 5, 1, 0),
            LayerSpec::pool(PoolMode::Avg, 2),
            LayerSpec::conv(6, 16, 5, 1, 0),
            LayerSpec::pool(PoolMode::Avg, 2),
            LayerSpec::conv(16, 120, 5, 1, 0),
            LayerSpec::linear(120, 84),
            LayerSpec::linear(84, 10),
        ]
    }

    fn bare(layers: Vec<LayerSpec>, input: InputShape) -> Network<f32> {
        Network { name: "t".into(), input_shape: input, layers, params: BTreeMap::new() }
    }

    #[test]
    fn lenet_layer_dims() {
        let net = infer_shapes(bare(lenet_layers(), InputShape::square(1, 32))).unwrap();
        let outs: Vec<usize> = net.layers.iter().take(5).map(|l| l.out_dim()).collect();
        assert_eq!(outs, vec![28, 14, 10, 5, 1]);
        assert_eq!(net.layers[3].out_channels(), 16);
    }

    #[test]
    fn infer_is_idempotent() {
        let once = infer_shapes(bare(lenet_layers(), InputShape::square(1, 32))).unwrap();
        let twice = infer_shapes(once.clone()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let layers = vec![LayerSpec::conv(1, 3, 3, 1, 0), LayerSpec::conv(6, 4, 3, 1, 0)];
        let err = infer_shapes(bare(layers, InputShape::square(1, 8))).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let err = infer_shapes(bare(vec![LayerSpec::conv(1, 1, 5, 1, 0)], InputShape::square(1, 4))).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn rectangular_input_is_rejected() {
        let input = InputShape { channels: 1, height: 4, width: 5 };
        assert!(infer_shapes(bare(vec![LayerSpec::conv(1, 1, 3, 1, 0)], input)).is_err());
    }

    #[test]
    fn conv_after_linear_is_rejected() {
        let layers = vec![LayerSpec::linear(16, 4), LayerSpec::conv(1, 1, 1, 1, 0)];
        assert!(infer_shapes(bare(layers, InputShape::square(1, 4))).is_err());
    }

    #[test]
    fn missing_params_detected() {
        let err = Network::<f32>::new("x", InputShape::square(1, 4), vec![LayerSpec::conv(1, 1, 3, 1, 0)], BTreeMap::new())
            .unwrap_err();
        assert!(matches!(err, Error::MissingParams { layer: 0 }));
    }

    #[test]
    fn single_layer_zero_weights() {
        let mut params = BTreeMap::new();
        params.insert(0, LayerParams { weight: FloatTensor::<f32>::zeros(vec![1, 1, 3, 3]), bias: None });
        let net = Network::new("one", InputShape::square(1, 4), vec![LayerSpec::conv(1, 1, 3, 1, 0)], params).unwrap();
        assert_eq!(net.layers[0].out_dim(), 2);
    }
}
