//! Radix spike encoding and fixed-point quantization.
//!
//! Activations travel between layers as spike trains of length `T`; the spike
//! at step `t` carries weight `2^t`, so a train is exactly the LSB-first binary
//! expansion of an unsigned `T`-bit integer. Weights are signed `B`-bit
//! integers with a per-layer radix point chosen from the weight statistics.
//! After every convolution or hidden linear layer the high-precision partial
//! sum is shifted back to the next layer's radix point with round-half-up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FloatTensor, InputShape, LayerSpec, Network, PoolMode};
use crate::oracle::float_forward;
use crate::scalar::{ceil_log2, Real};

/// Width of the signed immediate used to load a bias into the accumulator.
pub const BIAS_BITS: u32 = 22;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Bits per weight (`B`).
    pub bits: u32,
    /// Spike-train length (`T`).
    pub time_steps: u32,
    /// Clamp range in standard deviations (`r`).
    pub clamp_range: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { bits: 3, time_steps: 4, clamp_range: 3.0 }
    }
}

impl QuantConfig {
    pub fn new(bits: u32, time_steps: u32, clamp_range: f64) -> Result<Self> {
        let cfg = Self { bits, time_steps, clamp_range };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bits) {
            return Err(Error::Config(format!("weight bits B = {} outside 1..=16", self.bits)));
        }
        if !(1..=16).contains(&self.time_steps) {
            return Err(Error::Config(format!("time steps T = {} outside 1..=16", self.time_steps)));
        }
        if !(self.clamp_range > 0.0 && self.clamp_range.is_finite()) {
            return Err(Error::Config(format!("clamp range r = {} must be positive", self.clamp_range)));
        }
        Ok(())
    }

    pub fn weight_min(&self) -> i32 {
        -(1 << (self.bits - 1))
    }

    pub fn weight_max(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    /// Largest value a spike train can carry, `2^T - 1`.
    pub fn act_max(&self) -> u32 {
        (1u32 << self.time_steps) - 1
    }
}

/// Integer weights with their radix point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
    /// Number of fractional binary digits (may be negative).
    pub r_wgt: i32,
    /// How many values hit the clamp.
    #[serde(default)]
    pub clamped: usize,
}

/// Radix point from mean and standard deviation:
/// `R = B - ceil(log2(|mean| + r·σ)) - 1`.
pub fn weight_scale<F: Real>(weights: &FloatTensor<F>, cfg: &QuantConfig) -> Result<i32> {
    if weights.is_empty() {
        return Err(Error::Shape("cannot scale an empty weight tensor".into()));
    }
    let n = weights.len() as f64;
    let mean = weights.data().iter().map(|v| v.to_f64_lossless()).sum::<f64>() / n;
    let var = weights.data().iter().map(|v| (v.to_f64_lossless() - mean).powi(2)).sum::<f64>() / n;
    let spread = mean.abs() + cfg.clamp_range * var.sqrt();
    if spread <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(cfg.bits as i32 - ceil_log2(spread) - 1)
}

/// `clamp(round_half_away(v · 2^R), -2^(B-1), 2^(B-1) - 1)` element-wise.
pub fn quantize_weights<F: Real>(weights: &FloatTensor<F>, r_wgt: i32, cfg: &QuantConfig) -> QuantizedTensor {
    let scale = 2f64.powi(r_wgt);
    let (lo, hi) = (cfg.weight_min() as f64, cfg.weight_max() as f64);
    let mut clamped = 0;
    let data = weights
        .data()
        .iter()
        .map(|v| {
            // f64::round is half-away-from-zero.
            let q = (v.to_f64_lossless() * scale).round();
            if q < lo || q > hi {
                clamped += 1;
            }
            q.clamp(lo, hi) as i32
        })
        .collect();
    QuantizedTensor { shape: weights.shape().to_vec(), data, r_wgt, clamped }
}

/// Bias in accumulator units (`2^(R_wgt + R_act)`), clamped to the
/// signed immediate range.
pub fn quantize_bias<F: Real>(bias: &FloatTensor<F>, r_wgt: i32, r_act: i32) -> Vec<i64> {
    let scale = 2f64.powi(r_wgt + r_act);
    let lim = (1i64 << (BIAS_BITS - 1)) as f64;
    bias.data()
        .iter()
        .map(|v| (v.to_f64_lossless() * scale).round().clamp(-lim, lim - 1.0) as i64)
        .collect()
}

/// Per-layer activation radix points, indexed by layer; entry `l` describes
/// the activations flowing *into* layer `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationScale {
    pub r_act: Vec<i32>,
    pub v_hat: Vec<f64>,
}

/// `R_act = T - ceil(log2 v̂)`; a dead layer (`v̂ = 0`) gets `R_act = T`.
pub fn activation_radix(v_hat: f64, time_steps: u32) -> i32 {
    if v_hat > 0.0 {
        time_steps as i32 - ceil_log2(v_hat)
    } else {
        time_steps as i32
    }
}

/// Runs the float reference over every sample and records the maximum
/// activation entering each layer. Layers directly after a pooling layer
/// reuse the pooling layer's radix point since pooling does not requantize.
pub fn calibrate_activations<F: Real>(
    net: &Network<F>,
    samples: &[FloatTensor<F>],
    cfg: &QuantConfig,
) -> Result<ActivationScale> {
    if samples.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    let n = net.layers.len();
    let mut v_hat = vec![0f64; n];
    for x in samples {
        let trace = float_forward(net, x)?;
        for (l, act) in trace.inputs.iter().enumerate() {
            let m = act.data().iter().fold(0f64, |m, v| m.max(v.to_f64_lossless()));
            v_hat[l] = v_hat[l].max(m);
        }
    }
    let mut r_act = Vec::with_capacity(n);
    for l in 0..n {
        let r = if l > 0 && matches!(net.layers[l - 1], LayerSpec::Pool2d(_)) {
            r_act[l - 1]
        } else {
            if v_hat[l] == 0.0 {
                log::warn!("layer {l}: no activation observed during calibration, using R_act = T");
            }
            activation_radix(v_hat[l], cfg.time_steps)
        };
        r_act.push(r);
    }
    Ok(ActivationScale { r_act, v_hat })
}

/// Activations as `T` bit-planes over a `channels × dim × dim` map, stored as
/// one unsigned `T`-bit integer per neuron. Flat (1D) activations use
/// `dim = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeTrainPlane {
    pub time_steps: u32,
    pub channels: usize,
    pub dim: usize,
    pub values: Vec<u32>,
}

impl SpikeTrainPlane {
    pub fn new(time_steps: u32, channels: usize, dim: usize, values: Vec<u32>) -> Result<Self> {
        if values.len() != channels * dim * dim {
            return Err(Error::Shape(format!(
                "spike plane {channels}x{dim}x{dim} needs {} values, got {}",
                channels * dim * dim,
                values.len()
            )));
        }
        let max = (1u64 << time_steps) - 1;
        if let Some(v) = values.iter().find(|&&v| v as u64 > max) {
            return Err(Error::Shape(format!("value {v} does not fit in {time_steps} time steps")));
        }
        Ok(Self { time_steps, channels, dim, values })
    }

    pub fn zeros(time_steps: u32, channels: usize, dim: usize) -> Self {
        Self { time_steps, channels, dim, values: vec![0; channels * dim * dim] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Spike at time step `t` for neuron `idx`.
    pub fn spike(&self, t: u32, idx: usize) -> bool {
        (self.values[idx] >> t) & 1 == 1
    }

    /// Bit-plane `t` as a flat binary map.
    pub fn plane(&self, t: u32) -> Vec<bool> {
        self.values.iter().map(|v| (v >> t) & 1 == 1).collect()
    }

    /// Reassembles a plane set from LSB-first binary maps.
    pub fn from_planes(channels: usize, dim: usize, planes: &[Vec<bool>]) -> Result<Self> {
        let n = channels * dim * dim;
        let mut values = vec![0u32; n];
        for (t, plane) in planes.iter().enumerate() {
            if plane.len() != n {
                return Err(Error::Shape(format!("plane {t} has {} entries, expected {n}", plane.len())));
            }
            for (v, &s) in values.iter_mut().zip(plane) {
                *v |= (s as u32) << t;
            }
        }
        Self::new(planes.len() as u32, channels, dim, values)
    }
}

/// `round_half_up(v · (2^R - 1))` clamped to `[0, 2^T - 1]` per neuron.
pub fn encode_input<F: Real>(
    x: &FloatTensor<F>,
    shape: InputShape,
    r_act: i32,
    time_steps: u32,
) -> Result<SpikeTrainPlane> {
    if x.len() != shape.len() {
        return Err(Error::Shape(format!("input has {} values, network expects {}", x.len(), shape.len())));
    }
    if r_act < 1 {
        return Err(Error::DegenerateInputScale { r_act });
    }
    let scale = 2f64.powi(r_act) - 1.0;
    let max = ((1u64 << time_steps) - 1) as f64;
    let mut values = Vec::with_capacity(x.len());
    for (index, v) in x.data().iter().enumerate() {
        let v = v.to_f64_lossless();
        if v < 0.0 {
            return Err(Error::NegativeInput { index, value: v });
        }
        values.push((v * scale).round().min(max) as u32);
    }
    Ok(SpikeTrainPlane { time_steps, channels: shape.channels, dim: shape.height, values })
}

/// Requantization shift `R_wgt + R_act(l) - R_act(l+1)`.
pub fn requant_shift(layer: usize, r_wgt: i32, r_act: i32, r_act_next: i32) -> Result<u32> {
    let shift = r_wgt + r_act - r_act_next;
    if shift < 0 {
        return Err(Error::NegativeShift { layer, shift });
    }
    Ok(shift as u32)
}

/// Headroom bits added on top of the worst-case accumulator width.
pub const DEFAULT_PSUM_HEADROOM: u32 = 2;

/// Accumulator width `B + T + ceil(log2 fan_in) + headroom`.
pub fn psum_bits(bits: u32, time_steps: u32, fan_in: usize, headroom: u32) -> u32 {
    let fan_bits = if fan_in <= 1 { 0 } else { usize::BITS - (fan_in - 1).leading_zeros() };
    bits + time_steps + fan_bits + headroom
}

/// Whether `psum` fits a signed accumulator of `width` bits.
pub fn psum_fits(psum: i64, width: u32) -> bool {
    if width >= 64 {
        return true;
    }
    let lim = 1i64 << (width - 1);
    (-lim..lim).contains(&psum)
}

/// Right shift with conditional-add rounding (round half up); no clamp.
pub fn round_shift(psum: i64, shift: u32) -> i64 {
    if shift == 0 {
        psum
    } else {
        (psum + (1i64 << (shift - 1))) >> shift
    }
}

/// Partial sum to the next layer's `T`-bit activation; negative sums clamp to
/// zero, which realizes the ReLU.
pub fn requantize(psum: i64, shift: u32, time_steps: u32) -> u32 {
    round_shift(psum, shift).clamp(0, (1i64 << time_steps) - 1) as u32
}

/// Shift applied when a layer's results leave the processing module.
fn output_shift(spec: &LayerSpec) -> u32 {
    match spec {
        LayerSpec::Pool2d(p) if p.mode == PoolMode::Avg => 2 * p.kernel.trailing_zeros(),
        _ => 0,
    }
}

/// One layer of a quantized network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub spec: LayerSpec,
    pub weights: Option<QuantizedTensor>,
    /// Bias in accumulator units, added once before accumulation.
    pub bias: Option<Vec<i64>>,
    /// Radix point of the activations entering this layer.
    pub r_act: i32,
    /// Shift applied to this layer's partial sums on writeback. Final
    /// convolution/linear layers keep raw partial sums (shift 0); average
    /// pooling divides by `K²`.
    pub shift: u32,
}

/// Everything downstream stages need from quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedNetwork {
    pub name: String,
    pub input_shape: InputShape,
    pub cfg: QuantConfig,
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedNetwork {
    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_r_act(&self) -> i32 {
        self.layers[0].r_act
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.output_len())
    }

    /// Encodes a float input with the first layer's radix point.
    pub fn encode<F: Real>(&self, x: &FloatTensor<F>) -> Result<SpikeTrainPlane> {
        let plane = encode_input(x, self.input_shape, self.input_r_act(), self.cfg.time_steps)?;
        Ok(self.shape_input(plane))
    }

    /// Flattens the input to 1D when the first layer is fully connected.
    pub fn shape_input(&self, mut plane: SpikeTrainPlane) -> SpikeTrainPlane {
        if !self.layers[0].spec.is_2d() && plane.dim != 1 {
            plane.channels *= plane.dim * plane.dim;
            plane.dim = 1;
        }
        plane
    }

    /// Builds a quantized network from explicit integer parts, deriving the
    /// writeback shift of pooling and final layers. `shifts[l]` is used for
    /// hidden convolution/linear layers.
    pub fn from_parts(
        name: impl Into<String>,
        input_shape: InputShape,
        cfg: QuantConfig,
        specs: &[LayerSpec],
        weights: Vec<Option<QuantizedTensor>>,
        shifts: &[u32],
    ) -> Result<Self> {
        if weights.len() != specs.len() || shifts.len() != specs.len() {
            return Err(Error::Shape("per-layer vectors must match the layer count".into()));
        }
        let last = specs.len() - 1;
        let layers = specs
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(l, (spec, w))| QuantizedLayer {
                spec: *spec,
                weights: w,
                bias: None,
                r_act: 0,
                shift: if spec.has_weights() && l != last { shifts[l] } else { output_shift(spec) },
            })
            .collect();
        let q = Self { name: name.into(), input_shape, cfg, layers };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        for (l, layer) in self.layers.iter().enumerate() {
            match (layer.spec.weight_shape(), &layer.weights) {
                (Some(shape), Some(w)) => {
                    if w.shape != shape || w.data.len() != shape.iter().product::<usize>() {
                        return Err(Error::Shape(format!("layer {l}: quantized weight shape mismatch")));
                    }
                    let (lo, hi) = (self.cfg.weight_min(), self.cfg.weight_max());
                    if w.data.iter().any(|v| *v < lo || *v > hi) {
                        return Err(Error::Shape(format!("layer {l}: weight outside {}-bit range", self.cfg.bits)));
                    }
                }
                (Some(_), None) => return Err(Error::MissingParams { layer: l }),
                (None, Some(_)) => return Err(Error::Shape(format!("pooling layer {l} carries weights"))),
                (None, None) => {}
            }
            if let Some(b) = &layer.bias {
                if b.len() != layer.spec.out_channels() {
                    return Err(Error::Shape(format!("layer {l}: bias length mismatch")));
                }
            }
        }
        Ok(())
    }
}

/// Per-layer quantization summary written next to the compiled program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub bits: u32,
    pub time_steps: u32,
    pub clamp_range: f64,
    pub layers: Vec<LayerQuantReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantReport {
    pub layer: usize,
    pub notation: String,
    pub r_wgt: Option<i32>,
    pub r_act: i32,
    pub v_hat: f64,
    pub shift: u32,
    pub weights: usize,
    pub clamped: usize,
}

/// Quantizes weights, calibrates activations and derives every shift.
pub fn quantize_network<F: Real>(
    net: &Network<F>,
    samples: &[FloatTensor<F>],
    cfg: &QuantConfig,
    use_bias: bool,
) -> Result<(QuantizedNetwork, QuantReport)> {
    cfg.validate()?;
    let stripped;
    let net = if !use_bias && net.has_bias() {
        log::warn!("model carries bias tensors but biases are disabled; ignoring them");
        stripped = net.without_biases();
        &stripped
    } else {
        net
    };
    let scales = calibrate_activations(net, samples, cfg)?;
    let last = net.layers.len() - 1;
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut report = Vec::with_capacity(net.layers.len());
    for (l, spec) in net.layers.iter().enumerate() {
        let r_act = scales.r_act[l];
        let (weights, bias, r_wgt) = match net.params.get(&l) {
            Some(p) => {
                let r_wgt = match weight_scale(&p.weight, cfg) {
                    Ok(r) => r,
                    Err(Error::DegenerateWeights) => {
                        log::warn!("layer {l}: all-zero weights, using R_wgt = B - 1");
                        cfg.bits as i32 - 1
                    }
                    Err(e) => return Err(e),
                };
                let q = quantize_weights(&p.weight, r_wgt, cfg);
                let b = p.bias.as_ref().map(|b| quantize_bias(b, r_wgt, r_act));
                (Some(q), b, Some(r_wgt))
            }
            None => (None, None, None),
        };
        let shift = match r_wgt {
            Some(r_wgt) if l != last => requant_shift(l, r_wgt, r_act, scales.r_act[l + 1])?,
            _ => output_shift(spec),
        };
        report.push(LayerQuantReport {
            layer: l,
            notation: spec.notation(),
            r_wgt,
            r_act,
            v_hat: scales.v_hat[l],
            shift,
            weights: weights.as_ref().map_or(0, |w| w.data.len()),
            clamped: weights.as_ref().map_or(0, |w| w.clamped),
        });
        layers.push(QuantizedLayer { spec: *spec, weights, bias, r_act, shift });
    }
    let q = QuantizedNetwork { name: net.name.clone(), input_shape: net.input_shape, cfg: *cfg, layers };
    q.validate()?;
    let report = QuantReport { bits: cfg.bits, time_steps: cfg.time_steps, clamp_range: cfg.clamp_range, layers: report };
    Ok((q, report))
}
