//! Reference implementations.
//!
//! Both passes are deliberately written as plain nested loops over output
//! positions. They share no code with the simulator's processing modules:
//! the integer pass computes each output as one exact multiply-accumulate
//! over `T`-bit activations instead of the hardware's bit-serial conditional
//! adds, which makes it a brute-force ground truth for the simulator.

use crate::encoder::{psum_bits, psum_fits, requantize, round_shift, QuantizedNetwork, SpikeTrainPlane, DEFAULT_PSUM_HEADROOM};
use crate::error::{Error, Result};
use crate::model::{FloatTensor, LayerSpec, Network, PoolMode};
use crate::scalar::Real;

/// Float forward pass result.
#[derive(Debug, Clone)]
pub struct FloatTrace<F> {
    /// `inputs[l]` is the activation tensor entering layer `l`.
    pub inputs: Vec<FloatTensor<F>>,
    pub logits: Vec<F>,
}

/// Float inference with ReLU after every convolution and hidden linear layer.
pub fn float_forward<F: Real>(net: &Network<F>, x: &FloatTensor<F>) -> Result<FloatTrace<F>> {
    if x.len() != net.input_shape.len() {
        return Err(Error::Shape(format!(
            "input has {} values, network expects {}",
            x.len(),
            net.input_shape.len()
        )));
    }
    let last = net.layers.len() - 1;
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut cur: Vec<F> = x.data().to_vec();
    for (l, layer) in net.layers.iter().enumerate() {
        inputs.push(FloatTensor::new(vec![cur.len()], cur.clone())?);
        let params = net.params.get(&l);
        let mut out = match layer {
            LayerSpec::Conv2d(c) => {
                let p = params.ok_or(Error::MissingParams { layer: l })?;
                let w = p.weight.data();
                let (k, d_in, d_out) = (c.kernel, c.in_dim, c.out_dim);
                let mut out = vec![F::zero(); c.out_channels * d_out * d_out];
                for co in 0..c.out_channels {
                    for oy in 0..d_out {
                        for ox in 0..d_out {
                            let mut acc = p.bias.as_ref().map_or(F::zero(), |b| b.data()[co]);
                            for ci in 0..c.in_channels {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                                        let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                                        if iy < 0 || ix < 0 || iy >= d_in as isize || ix >= d_in as isize {
                                            continue;
                                        }
                                        let a = cur[(ci * d_in + iy as usize) * d_in + ix as usize];
                                        acc = acc + w[((co * c.in_channels + ci) * k + ky) * k + kx] * a;
                                    }
                                }
                            }
                            out[(co * d_out + oy) * d_out + ox] = acc;
                        }
                    }
                }
                out
            }
            LayerSpec::Pool2d(p) => {
                let (k, d_in, d_out) = (p.kernel, p.in_dim, p.out_dim);
                let area = F::from_usize(k * k).unwrap();
                let mut out = vec![F::zero(); p.channels * d_out * d_out];
                for c in 0..p.channels {
                    for oy in 0..d_out {
                        for ox in 0..d_out {
                            let mut acc = F::zero();
                            let mut max = F::neg_infinity();
                            for ky in 0..k {
                                for kx in 0..k {
                                    let v = cur[(c * d_in + oy * k + ky) * d_in + ox * k + kx];
                                    acc = acc + v;
                                    max = max.max(v);
                                }
                            }
                            out[(c * d_out + oy) * d_out + ox] = match p.mode {
                                PoolMode::Avg => acc / area,
                                PoolMode::Max => max,
                            };
                        }
                    }
                }
                out
            }
            LayerSpec::Linear(lin) => {
                let p = params.ok_or(Error::MissingParams { layer: l })?;
                let w = p.weight.data();
                (0..lin.out_features)
                    .map(|j| {
                        let bias = p.bias.as_ref().map_or(F::zero(), |b| b.data()[j]);
                        (0..lin.in_features).fold(bias, |acc, i| acc + w[j * lin.in_features + i] * cur[i])
                    })
                    .collect()
            }
        };
        if layer.has_weights() && l != last {
            for v in out.iter_mut() {
                *v = v.max(F::zero());
            }
        }
        cur = out;
    }
    Ok(FloatTrace { inputs, logits: cur })
}

/// Integer forward pass result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTrace {
    /// `inputs[l]` holds the `T`-bit activations entering layer `l`
    /// (flattened channel-major).
    pub inputs: Vec<Vec<u32>>,
    /// Final layer output: raw partial sums for convolution/linear, pooled
    /// values for pooling.
    pub logits: Vec<i64>,
}

pub fn quantized_forward(q: &QuantizedNetwork, input: &SpikeTrainPlane) -> Result<QuantTrace> {
    quantized_forward_with(q, input, DEFAULT_PSUM_HEADROOM)
}

/// Exact integer inference mirroring the accelerator's arithmetic.
pub fn quantized_forward_with(q: &QuantizedNetwork, input: &SpikeTrainPlane, headroom: u32) -> Result<QuantTrace> {
    if input.values.len() != q.input_shape.len() {
        return Err(Error::Shape(format!(
            "input has {} neurons, network expects {}",
            input.values.len(),
            q.input_shape.len()
        )));
    }
    let cfg = q.cfg;
    let t_steps = cfg.time_steps;
    let last = q.layers.len() - 1;
    let mut inputs = Vec::with_capacity(q.layers.len());
    let mut cur: Vec<u32> = input.values.clone();
    let mut logits = Vec::new();
    for (l, layer) in q.layers.iter().enumerate() {
        inputs.push(cur.clone());
        let width = psum_bits(cfg.bits, t_steps, layer.spec.fan_in(), headroom);
        let check = |v: i64| -> Result<i64> {
            if psum_fits(v, width) {
                Ok(v)
            } else {
                Err(Error::PsumOverflow { layer: l, value: v, bits: width })
            }
        };
        let bias = |co: usize| layer.bias.as_ref().map_or(0, |b| b[co]);
        let psums: Vec<i64> = match &layer.spec {
            LayerSpec::Conv2d(c) => {
                let w = &layer.weights.as_ref().ok_or(Error::MissingParams { layer: l })?.data;
                let (k, d_in, d_out) = (c.kernel, c.in_dim, c.out_dim);
                let mut out = Vec::with_capacity(c.out_channels * d_out * d_out);
                for co in 0..c.out_channels {
                    for oy in 0..d_out {
                        for ox in 0..d_out {
                            let mut acc = bias(co);
                            for ci in 0..c.in_channels {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                                        let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                                        if iy < 0 || ix < 0 || iy >= d_in as isize || ix >= d_in as isize {
                                            continue;
                                        }
                                        let a = cur[(ci * d_in + iy as usize) * d_in + ix as usize] as i64;
                                        acc += w[((co * c.in_channels + ci) * k + ky) * k + kx] as i64 * a;
                                    }
                                }
                            }
                            out.push(check(acc)?);
                        }
                    }
                }
                out
            }
            LayerSpec::Pool2d(p) => {
                let (k, d_in, d_out) = (p.kernel, p.in_dim, p.out_dim);
                let mut out = Vec::with_capacity(p.channels * d_out * d_out);
                for c in 0..p.channels {
                    for oy in 0..d_out {
                        for ox in 0..d_out {
                            let window = (0..k * k).map(|i| cur[(c * d_in + oy * k + i / k) * d_in + ox * k + i % k] as i64);
                            let v = match p.mode {
                                PoolMode::Avg => window.sum(),
                                PoolMode::Max => window.max().unwrap_or(0),
                            };
                            out.push(check(v)?);
                        }
                    }
                }
                out
            }
            LayerSpec::Linear(lin) => {
                let w = &layer.weights.as_ref().ok_or(Error::MissingParams { layer: l })?.data;
                let mut out = Vec::with_capacity(lin.out_features);
                for j in 0..lin.out_features {
                    let mut acc = bias(j);
                    for i in 0..lin.in_features {
                        acc += w[j * lin.in_features + i] as i64 * cur[i] as i64;
                    }
                    out.push(check(acc)?);
                }
                out
            }
        };
        if l == last {
            logits = psums.iter().map(|&p| round_shift(p, layer.shift)).collect();
        } else {
            cur = psums.iter().map(|&p| requantize(p, layer.shift, t_steps)).collect();
        }
    }
    Ok(QuantTrace { inputs, logits })
}

/// Index of the largest logit (first on ties).
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}
