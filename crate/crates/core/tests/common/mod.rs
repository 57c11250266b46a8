#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use snnc_core::design::DesignVars;
use snnc_core::encoder::{QuantConfig, QuantizedNetwork, QuantizedTensor, SpikeTrainPlane};
use snnc_core::encoder::quantize_network;
use snnc_core::model::{infer_shapes, load_model, FloatTensor, InputShape, LayerSpec, PoolMode};
use snnc_core::oracle::{float_forward, quantized_forward};
use snnc_core::planner::PmKind;
use snnc_core::pipeline::{compile, compile_quantized, read_tensors, Compiled};
use snnc_core::{Error, Network};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn lenet() -> Network {
    load_model(fixtures().join("lenet")).expect("lenet fixture")
}

pub fn calibration(net: &Network) -> Vec<FloatTensor<f32>> {
    read_tensors(fixtures().join("calibration"), net.input_shape).expect("calibration fixture")
}

pub fn inputs(net: &Network) -> Vec<FloatTensor<f32>> {
    read_tensors(fixtures().join("inputs"), net.input_shape).expect("input fixtures")
}

pub fn lenet_design() -> DesignVars {
    DesignVars::load(fixtures().join("lenet.toml")).expect("design fixture")
}

pub fn compile_lenet(dv: &DesignVars) -> Compiled {
    let net = lenet();
    let samples = calibration(&net);
    compile(&net, &samples, dv).expect("lenet compiles")
}

/// Simulated LeNet cycle count on the first calibration sample.
pub fn lenet_cycles(c: &Compiled) -> u64 {
    let net = lenet();
    let x = c.encode(&calibration(&net)[0]).unwrap();
    let v = c.verify(&x).unwrap();
    assert!(v.passed(), "simulator differs from oracle");
    v.sim.report.total_cycles
}

/// A small random network with random integer weights and shifts, plus an
/// input for it.
pub struct FuzzCase {
    pub net: QuantizedNetwork,
    pub input: SpikeTrainPlane,
    pub design: DesignVars,
}

fn random_specs<R: Rng>(rng: &mut R) -> (InputShape, Vec<LayerSpec>) {
    let channels = rng.gen_range(1..=3);
    let mut dim = rng.gen_range(3..=16);
    let shape = InputShape::square(channels, dim);
    let mut ch = channels;
    let mut features: Option<usize> = if rng.gen_bool(0.1) { Some(channels * dim * dim) } else { None };
    let n = rng.gen_range(1..=4);
    let mut specs = Vec::new();
    for _ in 0..n {
        if let Some(f) = features {
            let out = rng.gen_range(1..=16);
            specs.push(LayerSpec::linear(f, out));
            features = Some(out);
            continue;
        }
        match rng.gen_range(0..10) {
            0..=5 => {
                let padding = rng.gen_range(0..=1);
                let k = rng.gen_range(1..=5.min(dim + 2 * padding));
                let stride = if rng.gen_bool(0.25) { 2 } else { 1 };
                let out = rng.gen_range(1..=8);
                specs.push(LayerSpec::conv(ch, out, k, stride, padding));
                dim = (dim + 2 * padding - k) / stride + 1;
                ch = out;
            }
            6..=7 if dim >= 2 => {
                let mode = if rng.gen_bool(0.5) { PoolMode::Avg } else { PoolMode::Max };
                let k = if mode == PoolMode::Max && dim >= 3 && rng.gen_bool(0.3) { 3 } else { 2 };
                specs.push(LayerSpec::pool(mode, k));
                dim /= k;
            }
            _ => {
                let f = ch * dim * dim;
                let out = rng.gen_range(1..=16);
                specs.push(LayerSpec::linear(f, out));
                features = Some(out);
            }
        }
    }
    (shape, specs)
}

/// Draws networks until one fits the planner (later layers of the same
/// kernel size may not be wider than the first).
pub fn fuzz_case<R: Rng>(rng: &mut R) -> FuzzCase {
    loop {
        let (shape, specs) = random_specs(rng);
        let net = Network { name: "fuzz".into(), input_shape: shape, layers: specs, params: Default::default() };
        let specs = infer_shapes(net).expect("generator makes valid shapes").layers;
        let bits = rng.gen_range(1..=6);
        let t = rng.gen_range(1..=6);
        let cfg = QuantConfig::new(bits, t, 3.0).unwrap();
        let weights = specs
            .iter()
            .map(|s| {
                s.weight_shape().map(|shape| {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(cfg.weight_min()..=cfg.weight_max())).collect();
                    QuantizedTensor { shape, data, r_wgt: 0, clamped: 0 }
                })
            })
            .collect();
        let shifts: Vec<u32> = specs.iter().map(|_| rng.gen_range(0..=6)).collect();
        let q = QuantizedNetwork::from_parts("fuzz", shape, cfg, &specs, weights, &shifts).unwrap();
        let mut design = DesignVars { bits, time_steps: t, ..DesignVars::default() };
        design.conv_replicas = rng.gen_range(1..=3);
        design.intra_parallel = rng.gen_bool(0.8);
        // Wider modules than the first layer needs, so that several channel
        // windows fit side by side.
        for spec in specs.iter().filter(|s| s.is_2d()) {
            let key = PmKind::of(spec).unwrap().key(spec.kernel());
            let need = specs.iter().filter(|o| o.is_2d() && PmKind::of(o).unwrap().key(o.kernel()) == key).map(|o| o.out_dim()).max().unwrap();
            if !design.pm_width.contains_key(&key) && rng.gen_bool(0.6) {
                design.pm_width.insert(key, need + rng.gen_range(0..=2 * need + 3));
            }
        }
        match snnc_core::planner::plan(&specs, &design) {
            Ok(_) => {}
            Err(Error::Plan(_)) => continue,
            Err(e) => panic!("unexpected planner error {e}"),
        }
        let max = cfg.act_max();
        let values = (0..shape.len()).map(|_| rng.gen_range(0..=max)).collect();
        let input = q.shape_input(SpikeTrainPlane::new(t, shape.channels, shape.height, values).unwrap());
        return FuzzCase { net: q, input, design };
    }
}

/// Compiles and simulates a fuzz case with and without reordering; returns
/// a description of the first disagreement with the oracle.
pub fn check_fuzz_case(case: &FuzzCase) -> Result<(), String> {
    let oracle = snnc_core::oracle::quantized_forward_with(&case.net, &case.input, case.design.psum_headroom)
        .map_err(|e| format!("oracle: {e}"))?
        .logits;
    for reorder in [false, true] {
        let dv = DesignVars { reorder, ..case.design.clone() };
        let c = compile_quantized(case.net.clone(), &dv).map_err(|e| format!("compile: {e}"))?;
        let sim = c.simulate(&case.input).map_err(|e| format!("simulate (reorder={reorder}): {e}"))?;
        if sim.output != oracle {
            return Err(format!(
                "reorder={reorder} specs {:?}\nsimulator {:?}\noracle    {:?}",
                case.net.specs().iter().map(|s| s.notation()).collect::<Vec<_>>(),
                sim.output,
                oracle
            ));
        }
    }
    Ok(())
}

pub fn build(shape: InputShape, specs: Vec<LayerSpec>, bits: u32, t: u32, weights: Vec<Option<Vec<i32>>>, shifts: &[u32]) -> QuantizedNetwork {
    let net = Network { name: "t".into(), input_shape: shape, layers: specs, params: Default::default() };
    let specs = infer_shapes(net).unwrap().layers;
    let w = specs
        .iter()
        .zip(weights)
        .map(|(s, w)| w.map(|data| QuantizedTensor { shape: s.weight_shape().unwrap(), data, r_wgt: 0, clamped: 0 }))
        .collect();
    QuantizedNetwork::from_parts("t", shape, QuantConfig::new(bits, t, 3.0).unwrap(), &specs, w, shifts).unwrap()
}

pub fn ramp(t: u32, channels: usize, dim: usize) -> SpikeTrainPlane {
    let max = (1u32 << t) - 1;
    let values = (0..channels * dim * dim).map(|i| (i as u32 * 7 + 3) % (max + 1)).collect();
    SpikeTrainPlane::new(t, channels, dim, values).unwrap()
}

/// One 5x5 convolution over a 9x9 map.
pub fn k5_layer(reorder: bool) -> (Compiled, SpikeTrainPlane) {
    let q = build(InputShape::square(1, 9), vec![LayerSpec::conv(1, 1, 5, 1, 0)], 3, 2, vec![Some(vec![1; 25])], &[0]);
    let dv = DesignVars { reorder, bits: 3, time_steps: 2, ..DesignVars::default() };
    (compile_quantized(q, &dv).unwrap(), ramp(2, 1, 9))
}

/// Mean absolute difference between each layer's float input and its
/// dequantized integer counterpart, over calibration and test inputs.
pub fn layer_errors(t: u32) -> Vec<f64> {
    let net = lenet();
    let samples = calibration(&net);
    let extra = inputs(&net);
    // Large B isolates the activation error.
    let cfg = QuantConfig::new(16, t, 3.0).unwrap();
    let (q, _) = quantize_network(&net, &samples, &cfg, false).unwrap();
    let mut err = vec![0f64; net.layers.len()];
    let mut count = vec![0usize; net.layers.len()];
    for x in samples.iter().chain(&extra) {
        let f = float_forward(&net, x).unwrap();
        let qt = quantized_forward(&q, &q.encode(x).unwrap()).unwrap();
        for l in 0..net.layers.len() {
            let r = q.layers[l].r_act;
            let scale = if l == 0 { 2f64.powi(r) - 1.0 } else { 2f64.powi(r) };
            for (a, &b) in f.inputs[l].data().iter().zip(&qt.inputs[l]) {
                err[l] += (*a as f64 - b as f64 / scale).abs();
                count[l] += 1;
            }
        }
    }
    err.iter().zip(&count).map(|(e, &c)| e / c as f64).collect()
}
