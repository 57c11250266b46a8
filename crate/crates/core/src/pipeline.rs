//! End-to-end driver and the compiled-artifact bundle.
//!
//! ```text
//! bundle/
//!   model/             copy of the source model
//!   design.toml        design variables used
//!   quantized.json     integer network (weights, radix points, shifts)
//!   quant_report.json  per-layer quantization summary
//!   plan.json          hardware plan
//!   program.bin        instruction stream
//!   program.asm        annotated listing
//!   weights/layer{l}.rom
//! ```
//!
//! Bundles are assembled in a temporary sibling directory and renamed into
//! place, so a failed compile never leaves a partial bundle behind.

use std::fs;
use std::path::{Path, PathBuf};

use crate::codegen::{generate, weight_images, CodegenOptions, WeightImage};
use crate::design::DesignVars;
use crate::encoder::{quantize_network, LayerQuantReport, QuantReport, QuantizedNetwork, SpikeTrainPlane};
use crate::error::{Error, Result};
use crate::isa::{disassemble_annotated, read_program, write_program, Program};
use crate::model::format::decode_f32_le;
use crate::model::{save_model, FloatTensor, InputShape, Network};
use crate::oracle::quantized_forward_with;
use crate::planner::{plan, HardwarePlan};
use crate::scalar::Real;
use crate::simulator::{run, SimOptions, SimResult};

/// Everything produced by one compilation.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub quantized: QuantizedNetwork,
    pub quant_report: QuantReport,
    pub plan: HardwarePlan,
    pub program: Program,
    pub roms: Vec<WeightImage>,
}

/// Quantize, plan and generate code.
pub fn compile<F: Real>(net: &Network<F>, samples: &[FloatTensor<F>], dv: &DesignVars) -> Result<Compiled> {
    dv.validate()?;
    let (quantized, quant_report) = quantize_network(net, samples, &dv.quant(), dv.enable_bias)?;
    finish(quantized, quant_report, dv)
}

/// Plans and generates code for an already quantized network; `B`, `T` and
/// `r` are taken from the network.
pub fn compile_quantized(quantized: QuantizedNetwork, dv: &DesignVars) -> Result<Compiled> {
    let mut dv = dv.clone();
    dv.bits = quantized.cfg.bits;
    dv.time_steps = quantized.cfg.time_steps;
    dv.clamp_range = quantized.cfg.clamp_range;
    let report = QuantReport {
        bits: dv.bits,
        time_steps: dv.time_steps,
        clamp_range: dv.clamp_range,
        layers: quantized
            .layers
            .iter()
            .enumerate()
            .map(|(l, q)| LayerQuantReport {
                layer: l,
                notation: q.spec.notation(),
                r_wgt: q.weights.as_ref().map(|w| w.r_wgt),
                r_act: q.r_act,
                v_hat: 0.0,
                shift: q.shift,
                weights: q.weights.as_ref().map_or(0, |w| w.data.len()),
                clamped: q.weights.as_ref().map_or(0, |w| w.clamped),
            })
            .collect(),
    };
    finish(quantized, report, &dv)
}

fn finish(quantized: QuantizedNetwork, quant_report: QuantReport, dv: &DesignVars) -> Result<Compiled> {
    let plan = plan(&quantized.specs(), dv)?;
    let program = generate(&quantized, &plan, CodegenOptions { reorder: dv.reorder })?;
    let roms = weight_images(&quantized, &plan)?;
    Ok(Compiled { quantized, quant_report, plan, program, roms })
}

/// Simulator output next to the oracle's.
#[derive(Debug, Clone)]
pub struct Verification {
    pub sim: SimResult,
    pub oracle: Vec<i64>,
    /// First differing output index.
    pub mismatch: Option<usize>,
}

impl Verification {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }
}

impl Compiled {
    pub fn sim_options(&self) -> SimOptions {
        SimOptions::from_plan(&self.plan)
    }

    pub fn simulate(&self, input: &SpikeTrainPlane) -> Result<SimResult> {
        self.simulate_with(input, self.sim_options())
    }

    pub fn simulate_with(&self, input: &SpikeTrainPlane, opts: SimOptions) -> Result<SimResult> {
        run(&self.program, &self.plan, &self.roms, input, opts)
    }

    pub fn encode<F: Real>(&self, x: &FloatTensor<F>) -> Result<SpikeTrainPlane> {
        self.quantized.encode(x)
    }

    /// Runs the simulator and the integer oracle on the same input.
    pub fn verify(&self, input: &SpikeTrainPlane) -> Result<Verification> {
        let sim = self.simulate(input)?;
        let oracle = quantized_forward_with(&self.quantized, input, self.plan.design.psum_headroom)?.logits;
        let mismatch = if sim.output.len() != oracle.len() {
            Some(sim.output.len().min(oracle.len()))
        } else {
            sim.output.iter().zip(&oracle).position(|(a, b)| a != b)
        };
        Ok(Verification { sim, oracle, mismatch })
    }

    /// Same compilation with a different program (e.g. without reordering).
    pub fn with_program(&self, program: Program) -> Self {
        Self { program, ..self.clone() }
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes") + "\n"
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn rom_name(layer: usize) -> String {
    format!("layer{layer}.rom")
}

fn write_contents<F: Real>(c: &Compiled, net: Option<&Network<F>>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("weights"))?;
    if let Some(net) = net {
        save_model(net, dir.join("model"))?;
    }
    fs::write(dir.join("design.toml"), c.plan.design.to_toml_string())?;
    fs::write(dir.join("quantized.json"), json(&c.quantized))?;
    fs::write(dir.join("quant_report.json"), json(&c.quant_report))?;
    c.plan.save(dir.join("plan.json"))?;
    write_program(&c.program, dir.join("program.bin"))?;
    fs::write(dir.join("program.asm"), disassemble_annotated(&c.program)?)?;
    for rom in &c.roms {
        rom.save(dir.join("weights").join(rom_name(rom.layer)))?;
    }
    Ok(())
}

/// Writes the bundle atomically, replacing an existing bundle at `dir`.
pub fn write_bundle<F: Real>(c: &Compiled, net: Option<&Network<F>>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let name = dir.file_name().ok_or_else(|| Error::Config(format!("bad output path {}", dir.display())))?;
    let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    if let Err(e) = write_contents(c, net, &tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn read_bundle(dir: impl AsRef<Path>) -> Result<Compiled> {
    let dir = dir.as_ref();
    let quantized: QuantizedNetwork = parse_json(&dir.join("quantized.json"))?;
    quantized.validate()?;
    let quant_report: QuantReport = parse_json(&dir.join("quant_report.json"))?;
    let plan = HardwarePlan::load(dir.join("plan.json"))?;
    let program = read_program(dir.join("program.bin"))?;
    program.validate()?;
    let roms = plan
        .weight_mems
        .iter()
        .map(|wm| WeightImage::load(dir.join("weights").join(rom_name(wm.layer))))
        .collect::<Result<Vec<_>>>()?;
    if plan.layers != quantized.specs() {
        return Err(Error::Parse("bundle plan and quantized network disagree".into()));
    }
    Ok(Compiled { quantized, quant_report, plan, program, roms })
}

/// Reads one raw `f32` tensor file (the model blob encoding).
pub fn read_tensor<F: Real>(path: impl AsRef<Path>, shape: InputShape) -> Result<FloatTensor<F>> {
    let path = path.as_ref();
    let values = decode_f32_le(&fs::read(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if values.len() != shape.len() {
        return Err(Error::Shape(format!(
            "{} holds {} values, the network input has {}",
            path.display(),
            values.len(),
            shape.len()
        )));
    }
    FloatTensor::new(vec![shape.channels, shape.height, shape.width], values.into_iter().map(F::from_f32_lossy).collect())
}

/// Reads every `*.bin` file of a directory in name order, or a single file.
pub fn read_tensors<F: Real>(path: impl AsRef<Path>, shape: InputShape) -> Result<Vec<FloatTensor<F>>> {
    let path = path.as_ref();
    if path.is_file() {
        return Ok(vec![read_tensor(path, shape)?]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    files.iter().map(|f| read_tensor(f, shape)).collect()
}
