//! Virtual hardware derivation: processing modules, weight memories and
//! activation buffers.
//!
//! One 2D module is created per distinct `(kind, K)` pair in network order.
//! Its column count `X` is the output width of the first layer it serves
//! (or a `pm_width` override). Each later layer packs as many output
//! channels side by side as fit into those columns. Convolution modules may
//! be replicated; every replica gets its own module id. A single 1D module
//! serves all fully-connected layers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::design::{DesignVars, MAX_MODULES};
use crate::encoder::QuantConfig;
use crate::error::{Error, Result};
use crate::isa::mem;
use crate::model::LayerSpec;

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PmKind {
    Conv,
    Pool,
}

impl PmKind {
    pub fn of(spec: &LayerSpec) -> Option<Self> {
        match spec {
            LayerSpec::Conv2d(_) => Some(PmKind::Conv),
            LayerSpec::Pool2d(_) => Some(PmKind::Pool),
            LayerSpec::Linear(_) => None,
        }
    }

    /// Key used for `pm_width` overrides, e.g. `conv5`.
    pub fn key(self, kernel: usize) -> String {
        match self {
            PmKind::Conv => format!("conv{kernel}"),
            PmKind::Pool => format!("pool{kernel}"),
        }
    }
}

/// Column window `[start, end]` holding one output channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

/// How one layer occupies a 2D module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAssignment {
    pub layer: usize,
    /// Output channels computed side by side (`P`).
    pub parallel: usize,
    pub windows: Vec<Window>,
    pub stride: usize,
    pub out_dim: usize,
    /// Column occupancy in percent.
    pub utilization: f64,
    /// Column occupancy in percent with a single channel.
    pub utilization_single: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmConfig2D {
    pub kind: PmKind,
    /// `Y`, the kernel size.
    pub rows: usize,
    /// `X`.
    pub cols: usize,
    pub replicas: usize,
    /// Module id of replica 0; replicas use consecutive ids.
    pub first_module: usize,
    pub strides: Vec<usize>,
    pub layers: Vec<LayerAssignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmConfig1D {
    pub module: usize,
    pub parallel_features: usize,
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    OnChipRom,
    ExternalStaged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightMemConfig {
    pub layer: usize,
    /// Bits per row (`W`).
    pub width_bits: usize,
    /// Rows (`H`).
    pub rows: usize,
    /// Weights per row.
    pub row_values: usize,
    pub storage: Storage,
}

impl WeightMemConfig {
    pub fn bits(&self) -> u64 {
        (self.width_bits * self.rows) as u64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferDims {
    pub width: usize,
    pub height: usize,
}

impl BufferDims {
    pub fn bits(&self) -> u64 {
        (self.width * self.height) as u64
    }

    fn grow(&mut self, width: usize, height: usize) {
        self.width = self.width.max(width);
        self.height = self.height.max(height);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferConfig {
    pub ping: BufferDims,
    pub pong: BufferDims,
    /// Flat buffers: one row per time step, one column per feature.
    pub ping1d: BufferDims,
    pub pong1d: BufferDims,
}

impl BufferConfig {
    pub fn bits(&self) -> u64 {
        self.ping.bits() + self.pong.bits() + self.ping1d.bits() + self.pong1d.bits()
    }

    pub fn dims(&self, mem_id: u8) -> Option<BufferDims> {
        match mem_id {
            mem::PING2D => Some(self.ping),
            mem::PONG2D => Some(self.pong),
            mem::PING1D => Some(self.ping1d),
            mem::PONG1D => Some(self.pong1d),
            _ => None,
        }
    }
}

/// Where one layer runs and which memories it touches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRoute {
    pub layer: usize,
    pub first_module: usize,
    /// Replicas available to the layer.
    pub modules: usize,
    /// Output channels per module (`P`), or parallel features for linear
    /// layers.
    pub parallel: usize,
    pub src: u8,
    pub dst: u8,
    pub weight_mem: Option<usize>,
}

impl LayerRoute {
    /// Channels (or features) handled by one group of modules.
    pub fn group_size(&self) -> usize {
        self.parallel * self.modules
    }

    pub fn module_mask(&self, count: usize) -> u32 {
        ((1u32 << count) - 1) << self.first_module
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwarePlan {
    pub version: u32,
    pub design: DesignVars,
    pub layers: Vec<LayerSpec>,
    pub pms_2d: Vec<PmConfig2D>,
    pub pm_1d: Option<PmConfig1D>,
    pub storage: Storage,
    pub weight_mems: Vec<WeightMemConfig>,
    /// Staging RAM for externally stored weights.
    pub staging: Option<BufferDims>,
    pub buffers: BufferConfig,
    pub routes: Vec<LayerRoute>,
    pub module_count: usize,
    pub onchip_bits: u64,
}

impl HardwarePlan {
    pub fn quant(&self) -> QuantConfig {
        self.design.quant()
    }

    pub fn route(&self, layer: usize) -> Option<&LayerRoute> {
        self.routes.get(layer)
    }

    pub fn weight_mem(&self, layer: usize) -> Option<&WeightMemConfig> {
        self.weight_mems.iter().find(|w| w.layer == layer)
    }

    pub fn assignment(&self, layer: usize) -> Option<(&PmConfig2D, &LayerAssignment)> {
        self.pms_2d
            .iter()
            .find_map(|pm| pm.layers.iter().find(|a| a.layer == layer).map(|a| (pm, a)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::Parse(format!("plan file: {e}")))?;
        if plan.version != PLAN_VERSION {
            return Err(Error::Parse(format!("unsupported plan version {}", plan.version)));
        }
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Column windows for up to `limit` output channels in an `x`-wide module.
///
/// Candidate `p` starts at `floor(p·(D_in + pad)/str)` and spans `D_out`
/// columns. Channel 0 is always placed. A further channel is kept while its
/// window ends inside the module, the input span feeding it
/// (`floor((D_in + pad)/str)` columns) fits, and it starts after the
/// previous window; the first candidate that fails ends the packing.
pub fn channel_windows(x: usize, d_in: usize, pad: usize, stride: usize, d_out: usize, limit: usize) -> Vec<Window> {
    let pitch = (d_in + pad) / stride;
    let candidates = (x / d_out).max(1).min(limit.max(1));
    let mut windows: Vec<Window> = Vec::with_capacity(candidates);
    for p in 0..candidates {
        let start = p * (d_in + pad) / stride;
        let w = Window { start, end: start + d_out - 1 };
        if p > 0 {
            let prev = windows[p - 1];
            if w.end > x - 1 || start + pitch > x || start <= prev.end {
                break;
            }
        }
        windows.push(w);
    }
    windows
}

/// `100 · P · D_out / X`.
pub fn utilization(x: usize, parallel: usize, d_out: usize) -> f64 {
    100.0 * (parallel * d_out) as f64 / x as f64
}

/// Creates the processing modules and assigns every layer.
pub fn plan_pms(layers: &[LayerSpec], dv: &DesignVars) -> Result<(Vec<PmConfig2D>, Option<PmConfig1D>)> {
    let mut pms: Vec<PmConfig2D> = Vec::new();
    let mut next_module = 0usize;
    for (l, spec) in layers.iter().enumerate() {
        let Some(kind) = PmKind::of(spec) else { continue };
        let k = spec.kernel();
        let idx = match pms.iter().position(|pm| pm.kind == kind && pm.rows == k) {
            Some(i) => i,
            None => {
                let replicas = if kind == PmKind::Conv { dv.conv_replicas } else { 1 };
                let cols = dv.pm_width.get(&kind.key(k)).copied().unwrap_or(spec.out_dim());
                pms.push(PmConfig2D {
                    kind,
                    rows: k,
                    cols,
                    replicas,
                    first_module: next_module,
                    strides: Vec::new(),
                    layers: Vec::new(),
                });
                next_module += replicas;
                pms.len() - 1
            }
        };
        let pm = &mut pms[idx];
        let d_out = spec.out_dim();
        if d_out > pm.cols {
            return Err(Error::Plan(format!(
                "layer {l} ({}) needs {d_out} columns but module {} has X = {}",
                spec.notation(),
                kind.key(k),
                pm.cols
            )));
        }
        let limit = if dv.intra_parallel { spec.out_channels() } else { 1 };
        let windows = channel_windows(pm.cols, spec.in_dim(), spec.padding(), spec.stride(), d_out, limit);
        if !pm.strides.contains(&spec.stride()) {
            pm.strides.push(spec.stride());
        }
        pm.layers.push(LayerAssignment {
            layer: l,
            parallel: windows.len(),
            utilization: utilization(pm.cols, windows.len(), d_out),
            utilization_single: utilization(pm.cols, 1, d_out),
            windows,
            stride: spec.stride(),
            out_dim: d_out,
        });
    }
    let linear: Vec<usize> = layers.iter().enumerate().filter(|(_, s)| !s.is_2d()).map(|(l, _)| l).collect();
    let pm_1d = if linear.is_empty() {
        None
    } else {
        let max_out = linear.iter().map(|&l| layers[l].out_channels()).max().unwrap();
        let parallel_features = ((dv.weight_row_bits / dv.bits) as usize).min(max_out).max(1);
        let module = next_module;
        next_module += 1;
        Some(PmConfig1D { module, parallel_features, layers: linear })
    };
    if next_module > MAX_MODULES {
        return Err(Error::Plan(format!("{next_module} processing modules exceed the limit of {MAX_MODULES}")));
    }
    Ok((pms, pm_1d))
}

/// Weight-memory geometry of one layer: `(W bits, H rows, values per row)`.
fn weight_geometry(spec: &LayerSpec, bits: u32, parallel_features: usize) -> Option<(usize, usize, usize)> {
    let b = bits as usize;
    match spec {
        LayerSpec::Conv2d(c) => {
            let kk = c.kernel * c.kernel;
            Some((kk * b, c.out_channels * c.in_channels, kk))
        }
        LayerSpec::Linear(lin) => {
            let f = parallel_features.min(lin.out_features);
            Some((f * b, lin.out_features.div_ceil(f) * lin.in_features, f))
        }
        LayerSpec::Pool2d(_) => None,
    }
}

/// Sizes one ROM per weight layer, or a single staging RAM when the ROMs
/// plus `reserved_bits` of buffers exceed the capacity.
pub fn plan_weight_memory(
    layers: &[LayerSpec],
    cfg: &QuantConfig,
    capacity: u64,
    reserved_bits: u64,
    parallel_features: usize,
    force_external: bool,
) -> Result<(Storage, Vec<WeightMemConfig>, Option<BufferDims>)> {
    let mut mems: Vec<WeightMemConfig> = layers
        .iter()
        .enumerate()
        .filter_map(|(l, s)| {
            weight_geometry(s, cfg.bits, parallel_features).map(|(w, h, v)| WeightMemConfig {
                layer: l,
                width_bits: w,
                rows: h,
                row_values: v,
                storage: Storage::OnChipRom,
            })
        })
        .collect();
    let rom_bits: u64 = mems.iter().map(WeightMemConfig::bits).sum();
    if !force_external && rom_bits + reserved_bits <= capacity {
        return Ok((Storage::OnChipRom, mems, None));
    }
    let mut staging = BufferDims::default();
    for m in mems.iter_mut() {
        m.storage = Storage::ExternalStaged;
        staging.grow(m.width_bits, m.rows);
    }
    let required = staging.bits() + reserved_bits;
    if required > capacity {
        return Err(Error::Capacity { required, available: capacity });
    }
    log::info!("weights ({rom_bits} bits) staged from external memory");
    Ok((Storage::ExternalStaged, mems, Some(staging)))
}

/// Ping-pong sizing: 2D layer inputs alternate between ping and pong, each
/// buffer tracking the maximum width `D_in` and height `D_in·C_in·T`. Flat
/// layer inputs alternate the same way between the 1D pair.
pub fn plan_buffers(layers: &[LayerSpec], time_steps: u32) -> BufferConfig {
    let t = time_steps as usize;
    let mut cfg = BufferConfig::default();
    let (mut n2, mut n1) = (0, 0);
    for spec in layers {
        if spec.is_2d() {
            let buf = if n2 % 2 == 0 { &mut cfg.ping } else { &mut cfg.pong };
            buf.grow(spec.in_dim(), spec.in_dim() * spec.in_channels() * t);
            n2 += 1;
        } else {
            let buf = if n1 % 2 == 0 { &mut cfg.ping1d } else { &mut cfg.pong1d };
            buf.grow(spec.in_channels(), t);
            n1 += 1;
        }
    }
    cfg
}

fn routes(layers: &[LayerSpec], pms: &[PmConfig2D], pm_1d: Option<&PmConfig1D>) -> Vec<LayerRoute> {
    let src_of = |l: usize| -> u8 {
        let spec = &layers[l];
        let n = layers[..l].iter().filter(|s| s.is_2d() == spec.is_2d()).count();
        match (spec.is_2d(), n % 2) {
            (true, 0) => mem::PING2D,
            (true, _) => mem::PONG2D,
            (false, 0) => mem::PING1D,
            (false, _) => mem::PONG1D,
        }
    };
    let mut weight_idx = 0;
    (0..layers.len())
        .map(|l| {
            let spec = &layers[l];
            let dst = if l + 1 < layers.len() { src_of(l + 1) } else { mem::OUTPUT };
            let weight_mem = spec.has_weights().then(|| {
                weight_idx += 1;
                weight_idx - 1
            });
            let (first_module, modules, parallel) = match PmKind::of(spec) {
                Some(_) => {
                    let pm = pms.iter().find(|pm| pm.layers.iter().any(|a| a.layer == l)).unwrap();
                    let a = pm.layers.iter().find(|a| a.layer == l).unwrap();
                    (pm.first_module, pm.replicas, a.parallel)
                }
                None => {
                    let pm = pm_1d.unwrap();
                    (pm.module, 1, pm.parallel_features.min(spec.out_channels()))
                }
            };
            LayerRoute { layer: l, first_module, modules, parallel, src: src_of(l), dst, weight_mem }
        })
        .collect()
}

/// Full hardware plan for a shape-inferred layer list.
pub fn plan(layers: &[LayerSpec], dv: &DesignVars) -> Result<HardwarePlan> {
    dv.validate()?;
    if layers.is_empty() {
        return Err(Error::Plan("network has no layers".into()));
    }
    let cfg = dv.quant();
    let (pms_2d, pm_1d) = plan_pms(layers, dv)?;
    let buffers = plan_buffers(layers, cfg.time_steps);
    let pf = pm_1d.as_ref().map_or(1, |p| p.parallel_features);
    let (storage, weight_mems, staging) =
        plan_weight_memory(layers, &cfg, dv.onchip_capacity_bits, buffers.bits(), pf, dv.force_external)?;
    let onchip_bits = buffers.bits()
        + match staging {
            Some(s) => s.bits(),
            None => weight_mems.iter().map(WeightMemConfig::bits).sum(),
        };
    let routes = routes(layers, &pms_2d, pm_1d.as_ref());
    let module_count = pms_2d.iter().map(|p| p.replicas).sum::<usize>() + pm_1d.iter().count();
    Ok(HardwarePlan {
        version: PLAN_VERSION,
        design: dv.clone(),
        layers: layers.to_vec(),
        pms_2d,
        pm_1d,
        storage,
        weight_mems,
        staging,
        buffers,
        routes,
        module_count,
        onchip_bits,
    })
}
