//! Functional and cycle-cost simulator of the accelerator.
//!
//! A scalar decoder fetches one instruction at a time. Processing modules
//! run concurrently with it: `PROC`/`LIN` apply their arithmetic when issued
//! and keep the module busy for a number of cycles, and `WAIT` stalls the
//! decoder until the module is idle again. Reading results (`ACTS`),
//! loading kernels or resetting a busy module is a fault, so a program with
//! a missing `WAIT` cannot silently produce right answers.
//!
//! Cycle costs: every instruction takes one decode cycle; `ACTL`/`ACTS`
//! take two in total; `KERL` takes two per kernel row; `KERD` adds the
//! external-memory penalty per row; `WAIT` takes the remaining busy time
//! plus one. A convolution `PROC` keeps the module busy `K + 3` cycles, a
//! pooling `PROC` one cycle per window row, a `LIN` `F_in + 3` cycles.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::codegen::WeightImage;
use crate::encoder::{psum_bits, psum_fits, requantize, round_shift, SpikeTrainPlane};
use crate::error::{Error, Result};
use crate::isa::{self, cond, mem, param, value_to_signed, Instruction, Opcode, Program};
use crate::model::LayerSpec;
use crate::planner::{HardwarePlan, PmKind, Storage};

pub const PROC_OVERHEAD: u64 = 3;
pub const ACT_TRANSFER_CYCLES: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub trace: bool,
    pub psum_headroom: u32,
    pub external_penalty_cycles: u64,
    /// Cost of one kernel row moved by `KERL`/`KERD`.
    pub kernel_load_cycles: u64,
    pub clock_mhz: f64,
}

impl SimOptions {
    pub fn from_plan(plan: &HardwarePlan) -> Self {
        Self {
            trace: false,
            psum_headroom: plan.design.psum_headroom,
            external_penalty_cycles: plan.design.external_penalty_cycles as u64,
            kernel_load_cycles: plan.design.kernel_load_cycles as u64,
            clock_mhz: plan.design.clock_mhz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ModKind {
    Conv,
    Pool,
    Linear,
}

/// Layer configuration latched into a module by `ENA`.
#[derive(Debug, Clone, Copy)]
struct LayerCfg {
    layer: usize,
    kind: u32,
    in_dim: usize,
    out_dim: usize,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    parallel: usize,
    shift: u32,
    wmem: usize,
    base: usize,
    /// Position of this module among the enabled ones.
    rank: usize,
    psum_bits: u32,
}

#[derive(Debug, Clone)]
struct ConvRow {
    t: u32,
    ci: usize,
    y: usize,
    bits: Vec<bool>,
}

#[derive(Debug, Clone)]
struct Module {
    kind: ModKind,
    rows: usize,
    /// Columns for 2D modules, parallel features for the 1D module.
    width: usize,
    cfg: Option<LayerCfg>,
    /// Per slot: input channel and `K×K` weights.
    kernels: Vec<Option<(usize, Vec<i32>)>>,
    conv_row: Option<ConvRow>,
    /// Per slot: window row index and `T`-bit values.
    pool_rows: Vec<Option<(usize, Vec<u32>)>>,
    lin_row: Option<(u32, Vec<bool>)>,
    psum: Vec<Vec<i64>>,
    busy_until: u64,
    busy_cycles: u64,
}

impl Module {
    fn clear_pipeline(&mut self) {
        self.kernels.iter_mut().for_each(|k| *k = None);
        self.pool_rows.iter_mut().for_each(|r| *r = None);
        self.conv_row = None;
        self.lin_row = None;
    }
}

/// Bit-addressed activation memory.
#[derive(Debug, Clone)]
struct BitMem {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BitMem {
    fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCycles {
    pub layer: usize,
    pub notation: String,
    pub cycles: u64,
    pub latency_us: f64,
    pub instructions: u64,
    pub comm_cycles: u64,
    pub wait_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleReport {
    pub module: usize,
    pub kind: String,
    pub busy_cycles: u64,
    pub utilization: f64,
}

/// Execution statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub total_cycles: u64,
    pub clock_mhz: f64,
    pub latency_us: f64,
    pub instructions: u64,
    pub instructions_per_clock: f64,
    /// Cycles spent moving activations and weights (`ACTL`, `ACTS`, `KERL`,
    /// `KERD`).
    pub comm_cycles: u64,
    /// Decoder stall cycles inside `WAIT`.
    pub wait_cycles: u64,
    /// Everything else (configuration and command issue).
    pub control_cycles: u64,
    /// Conditional additions performed by the processing modules.
    pub conditional_adds: u64,
    pub layers: Vec<LayerCycles>,
    pub modules: Vec<ModuleReport>,
    pub opcode_counts: BTreeMap<String, u64>,
}

impl SimReport {
    pub fn layer_cycles(&self, layer: usize) -> u64 {
        self.layers.iter().find(|l| l.layer == layer).map_or(0, |l| l.cycles)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "cycles        {}", self.total_cycles).unwrap();
        writeln!(s, "latency       {:.1} us @ {} MHz", self.latency_us, self.clock_mhz).unwrap();
        writeln!(s, "instructions  {} ({:.3} per clock)", self.instructions, self.instructions_per_clock).unwrap();
        writeln!(
            s,
            "split         comm {} / wait {} / control {}",
            self.comm_cycles, self.wait_cycles, self.control_cycles
        )
        .unwrap();
        writeln!(s, "cond. adds    {}", self.conditional_adds).unwrap();
        writeln!(s, "layer  name      cycles    time[us]").unwrap();
        for l in &self.layers {
            writeln!(s, "{:>5}  {:<8} {:>8}  {:>9.1}", l.layer, l.notation, l.cycles, l.latency_us).unwrap();
        }
        writeln!(s, "module kind   busy      util").unwrap();
        for m in &self.modules {
            writeln!(s, "{:>6} {:<6} {:>8}  {:>5.1}%", m.module, m.kind, m.busy_cycles, 100.0 * m.utilization).unwrap();
        }
        s
    }
}

/// One executed instruction, recorded when tracing is enabled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub cycle: u64,
    pub pc: usize,
    pub cost: u64,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub output: Vec<i64>,
    pub report: SimReport,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Default, Clone)]
struct LayerStats {
    cycles: u64,
    instructions: u64,
    comm: u64,
    wait: u64,
}

/// Machine state.
pub struct Machine<'a> {
    plan: &'a HardwarePlan,
    roms: &'a [WeightImage],
    program: &'a [Instruction],
    opts: SimOptions,
    pc: usize,
    cycle: u64,
    halted: bool,
    regs: [u32; 32],
    active: u32,
    modules: Vec<Module>,
    bufs: [BitMem; 4],
    output: Vec<i64>,
    /// External staging RAM contents: weight memory and first row held.
    staged: Option<(usize, usize, usize)>,
    layer: Option<usize>,
    layer_stats: BTreeMap<usize, LayerStats>,
    comm: u64,
    wait: u64,
    control: u64,
    cond_adds: u64,
    opcode_counts: BTreeMap<String, u64>,
    trace: Option<Vec<TraceEntry>>,
}

fn buf_index(mem_id: u8) -> Option<usize> {
    match mem_id {
        mem::PING2D => Some(0),
        mem::PONG2D => Some(1),
        mem::PING1D => Some(2),
        mem::PONG1D => Some(3),
        _ => None,
    }
}

impl<'a> Machine<'a> {
    pub fn new(plan: &'a HardwarePlan, roms: &'a [WeightImage], program: &'a Program, opts: SimOptions) -> Result<Self> {
        if roms.len() != plan.weight_mems.len() {
            return Err(Error::Plan(format!(
                "plan has {} weight memories, {} images supplied",
                plan.weight_mems.len(),
                roms.len()
            )));
        }
        for (img, wm) in roms.iter().zip(&plan.weight_mems) {
            if img.layer != wm.layer || img.rows != wm.rows || img.row_values != wm.row_values {
                return Err(Error::Plan(format!("weight image for layer {} does not match the plan", img.layer)));
            }
        }
        let mut modules = Vec::with_capacity(plan.module_count);
        for pm in &plan.pms_2d {
            let kind = if pm.kind == PmKind::Conv { ModKind::Conv } else { ModKind::Pool };
            let slots = pm.layers.iter().map(|a| a.parallel).max().unwrap_or(1);
            for _ in 0..pm.replicas {
                modules.push(Module {
                    kind,
                    rows: pm.rows,
                    width: pm.cols,
                    cfg: None,
                    kernels: vec![None; slots],
                    conv_row: None,
                    pool_rows: vec![None; slots],
                    lin_row: None,
                    psum: Vec::new(),
                    busy_until: 0,
                    busy_cycles: 0,
                });
            }
        }
        if let Some(pm) = &plan.pm_1d {
            modules.push(Module {
                kind: ModKind::Linear,
                rows: 1,
                width: pm.parallel_features,
                cfg: None,
                kernels: Vec::new(),
                conv_row: None,
                pool_rows: Vec::new(),
                lin_row: None,
                psum: Vec::new(),
                busy_until: 0,
                busy_cycles: 0,
            });
        }
        let b = plan.buffers;
        let bufs = [
            BitMem::new(b.ping.width, b.ping.height),
            BitMem::new(b.pong.width, b.pong.height),
            BitMem::new(b.ping1d.width, b.ping1d.height),
            BitMem::new(b.pong1d.width, b.pong1d.height),
        ];
        let out_len = plan.layers.last().map_or(0, LayerSpec::output_len);
        Ok(Self {
            plan,
            roms,
            program: &program.instructions,
            opts,
            pc: 0,
            cycle: 0,
            halted: false,
            regs: [0; 32],
            active: 0,
            modules,
            bufs,
            output: vec![0; out_len],
            staged: None,
            layer: None,
            layer_stats: BTreeMap::new(),
            comm: 0,
            wait: 0,
            control: 0,
            cond_adds: 0,
            opcode_counts: BTreeMap::new(),
            trace: opts.trace.then(Vec::new),
        })
    }

    fn fault(&self, reason: impl Into<String>) -> Error {
        Error::SimFault { cycle: self.cycle, pc: self.pc, reason: reason.into() }
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn pc(&self) -> usize {
        self.pc
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    /// Cycle at which `module` becomes idle.
    pub fn busy_until(&self, module: usize) -> Option<u64> {
        self.modules.get(module).map(|m| m.busy_until)
    }

    /// Writes the encoded network input into the first layer's buffer.
    pub fn load_input(&mut self, input: &SpikeTrainPlane) -> Result<()> {
        let first = self.plan.layers.first().ok_or_else(|| Error::Plan("empty plan".into()))?;
        let t_steps = self.plan.design.time_steps;
        if input.time_steps != t_steps {
            return Err(Error::Shape(format!("input has T = {}, hardware expects {t_steps}", input.time_steps)));
        }
        if input.len() != first.input_len() {
            return Err(Error::Shape(format!("input has {} neurons, first layer expects {}", input.len(), first.input_len())));
        }
        if first.is_2d() {
            let (c_in, d) = (first.in_channels(), first.in_dim());
            if input.channels != c_in || input.dim != d {
                return Err(Error::Shape(format!("input is {}x{}x{}, expected {c_in}x{d}x{d}", input.channels, input.dim, input.dim)));
            }
            let buf = &mut self.bufs[0];
            for t in 0..t_steps as usize {
                for c in 0..c_in {
                    for y in 0..d {
                        let row = (t * c_in + c) * d + y;
                        for x in 0..d {
                            buf.bits[row * buf.width + x] = input.values[(c * d + y) * d + x] >> t & 1 == 1;
                        }
                    }
                }
            }
        } else {
            let f = first.in_channels();
            let buf = &mut self.bufs[2];
            for t in 0..t_steps as usize {
                for i in 0..f {
                    buf.bits[t * f + i] = input.values[i] >> t & 1 == 1;
                }
            }
        }
        Ok(())
    }

    fn reg(&self, p: u8) -> usize {
        self.regs[p as usize] as usize
    }

    fn src_mem(&self) -> u8 {
        let pp = self.regs[param::PING_PONG as usize];
        match (pp & param::PP_SRC_1D != 0, pp & param::PP_SRC_PONG != 0) {
            (false, false) => mem::PING2D,
            (false, true) => mem::PONG2D,
            (true, false) => mem::PING1D,
            (true, true) => mem::PONG1D,
        }
    }

    fn dst_mem(&self) -> u8 {
        let pp = self.regs[param::PING_PONG as usize];
        let src = self.src_mem();
        if pp & param::PP_DST_OUTPUT != 0 {
            mem::OUTPUT
        } else if pp & param::PP_DST_1D != 0 {
            if src == mem::PING1D {
                mem::PONG1D
            } else {
                mem::PING1D
            }
        } else if src == mem::PING2D {
            mem::PONG2D
        } else {
            mem::PING2D
        }
    }

    fn enabled(&self) -> Vec<usize> {
        (0..self.modules.len()).filter(|&m| self.active >> m & 1 == 1).collect()
    }

    fn module_by_rank(&self, rank: usize) -> Result<usize> {
        self.enabled()
            .get(rank)
            .copied()
            .ok_or_else(|| self.fault(format!("no enabled module for replica {rank}")))
    }

    fn mask_modules(&self, mask: u32) -> Result<Vec<usize>> {
        if mask >> self.modules.len() != 0 || mask == 0 {
            return Err(self.fault(format!("module mask {mask:#x} selects missing modules")));
        }
        Ok((0..self.modules.len()).filter(|&m| mask >> m & 1 == 1).collect())
    }

    fn configured(&self, m: usize) -> Result<LayerCfg> {
        if self.active >> m & 1 == 0 {
            return Err(self.fault(format!("module {m} is not enabled")));
        }
        self.modules[m].cfg.ok_or_else(|| self.fault(format!("module {m} is unconfigured")))
    }

    fn ensure_idle(&self, m: usize, what: &str) -> Result<()> {
        if self.modules[m].busy_until > self.cycle {
            return Err(self.fault(format!("{what} while module {m} is busy")));
        }
        Ok(())
    }

    /// Locates the module and slot computing output channel `co`.
    fn channel_slot(&self, co: usize) -> Result<(usize, usize)> {
        let base = self.reg(param::GROUP_BASE);
        let p = self.reg(param::PARALLEL).max(1);
        if co < base {
            return Err(self.fault(format!("channel {co} precedes group base {base}")));
        }
        let m = self.module_by_rank((co - base) / p)?;
        let cfg = self.configured(m)?;
        let slot = (co - base) % p;
        if co >= cfg.out_ch || slot >= cfg.parallel {
            return Err(self.fault(format!("channel {co} is not mapped to any slot")));
        }
        Ok((m, slot))
    }

    fn exec_ena(&mut self, mask: u32) -> Result<()> {
        let ids = self.mask_modules(mask)?;
        let kind = self.regs[param::LAYER_KIND as usize];
        let layer = self.reg(param::LAYER_ID);
        let spec = *self.plan.layers.get(layer).ok_or_else(|| self.fault(format!("unknown layer {layer}")))?;
        let bits = self.plan.design.bits;
        let t_steps = self.reg(param::TIME_STEPS) as u32;
        let mut cfg = LayerCfg {
            layer,
            kind,
            in_dim: self.reg(param::IN_DIM),
            out_dim: self.reg(param::OUT_DIM),
            in_ch: self.reg(param::IN_CHANNELS),
            out_ch: self.reg(param::OUT_CHANNELS),
            kernel: self.reg(param::KERNEL),
            stride: self.reg(param::STRIDE),
            pad: self.reg(param::PADDING),
            parallel: self.reg(param::PARALLEL),
            shift: self.regs[param::SHIFT as usize],
            wmem: self.reg(param::WEIGHT_MEM),
            base: self.reg(param::GROUP_BASE),
            rank: 0,
            psum_bits: psum_bits(bits, t_steps, spec.fan_in(), self.opts.psum_headroom),
        };
        if t_steps != self.plan.design.time_steps {
            return Err(self.fault(format!("TIME_STEPS = {t_steps} but the hardware was built for {}", self.plan.design.time_steps)));
        }
        if cfg.parallel == 0 || cfg.stride == 0 || cfg.kernel == 0 || cfg.out_dim == 0 {
            return Err(self.fault("zero-sized layer configuration"));
        }
        for (rank, &m) in ids.iter().enumerate() {
            self.ensure_idle(m, "ENA")?;
            let module = &self.modules[m];
            let fits = match (module.kind, kind) {
                (ModKind::Conv, param::KIND_CONV) | (ModKind::Pool, param::KIND_AVG_POOL | param::KIND_MAX_POOL) => {
                    module.rows == cfg.kernel && cfg.parallel * cfg.out_dim <= module.width && cfg.parallel <= module.kernels.len()
                }
                (ModKind::Linear, param::KIND_LINEAR) => cfg.parallel <= module.width,
                _ => false,
            };
            if !fits {
                return Err(self.fault(format!("module {m} cannot run layer {layer} with this configuration")));
            }
            cfg.rank = rank;
            let module = &mut self.modules[m];
            module.cfg = Some(cfg);
            module.clear_pipeline();
            module.psum = match module.kind {
                ModKind::Linear => vec![vec![0; cfg.parallel]],
                _ => vec![vec![0; cfg.out_dim * cfg.out_dim]; cfg.parallel],
            };
        }
        self.active = mask;
        Ok(())
    }

    fn exec_conf(&mut self, p: u8, value: u32) -> Result<()> {
        if param::name(p).is_none() {
            return Err(self.fault(format!("unknown configuration register {p}")));
        }
        self.regs[p as usize] = value;
        match p {
            param::LAYER_ID => self.layer = Some(value as usize),
            param::BIAS_VALUE => {
                let co = self.reg(param::BIAS_CHANNEL);
                let v = value_to_signed(value);
                if self.regs[param::LAYER_KIND as usize] == param::KIND_LINEAR {
                    let m = self.module_by_rank(0)?;
                    let cfg = self.configured(m)?;
                    let k = co.checked_sub(cfg.base).filter(|&k| k < cfg.parallel && co < cfg.out_ch);
                    let k = k.ok_or_else(|| self.fault(format!("bias for feature {co} outside the group")))?;
                    self.modules[m].psum[0][k] += v;
                } else {
                    let (m, slot) = self.channel_slot(co)?;
                    self.modules[m].psum[slot].iter_mut().for_each(|s| *s += v);
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn exec_actl(&mut self, mem_id: u8, addr: usize) -> Result<()> {
        if mem_id != self.src_mem() {
            return Err(self.fault(format!("ACTL from memory {mem_id} but the layer reads {}", self.src_mem())));
        }
        let a = addr
            .checked_sub(self.reg(param::ACT_BASE))
            .ok_or_else(|| self.fault("address below activation base"))?;
        let t_steps = self.reg(param::TIME_STEPS);
        let b = buf_index(mem_id).unwrap();
        let kind = self.regs[param::LAYER_KIND as usize];
        if kind == param::KIND_LINEAR {
            let f = self.reg(param::IN_CHANNELS);
            let buf = &self.bufs[b];
            if a >= t_steps || (a + 1) * f > buf.bits.len() {
                return Err(self.fault(format!("ACTL address {a} outside the flat buffer")));
            }
            let bits = buf.bits[a * f..(a + 1) * f].to_vec();
            let m = self.module_by_rank(0)?;
            self.configured(m)?;
            self.modules[m].lin_row = Some((a as u32, bits));
            return Ok(());
        }
        let (d, c_in) = (self.reg(param::IN_DIM), self.reg(param::IN_CHANNELS));
        let buf = &self.bufs[b];
        if d == 0 || c_in == 0 || a >= d * c_in * t_steps || a >= buf.height || d > buf.width {
            return Err(self.fault(format!("ACTL row {a} outside buffer {mem_id}")));
        }
        let bits = buf.bits[a * buf.width..a * buf.width + d].to_vec();
        let (y, c, t) = (a % d, a / d % c_in, a / d / c_in);
        match kind {
            param::KIND_CONV => {
                for m in self.enabled() {
                    self.configured(m)?;
                    self.modules[m].conv_row = Some(ConvRow { t: t as u32, ci: c, y, bits: bits.clone() });
                }
            }
            param::KIND_AVG_POOL | param::KIND_MAX_POOL => {
                let m = self.module_by_rank(0)?;
                let cfg = self.configured(m)?;
                let slot = c
                    .checked_sub(cfg.base)
                    .filter(|&s| s < cfg.parallel)
                    .ok_or_else(|| self.fault(format!("channel {c} outside the pooling group")))?;
                if let Some((row, _)) = &self.modules[m].pool_rows[slot] {
                    if *row != y {
                        return Err(self.fault(format!("slot {slot} already holds row {row}, got row {y}")));
                    }
                }
                let latch = &mut self.modules[m].pool_rows[slot];
                match latch {
                    Some((_, vals)) => {
                        for (v, &s) in vals.iter_mut().zip(&bits) {
                            *v |= (s as u32) << t;
                        }
                    }
                    None => *latch = Some((y, bits.iter().map(|&s| (s as u32) << t).collect())),
                }
            }
            _ => return Err(self.fault(format!("unknown layer kind {kind}"))),
        }
        Ok(())
    }

    fn check_psum(&self, cfg: &LayerCfg, v: i64) -> Result<()> {
        if !psum_fits(v, cfg.psum_bits) {
            return Err(self.fault(format!(
                "layer {}: partial sum {v} exceeds the {}-bit accumulator",
                cfg.layer, cfg.psum_bits
            )));
        }
        Ok(())
    }

    fn exec_proc(&mut self, mask: u32) -> Result<()> {
        for m in self.mask_modules(mask)? {
            let cfg = self.configured(m)?;
            self.ensure_idle(m, "PROC")?;
            let busy = match self.modules[m].kind {
                ModKind::Conv => {
                    let row = self.modules[m].conv_row.take().ok_or_else(|| self.fault(format!("PROC on module {m} without a row")))?;
                    self.conv_row(m, &cfg, &row)?;
                    cfg.kernel as u64 + PROC_OVERHEAD
                }
                ModKind::Pool => {
                    self.pool_row(m, &cfg)?;
                    1
                }
                ModKind::Linear => return Err(self.fault("PROC issued to the 1D module")),
            };
            let module = &mut self.modules[m];
            module.busy_until = self.cycle + 1 + busy;
            module.busy_cycles += busy;
        }
        Ok(())
    }

    /// Accumulates one input row into every output row it touches.
    fn conv_row(&mut self, m: usize, cfg: &LayerCfg, row: &ConvRow) -> Result<()> {
        let (k, d_out, d_in) = (cfg.kernel, cfg.out_dim, cfg.in_dim);
        let (stride, pad) = (cfg.stride as isize, cfg.pad as isize);
        let first = cfg.base + cfg.rank * cfg.parallel;
        let mut adds = 0u64;
        for s in 0..cfg.parallel {
            if first + s >= cfg.out_ch {
                break;
            }
            let kernel = match &self.modules[m].kernels[s] {
                Some((ci, w)) if *ci == row.ci => w.clone(),
                Some((ci, _)) => {
                    return Err(self.fault(format!("slot {s} holds kernels of channel {ci}, row is from {}", row.ci)))
                }
                None => return Err(self.fault(format!("PROC on module {m} slot {s} without kernels"))),
            };
            for ky in 0..k {
                let num = row.y as isize + pad - ky as isize;
                if num < 0 || num % stride != 0 || num / stride >= d_out as isize {
                    continue;
                }
                let oy = (num / stride) as usize;
                for ox in 0..d_out {
                    let mut acc = self.modules[m].psum[s][oy * d_out + ox];
                    for kx in 0..k {
                        let ix = ox as isize * stride + kx as isize - pad;
                        if ix >= 0 && (ix as usize) < d_in && row.bits[ix as usize] {
                            acc += (kernel[ky * k + kx] as i64) << row.t;
                            adds += 1;
                            self.check_psum(cfg, acc)?;
                        }
                    }
                    self.modules[m].psum[s][oy * d_out + ox] = acc;
                }
            }
        }
        self.cond_adds += adds;
        Ok(())
    }

    fn pool_row(&mut self, m: usize, cfg: &LayerCfg) -> Result<()> {
        let (k, d_out) = (cfg.kernel, cfg.out_dim);
        let rows = std::mem::take(&mut self.modules[m].pool_rows);
        self.modules[m].pool_rows = vec![None; rows.len()];
        for (s, latch) in rows.into_iter().enumerate() {
            let Some((y, vals)) = latch else { continue };
            let oy = y / k;
            if oy >= d_out {
                return Err(self.fault(format!("pooling row {y} outside the output")));
            }
            for ox in 0..d_out {
                let window = &vals[ox * k..ox * k + k];
                let cell = &mut self.modules[m].psum[s][oy * d_out + ox];
                if cfg.kind == param::KIND_MAX_POOL {
                    *cell = window.iter().fold(*cell, |acc, &v| acc.max(v as i64));
                } else {
                    *cell += window.iter().map(|&v| v as i64).sum::<i64>();
                }
                let v = *cell;
                self.check_psum(cfg, v)?;
            }
        }
        Ok(())
    }

    fn exec_lin(&mut self, mask: u32) -> Result<()> {
        for m in self.mask_modules(mask)? {
            let cfg = self.configured(m)?;
            self.ensure_idle(m, "LIN")?;
            if self.modules[m].kind != ModKind::Linear {
                return Err(self.fault(format!("LIN issued to 2D module {m}")));
            }
            let (t, bits) = self.modules[m].lin_row.take().ok_or_else(|| self.fault("LIN without an activation row"))?;
            let f_in = cfg.in_ch;
            if bits.len() != f_in {
                return Err(self.fault("activation row length does not match the layer"));
            }
            let first_row = cfg.base / cfg.parallel * f_in;
            if self.plan.storage == Storage::ExternalStaged && self.staged != Some((cfg.wmem, first_row, f_in)) {
                return Err(self.fault("LIN before the weights were staged"));
            }
            let rom = self.roms.get(cfg.wmem).ok_or_else(|| self.fault("missing weight memory"))?;
            if first_row + f_in > rom.rows {
                return Err(self.fault("weight rows outside the memory"));
            }
            let n = cfg.parallel.min(cfg.out_ch - cfg.base);
            let mut adds = 0;
            for j in 0..n {
                let mut acc = self.modules[m].psum[0][j];
                for (i, &s) in bits.iter().enumerate() {
                    if s {
                        acc += (rom.row(first_row + i)[j] as i64) << t;
                        adds += 1;
                        self.check_psum(&cfg, acc)?;
                    }
                }
                self.modules[m].psum[0][j] = acc;
            }
            self.cond_adds += adds;
            let busy = f_in as u64 + PROC_OVERHEAD;
            let module = &mut self.modules[m];
            module.busy_until = self.cycle + 1 + busy;
            module.busy_cycles += busy;
        }
        Ok(())
    }

    fn exec_rst(&mut self, mask: u32) -> Result<()> {
        for m in self.mask_modules(mask)? {
            self.ensure_idle(m, "RST")?;
            self.modules[m].clear_pipeline();
        }
        Ok(())
    }

    /// Returns the number of rows transferred.
    fn exec_kernel_load(&mut self, op: Opcode, mem_id: u8, addr: usize) -> Result<u64> {
        if mem_id != mem::WEIGHTS {
            return Err(self.fault(format!("{} from memory {mem_id}", op.mnemonic())));
        }
        let external = self.plan.storage == Storage::ExternalStaged;
        if (op == Opcode::Kerd) != external {
            return Err(self.fault(format!("{} does not match the planned weight storage", op.mnemonic())));
        }
        let wmem = self.reg(param::WEIGHT_MEM);
        let rom = self.roms.get(wmem).ok_or_else(|| self.fault(format!("no weight memory {wmem}")))?;
        let kind = self.regs[param::LAYER_KIND as usize];
        match kind {
            param::KIND_CONV => {
                let (c_out, p, base) = (self.reg(param::OUT_CHANNELS), self.reg(param::PARALLEL).max(1), self.reg(param::GROUP_BASE));
                let (ci, co) = (addr / c_out.max(1), addr % c_out.max(1));
                if co < base || (co - base) % p != 0 {
                    return Err(self.fault(format!("kernel row {addr} does not start a module's channels")));
                }
                let m = self.module_by_rank((co - base) / p)?;
                self.configured(m)?;
                self.ensure_idle(m, "kernel load")?;
                let n = p.min(c_out - co);
                if addr + n > rom.rows || rom.row_values != self.modules[m].rows * self.modules[m].rows {
                    return Err(self.fault("kernel rows outside the weight memory"));
                }
                for s in 0..n {
                    self.modules[m].kernels[s] = Some((ci, rom.row(addr + s).to_vec()));
                }
                Ok(n as u64)
            }
            param::KIND_LINEAR if external => {
                let f_in = self.reg(param::IN_CHANNELS);
                if addr + f_in > rom.rows {
                    return Err(self.fault("staged rows outside the weight memory"));
                }
                let m = self.module_by_rank(0)?;
                self.ensure_idle(m, "weight staging")?;
                self.staged = Some((wmem, addr, f_in));
                Ok(f_in as u64)
            }
            _ => Err(self.fault(format!("{} in a layer without kernels", op.mnemonic()))),
        }
    }

    fn exec_acts(&mut self, mem_id: u8, addr: usize) -> Result<()> {
        let dst = self.dst_mem();
        if mem_id != dst {
            return Err(self.fault(format!("ACTS to memory {mem_id} but the layer writes {dst}")));
        }
        let t_steps = self.reg(param::TIME_STEPS);
        let kind = self.regs[param::LAYER_KIND as usize];
        let (d, c) = (self.reg(param::OUT_DIM), self.reg(param::OUT_CHANNELS));
        // (time step, module, slot, first psum index, count)
        let (t, m, slot, first, count) = if kind == param::KIND_LINEAR {
            let (t, j) = if dst == mem::OUTPUT { (0, addr) } else { (addr / c.max(1), addr % c.max(1)) };
            let m = self.module_by_rank(0)?;
            let cfg = self.configured(m)?;
            if j != cfg.base {
                return Err(self.fault(format!("ACTS for feature {j} but the group starts at {}", cfg.base)));
            }
            (t, m, 0, 0, cfg.parallel.min(cfg.out_ch - cfg.base))
        } else {
            let plane = c * d * d;
            let (t, co, oy) = match dst {
                mem::OUTPUT | mem::PING1D | mem::PONG1D => {
                    let (t, off) = if dst == mem::OUTPUT { (0, addr) } else { (addr / plane.max(1), addr % plane.max(1)) };
                    if d == 0 || off % d != 0 {
                        return Err(self.fault(format!("ACTS address {addr} is not row aligned")));
                    }
                    (t, off / (d * d), off / d % d)
                }
                _ => (addr / d.max(1) / c.max(1), addr / d.max(1) % c.max(1), addr % d.max(1)),
            };
            let (m, slot) = self.channel_slot(co)?;
            (t, m, slot, oy * d, d)
        };
        if t >= t_steps.max(1) {
            return Err(self.fault(format!("ACTS address {addr} beyond the last time step")));
        }
        self.ensure_idle(m, "ACTS")?;
        let cfg = self.configured(m)?;
        let vals: Vec<i64> = self.modules[m].psum[slot][first..first + count].to_vec();
        match dst {
            mem::OUTPUT => {
                if addr + count > self.output.len() {
                    return Err(self.fault("ACTS beyond the output memory"));
                }
                for (o, v) in self.output[addr..addr + count].iter_mut().zip(vals) {
                    *o = round_shift(v, cfg.shift);
                }
            }
            _ => {
                let b = buf_index(dst).unwrap();
                let is_2d = matches!(dst, mem::PING2D | mem::PONG2D);
                let buf = &mut self.bufs[b];
                let start = if is_2d { addr * buf.width } else { addr };
                let fits = if is_2d { addr < buf.height && count <= buf.width } else { addr + count <= buf.bits.len() };
                if !fits {
                    return Err(self.fault(format!("ACTS address {addr} outside buffer {dst}")));
                }
                let t_bits = t_steps as u32;
                for (i, v) in vals.into_iter().enumerate() {
                    buf.bits[start + i] = requantize(v, cfg.shift, t_bits) >> t & 1 == 1;
                }
            }
        }
        Ok(())
    }

    fn exec_wait(&mut self, module: usize, condition: u32) -> Result<u64> {
        let until = match condition {
            cond::MODULE_IDLE => {
                self.modules.get(module).ok_or_else(|| self.fault(format!("WAIT on missing module {module}")))?.busy_until
            }
            cond::ALL_IDLE => self.modules.iter().map(|m| m.busy_until).max().unwrap_or(0),
            other => return Err(self.fault(format!("unknown wait condition {other}"))),
        };
        Ok(until.saturating_sub(self.cycle))
    }

    /// Executes one instruction.
    pub fn step(&mut self) -> Result<()> {
        if self.halted {
            return Err(self.fault("step after END"));
        }
        let ins = *self.program.get(self.pc).ok_or_else(|| self.fault("program counter past the last instruction"))?;
        let op = ins.opcode();
        let mut comm = 0;
        let mut stall = 0;
        match ins {
            Instruction::Config { op: Opcode::Ena, value, .. } => self.exec_ena(value)?,
            Instruction::Config { param: p, value, .. } => self.exec_conf(p, value)?,
            Instruction::Command { op: Opcode::Proc, modules } => self.exec_proc(modules)?,
            Instruction::Command { op: Opcode::Lin, modules } => self.exec_lin(modules)?,
            Instruction::Command { op: Opcode::Rst, modules } => self.exec_rst(modules)?,
            Instruction::Command { op: Opcode::End, .. } => self.halted = true,
            Instruction::Command { op, .. } => return Err(self.fault(format!("{} is not a command", op.mnemonic()))),
            Instruction::Memory { op, mem: m, addr, .. } => {
                let addr = addr as usize;
                comm = match op {
                    Opcode::Actl => {
                        self.exec_actl(m, addr)?;
                        ACT_TRANSFER_CYCLES
                    }
                    Opcode::Acts => {
                        self.exec_acts(m, addr)?;
                        ACT_TRANSFER_CYCLES
                    }
                    Opcode::Kerl => self.exec_kernel_load(op, m, addr)? * self.opts.kernel_load_cycles,
                    _ => self.exec_kernel_load(op, m, addr)? * (self.opts.kernel_load_cycles + self.opts.external_penalty_cycles),
                };
            }
            Instruction::Wait { module, condition } => stall = self.exec_wait(module as usize, condition)?,
        }
        let cost = if comm > 0 { comm } else { 1 + stall };
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEntry { cycle: self.cycle, pc: self.pc, cost, text: isa::format_instruction(&ins) });
        }
        if comm > 0 {
            self.comm += comm;
        } else if op == Opcode::Wait {
            self.wait += cost;
        } else {
            self.control += cost;
        }
        if let Some(l) = self.layer {
            let s = self.layer_stats.entry(l).or_default();
            s.cycles += cost;
            s.instructions += 1;
            s.comm += comm;
            if op == Opcode::Wait {
                s.wait += cost;
            }
        }
        *self.opcode_counts.entry(op.mnemonic().to_string()).or_default() += 1;
        self.cycle += cost;
        self.pc += 1;
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.halted {
            self.step()?;
        }
        Ok(())
    }

    pub fn report(&self) -> SimReport {
        let total = self.cycle;
        let us = |c: u64| c as f64 / self.opts.clock_mhz;
        let instructions = self.opcode_counts.values().sum();
        let layers = self
            .layer_stats
            .iter()
            .map(|(&l, s)| LayerCycles {
                layer: l,
                notation: self.plan.layers.get(l).map_or_else(|| "?".into(), LayerSpec::notation),
                cycles: s.cycles,
                latency_us: us(s.cycles),
                instructions: s.instructions,
                comm_cycles: s.comm,
                wait_cycles: s.wait,
            })
            .collect();
        let modules = self
            .modules
            .iter()
            .enumerate()
            .map(|(i, m)| ModuleReport {
                module: i,
                kind: match m.kind {
                    ModKind::Conv => format!("conv{}", m.rows),
                    ModKind::Pool => format!("pool{}", m.rows),
                    ModKind::Linear => "linear".into(),
                },
                busy_cycles: m.busy_cycles,
                utilization: if total == 0 { 0.0 } else { (m.busy_cycles as f64 / total as f64).min(1.0) },
            })
            .collect();
        SimReport {
            total_cycles: total,
            clock_mhz: self.opts.clock_mhz,
            latency_us: us(total),
            instructions,
            instructions_per_clock: if total == 0 { 0.0 } else { instructions as f64 / total as f64 },
            comm_cycles: self.comm,
            wait_cycles: self.wait,
            control_cycles: self.control,
            conditional_adds: self.cond_adds,
            layers,
            modules,
            opcode_counts: self.opcode_counts.clone(),
        }
    }

    pub fn output(&self) -> &[i64] {
        &self.output
    }

    pub fn into_result(self) -> SimResult {
        let report = self.report();
        SimResult { output: self.output, report, trace: self.trace.unwrap_or_default() }
    }
}

/// Loads `input`, runs the program to `END` and returns the output memory.
pub fn run(
    program: &Program,
    plan: &HardwarePlan,
    roms: &[WeightImage],
    input: &SpikeTrainPlane,
    opts: SimOptions,
) -> Result<SimResult> {
    let mut m = Machine::new(plan, roms, program, opts)?;
    m.load_input(input)?;
    m.run_to_end()?;
    Ok(m.into_result())
}

/// Renders a trace as one line per instruction.
pub fn format_trace(trace: &[TraceEntry]) -> String {
    let mut s = String::new();
    for e in trace {
        writeln!(s, "{:>10} {:>8} +{:<4} {}", e.cycle, e.pc, e.cost, e.text).unwrap();
    }
    s
}
