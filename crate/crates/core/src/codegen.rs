//! Instruction generation.
//!
//! Every layer starts with a block of `CONF` writes. Convolutions then walk
//! groups of output channels (`P` per module times the replica count). The
//! accumulating loops over time steps and input channels sit inside each
//! group, and every input row is a `PROC` / `WAIT` / `ACTL` triple. Results
//! leave the module with one `ACTS` per output row and time step.
//! [`reorder_for_overlap`] moves the next-row loads in front of the `WAIT`
//! so they overlap the running computation.

use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::QuantizedNetwork;
use crate::error::{Error, Result};
use crate::isa::{cond, mem, param, signed_to_value, Instruction, Opcode, Program};
use crate::model::{LayerSpec, PoolMode};
use crate::planner::{HardwarePlan, LayerRoute, Storage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodegenOptions {
    pub reorder: bool,
}

impl Default for CodegenOptions {
    fn default() -> Self {
        Self { reorder: true }
    }
}

/// Contents of one weight memory, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightImage {
    pub layer: usize,
    pub bits: u32,
    pub row_values: usize,
    pub rows: usize,
    pub data: Vec<i32>,
}

impl WeightImage {
    pub fn row(&self, r: usize) -> &[i32] {
        &self.data[r * self.row_values..(r + 1) * self.row_values]
    }
}

const ROM_MAGIC: [u8; 4] = *b"SNNW";
const ROM_VERSION: u16 = 1;

impl WeightImage {
    /// Bit-packed rows: each value is a `bits`-wide two's-complement field,
    /// LSB first, every row padded to whole bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let row_bytes = (self.row_values * self.bits as usize).div_ceil(8);
        let mut out = Vec::with_capacity(20 + row_bytes * self.rows);
        out.extend_from_slice(&ROM_MAGIC);
        out.extend_from_slice(&ROM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.bits as u16).to_le_bytes());
        for v in [self.layer, self.row_values, self.rows] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let mask = (1u64 << self.bits) - 1;
        for r in 0..self.rows {
            let mut row = vec![0u8; row_bytes];
            for (i, &v) in self.row(r).iter().enumerate() {
                let field = (v as i64 as u64) & mask;
                for b in 0..self.bits as usize {
                    if field >> b & 1 == 1 {
                        let bit = i * self.bits as usize + b;
                        row[bit / 8] |= 1 << (bit % 8);
                    }
                }
            }
            out.extend_from_slice(&row);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || bytes[..4] != ROM_MAGIC {
            return Err(Error::Parse("not a weight image (bad magic)".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if u16_at(4) != ROM_VERSION {
            return Err(Error::Parse(format!("unsupported weight image version {}", u16_at(4))));
        }
        let bits = u16_at(6) as u32;
        if !(1..=16).contains(&bits) {
            return Err(Error::Parse(format!("weight image with {bits}-bit values")));
        }
        let (layer, row_values, rows) = (u32_at(8), u32_at(12), u32_at(16));
        let row_bytes = (row_values * bits as usize).div_ceil(8);
        let body = &bytes[20..];
        if body.len() != row_bytes * rows {
            return Err(Error::Parse("weight image size does not match its header".into()));
        }
        let mut data = Vec::with_capacity(rows * row_values);
        for row in body.chunks_exact(row_bytes.max(1)).take(rows) {
            for i in 0..row_values {
                let mut field = 0i64;
                for b in 0..bits as usize {
                    let bit = i * bits as usize + b;
                    field |= ((row[bit / 8] >> (bit % 8) & 1) as i64) << b;
                }
                // sign-extend
                let shift = 64 - bits;
                data.push(((field << shift) >> shift) as i32);
            }
        }
        Ok(Self { layer, bits, row_values, rows, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Lays out the quantized weights as the planned memories: convolution row
/// `ci·C_out + co` holds one `K×K` kernel; linear row `g·F_in + i` holds
/// input `i`'s weights for the `g`-th group of parallel features.
pub fn weight_images(q: &QuantizedNetwork, plan: &HardwarePlan) -> Result<Vec<WeightImage>> {
    let mut out = Vec::new();
    for wm in &plan.weight_mems {
        let layer = q
            .layers
            .get(wm.layer)
            .ok_or_else(|| Error::Codegen(format!("weight memory for missing layer {}", wm.layer)))?;
        let w = layer.weights.as_ref().ok_or(Error::MissingParams { layer: wm.layer })?;
        let mut data = vec![0i32; wm.rows * wm.row_values];
        match &layer.spec {
            LayerSpec::Conv2d(c) => {
                let kk = c.kernel * c.kernel;
                for co in 0..c.out_channels {
                    for ci in 0..c.in_channels {
                        let row = ci * c.out_channels + co;
                        let src = (co * c.in_channels + ci) * kk;
                        data[row * kk..(row + 1) * kk].copy_from_slice(&w.data[src..src + kk]);
                    }
                }
            }
            LayerSpec::Linear(lin) => {
                let f = wm.row_values;
                for j in 0..lin.out_features {
                    let (g, k) = (j / f, j % f);
                    for i in 0..lin.in_features {
                        data[(g * lin.in_features + i) * f + k] = w.data[j * lin.in_features + i];
                    }
                }
            }
            LayerSpec::Pool2d(_) => return Err(Error::Codegen(format!("pooling layer {} has a weight memory", wm.layer))),
        }
        out.push(WeightImage { layer: wm.layer, bits: q.cfg.bits, row_values: wm.row_values, rows: wm.rows, data });
    }
    Ok(out)
}

struct Emitter {
    out: Vec<Instruction>,
}

impl Emitter {
    fn conf(&mut self, p: u8, v: usize) -> Result<()> {
        let value = u32::try_from(v).map_err(|_| Error::Codegen(format!("config value {v} too large")))?;
        self.push(Instruction::conf(p, value))
    }

    fn push(&mut self, ins: Instruction) -> Result<()> {
        ins.encode()?;
        self.out.push(ins);
        Ok(())
    }

    fn mem(&mut self, op: Opcode, m: u8, addr: usize) -> Result<()> {
        let a = u32::try_from(addr).map_err(|_| Error::Codegen(format!("address {addr} too large")))?;
        self.push(Instruction::memory(op, m, a))
    }

    fn wait_for(&mut self, route: &LayerRoute, modules: usize) -> Result<()> {
        let condition = if modules > 1 { cond::ALL_IDLE } else { cond::MODULE_IDLE };
        self.push(Instruction::Wait { module: route.first_module as u8, condition })
    }

    fn bias(&mut self, bias: Option<&Vec<i64>>, range: std::ops::Range<usize>) -> Result<()> {
        if let Some(b) = bias {
            for c in range {
                if b[c] != 0 {
                    self.conf(param::BIAS_CHANNEL, c)?;
                    self.push(Instruction::conf(param::BIAS_VALUE, signed_to_value(b[c])?))?;
                }
            }
        }
        Ok(())
    }
}

fn ping_pong_bits(route: &LayerRoute) -> usize {
    let mut v = 0;
    if matches!(route.src, mem::PONG2D | mem::PONG1D) {
        v |= param::PP_SRC_PONG;
    }
    if matches!(route.src, mem::PING1D | mem::PONG1D) {
        v |= param::PP_SRC_1D;
    }
    if matches!(route.dst, mem::PING1D | mem::PONG1D) {
        v |= param::PP_DST_1D;
    }
    if route.dst == mem::OUTPUT {
        v |= param::PP_DST_OUTPUT;
    }
    v as usize
}

fn layer_kind(spec: &LayerSpec) -> u32 {
    match spec {
        LayerSpec::Conv2d(_) => param::KIND_CONV,
        LayerSpec::Pool2d(p) if p.mode == PoolMode::Avg => param::KIND_AVG_POOL,
        LayerSpec::Pool2d(_) => param::KIND_MAX_POOL,
        LayerSpec::Linear(_) => param::KIND_LINEAR,
    }
}

/// Generates the complete program for a quantized network on a plan.
pub fn generate(q: &QuantizedNetwork, plan: &HardwarePlan, opts: CodegenOptions) -> Result<Program> {
    if plan.layers != q.specs() {
        return Err(Error::Codegen("plan was made for a different network".into()));
    }
    if plan.routes.len() != q.layers.len() {
        return Err(Error::Codegen("plan has no route for some layers".into()));
    }
    let t_steps = q.cfg.time_steps as usize;
    let weight_op = if plan.storage == Storage::OnChipRom { Opcode::Kerl } else { Opcode::Kerd };
    let mut e = Emitter { out: Vec::new() };

    for (l, layer) in q.layers.iter().enumerate() {
        let spec = &layer.spec;
        let route = &plan.routes[l];
        if route.layer != l {
            return Err(Error::Codegen(format!("route {l} describes layer {}", route.layer)));
        }
        if spec.has_weights() && route.weight_mem.is_none_or(|w| w >= plan.weight_mems.len()) {
            return Err(Error::Codegen(format!("layer {l} has no weight memory in the plan")));
        }
        if route.first_module + route.modules > plan.module_count {
            return Err(Error::Codegen(format!("layer {l} uses a module absent from the plan")));
        }

        e.conf(param::LAYER_ID, l)?;
        e.push(Instruction::conf(param::LAYER_KIND, layer_kind(spec)))?;
        e.conf(param::IN_DIM, spec.in_dim())?;
        e.conf(param::OUT_DIM, spec.out_dim())?;
        e.conf(param::IN_CHANNELS, spec.in_channels())?;
        e.conf(param::OUT_CHANNELS, spec.out_channels())?;
        e.conf(param::KERNEL, spec.kernel())?;
        e.conf(param::STRIDE, spec.stride())?;
        e.conf(param::PADDING, spec.padding())?;
        e.conf(param::PARALLEL, route.parallel)?;
        e.conf(param::SHIFT, layer.shift as usize)?;
        e.conf(param::PING_PONG, ping_pong_bits(route))?;
        e.conf(param::WEIGHT_MEM, route.weight_mem.unwrap_or(0))?;
        e.conf(param::ACT_BASE, 0)?;
        e.conf(param::TIME_STEPS, t_steps)?;

        let (src, dst) = (route.src, route.dst);
        let p = route.parallel;
        match spec {
            LayerSpec::Conv2d(c) => {
                let (d_in, d_out) = (c.in_dim, c.out_dim);
                for base in (0..c.out_channels).step_by(route.group_size()) {
                    let n = route.group_size().min(c.out_channels - base);
                    let mods = n.div_ceil(p);
                    let mask = route.module_mask(mods);
                    e.conf(param::GROUP_BASE, base)?;
                    e.push(Instruction::ena(mask))?;
                    e.bias(layer.bias.as_ref(), base..base + n)?;
                    for t in 0..t_steps {
                        for ci in 0..c.in_channels {
                            e.push(Instruction::command(Opcode::Rst, mask))?;
                            for r in 0..mods {
                                e.mem(weight_op, mem::WEIGHTS, ci * c.out_channels + base + r * p)?;
                            }
                            let row0 = (t * c.in_channels + ci) * d_in;
                            e.mem(Opcode::Actl, src, row0)?;
                            for y in 0..d_in {
                                e.push(Instruction::command(Opcode::Proc, mask))?;
                                e.wait_for(route, mods)?;
                                if y + 1 < d_in {
                                    e.mem(Opcode::Actl, src, row0 + y + 1)?;
                                }
                            }
                        }
                    }
                    write_back_2d(&mut e, dst, base..base + n, c.out_channels, d_out, t_steps)?;
                }
            }
            LayerSpec::Pool2d(pl) => {
                let (k, d_in, d_out) = (pl.kernel, pl.in_dim, pl.out_dim);
                let mask = route.module_mask(1);
                for base in (0..pl.channels).step_by(p) {
                    let n = p.min(pl.channels - base);
                    e.conf(param::GROUP_BASE, base)?;
                    e.push(Instruction::ena(mask))?;
                    for oy in 0..d_out {
                        for ky in 0..k {
                            for s in 0..n {
                                for t in 0..t_steps {
                                    e.mem(Opcode::Actl, src, (t * pl.channels + base + s) * d_in + oy * k + ky)?;
                                }
                            }
                            e.push(Instruction::command(Opcode::Proc, mask))?;
                            e.wait_for(route, 1)?;
                        }
                    }
                    write_back_2d(&mut e, dst, base..base + n, pl.channels, d_out, t_steps)?;
                }
            }
            LayerSpec::Linear(lin) => {
                let mask = route.module_mask(1);
                for base in (0..lin.out_features).step_by(p) {
                    let n = p.min(lin.out_features - base);
                    e.conf(param::GROUP_BASE, base)?;
                    e.push(Instruction::ena(mask))?;
                    e.bias(layer.bias.as_ref(), base..base + n)?;
                    if plan.storage == Storage::ExternalStaged {
                        e.mem(Opcode::Kerd, mem::WEIGHTS, base / p * lin.in_features)?;
                    }
                    e.mem(Opcode::Actl, src, 0)?;
                    for t in 0..t_steps {
                        e.push(Instruction::command(Opcode::Lin, mask))?;
                        e.wait_for(route, 1)?;
                        if t + 1 < t_steps {
                            e.mem(Opcode::Actl, src, t + 1)?;
                        }
                    }
                    if dst == mem::OUTPUT {
                        e.mem(Opcode::Acts, dst, base)?;
                    } else {
                        for t in 0..t_steps {
                            e.mem(Opcode::Acts, dst, t * lin.out_features + base)?;
                        }
                    }
                }
            }
        }
    }
    e.push(Instruction::end())?;
    let program = Program::new(e.out);
    let program = if opts.reorder { reorder_for_overlap(&program) } else { program };
    program.validate()?;
    Ok(program)
}

/// One `ACTS` per output row (and time step unless the destination is the
/// output memory). Flat destinations use address `t·F + (c·D + y)·D`.
fn write_back_2d(
    e: &mut Emitter,
    dst: u8,
    channels: std::ops::Range<usize>,
    total_channels: usize,
    d_out: usize,
    t_steps: usize,
) -> Result<()> {
    let features = total_channels * d_out * d_out;
    for c in channels {
        for oy in 0..d_out {
            match dst {
                mem::OUTPUT => e.mem(Opcode::Acts, dst, (c * d_out + oy) * d_out)?,
                mem::PING1D | mem::PONG1D => {
                    for t in 0..t_steps {
                        e.mem(Opcode::Acts, dst, t * features + (c * d_out + oy) * d_out)?;
                    }
                }
                _ => {
                    for t in 0..t_steps {
                        e.mem(Opcode::Acts, dst, (t * total_channels + c) * d_out + oy)?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Moves the activation loads that follow a `PROC`/`LIN` + `WAIT` pair in
/// front of the `WAIT`, so the transfer runs while the module computes.
/// A load is not moved if it re-reads a row the `PROC` consumed.
pub fn reorder_for_overlap(program: &Program) -> Program {
    let src = &program.instructions;
    let mut out = Vec::with_capacity(src.len());
    // rows loaded since the last PROC/LIN
    let mut latched: Vec<(u8, u32)> = Vec::new();
    let mut i = 0;
    while i < src.len() {
        let ins = src[i];
        match ins {
            Instruction::Memory { op: Opcode::Actl, mem: m, addr, .. } => latched.push((m, addr)),
            Instruction::Command { op: Opcode::Proc | Opcode::Lin, .. }
                if matches!(src.get(i + 1), Some(Instruction::Wait { .. })) =>
            {
                let consumed = std::mem::take(&mut latched);
                out.push(ins);
                let wait = src[i + 1];
                let mut j = i + 2;
                while let Some(Instruction::Memory { op: Opcode::Actl, mem: m, addr, .. }) = src.get(j) {
                    if consumed.contains(&(*m, *addr)) {
                        break;
                    }
                    out.push(src[j]);
                    latched.push((*m, *addr));
                    j += 1;
                }
                out.push(wait);
                i = j;
                continue;
            }
            Instruction::Command { op: Opcode::Proc | Opcode::Lin, .. } => latched.clear(),
            _ => {}
        }
        out.push(ins);
        i += 1;
    }
    Program::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reorder_hoists_next_row() {
        let p = Program::new(vec![
            Instruction::memory(Opcode::Actl, mem::PING2D, 0),
            Instruction::command(Opcode::Proc, 1),
            Instruction::wait(0),
            Instruction::memory(Opcode::Actl, mem::PING2D, 1),
            Instruction::command(Opcode::Proc, 1),
            Instruction::wait(0),
            Instruction::end(),
        ]);
        let r = reorder_for_overlap(&p);
        let ops: Vec<Opcode> = r.instructions.iter().map(Instruction::opcode).collect();
        use Opcode::*;
        assert_eq!(ops, vec![Actl, Proc, Actl, Wait, Proc, Wait, End]);
    }

    #[test]
    fn reorder_respects_row_hazard() {
        let p = Program::new(vec![
            Instruction::memory(Opcode::Actl, mem::PING2D, 3),
            Instruction::command(Opcode::Proc, 1),
            Instruction::wait(0),
            Instruction::memory(Opcode::Actl, mem::PING2D, 3),
            Instruction::end(),
        ]);
        assert_eq!(reorder_for_overlap(&p), p);
    }

    #[test]
    fn rom_image_roundtrip() {
        let img = WeightImage { layer: 2, bits: 3, row_values: 5, rows: 2, data: vec![-4, 3, 0, -1, 2, 1, -2, -3, 0, 3] };
        assert_eq!(WeightImage::from_bytes(&img.to_bytes()).unwrap(), img);
    }
}
