//! 32-bit instruction set.
//!
//! Every word carries a 5-bit opcode in bits `[31:27]`; the remaining 27 bits
//! are laid out per category:
//!
//! | category | fields                                                   |
//! |----------|----------------------------------------------------------|
//! | Config   | `[26:22]` param id, `[21:0]` value                       |
//! | Command  | `[26:0]` module-select bitmask                           |
//! | Memory   | `[26:23]` memory id, `[22]` direction, `[21:0]` address  |
//! | Wait     | `[26:22]` module id, `[21:0]` condition id               |
//!
//! Eleven opcodes are assigned; the other 21 decode to
//! [`Error::IllegalOpcode`].

mod asm;
mod program;

pub use asm::{assemble, disassemble, disassemble_annotated, format_instruction};
pub use program::{read_program, write_program, Program, PROGRAM_MAGIC, PROGRAM_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OPCODE_SHIFT: u32 = 27;
pub const PARAM_BITS: u32 = 5;
pub const VALUE_BITS: u32 = 22;
pub const MASK_BITS: u32 = 27;
pub const MEM_BITS: u32 = 4;
pub const ADDR_BITS: u32 = 22;
pub const MODULE_BITS: u32 = 5;
pub const COND_BITS: u32 = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Opcode {
    Ena = 0,
    Conf = 1,
    Proc = 2,
    Lin = 3,
    Rst = 4,
    End = 5,
    Kerl = 6,
    Kerd = 7,
    Actl = 8,
    Acts = 9,
    Wait = 10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Command,
    Memory,
    Wait,
}

impl Opcode {
    pub const ALL: [Opcode; 11] = [
        Opcode::Ena,
        Opcode::Conf,
        Opcode::Proc,
        Opcode::Lin,
        Opcode::Rst,
        Opcode::End,
        Opcode::Kerl,
        Opcode::Kerd,
        Opcode::Actl,
        Opcode::Acts,
        Opcode::Wait,
    ];

    pub fn from_bits(bits: u32) -> Option<Self> {
        Self::ALL.get(bits as usize).copied()
    }

    pub fn category(self) -> Category {
        match self {
            Opcode::Ena | Opcode::Conf => Category::Config,
            Opcode::Proc | Opcode::Lin | Opcode::Rst | Opcode::End => Category::Command,
            Opcode::Kerl | Opcode::Kerd | Opcode::Actl | Opcode::Acts => Category::Memory,
            Opcode::Wait => Category::Wait,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Ena => "ENA",
            Opcode::Conf => "CONF",
            Opcode::Proc => "PROC",
            Opcode::Lin => "LIN",
            Opcode::Rst => "RST",
            Opcode::End => "END",
            Opcode::Kerl => "KERL",
            Opcode::Kerd => "KERD",
            Opcode::Actl => "ACTL",
            Opcode::Acts => "ACTS",
            Opcode::Wait => "WAIT",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|op| op.mnemonic().eq_ignore_ascii_case(s))
    }
}

/// Configuration register ids (registry version 1).
pub mod param {
    pub const STRIDE: u8 = 0;
    pub const PARALLEL: u8 = 1;
    pub const SHIFT: u8 = 2;
    /// Bit 0: source is the pong buffer; bit 1: source is 1D; bit 2:
    /// destination is 1D; bit 3: destination is the output memory.
    pub const PING_PONG: u8 = 3;
    pub const WEIGHT_MEM: u8 = 4;
    pub const ACT_BASE: u8 = 5;
    pub const OUT_CHANNELS: u8 = 6;
    pub const TIME_STEPS: u8 = 7;
    pub const LAYER_ID: u8 = 8;
    /// 0 conv, 1 average pool, 2 max pool, 3 linear.
    pub const LAYER_KIND: u8 = 9;
    pub const IN_DIM: u8 = 10;
    pub const OUT_DIM: u8 = 11;
    pub const IN_CHANNELS: u8 = 12;
    pub const PADDING: u8 = 13;
    /// First output channel (or feature) of the current group.
    pub const GROUP_BASE: u8 = 14;
    pub const BIAS_CHANNEL: u8 = 15;
    /// 22-bit two's-complement bias added to the selected channel's psum.
    pub const BIAS_VALUE: u8 = 16;
    pub const KERNEL: u8 = 17;

    pub const REGISTRY_VERSION: u32 = 1;

    pub const NAMES: [(&str, u8); 18] = [
        ("STRIDE", STRIDE),
        ("PARALLEL", PARALLEL),
        ("SHIFT", SHIFT),
        ("PING_PONG", PING_PONG),
        ("WEIGHT_MEM", WEIGHT_MEM),
        ("ACT_BASE", ACT_BASE),
        ("OUT_CHANNELS", OUT_CHANNELS),
        ("TIME_STEPS", TIME_STEPS),
        ("LAYER_ID", LAYER_ID),
        ("LAYER_KIND", LAYER_KIND),
        ("IN_DIM", IN_DIM),
        ("OUT_DIM", OUT_DIM),
        ("IN_CHANNELS", IN_CHANNELS),
        ("PADDING", PADDING),
        ("GROUP_BASE", GROUP_BASE),
        ("BIAS_CHANNEL", BIAS_CHANNEL),
        ("BIAS_VALUE", BIAS_VALUE),
        ("KERNEL", KERNEL),
    ];

    pub fn name(id: u8) -> Option<&'static str> {
        NAMES.iter().find(|(_, v)| *v == id).map(|(n, _)| *n)
    }

    pub fn from_name(s: &str) -> Option<u8> {
        NAMES.iter().find(|(n, _)| n.eq_ignore_ascii_case(s)).map(|(_, v)| *v)
    }

    pub const KIND_CONV: u32 = 0;
    pub const KIND_AVG_POOL: u32 = 1;
    pub const KIND_MAX_POOL: u32 = 2;
    pub const KIND_LINEAR: u32 = 3;

    pub const PP_SRC_PONG: u32 = 1;
    pub const PP_SRC_1D: u32 = 2;
    pub const PP_DST_1D: u32 = 4;
    pub const PP_DST_OUTPUT: u32 = 8;
}

/// Memory ids used by the memory instructions.
pub mod mem {
    pub const PING2D: u8 = 0;
    pub const PONG2D: u8 = 1;
    pub const PING1D: u8 = 2;
    pub const PONG1D: u8 = 3;
    pub const OUTPUT: u8 = 4;
    pub const WEIGHTS: u8 = 5;

    pub const NAMES: [(&str, u8); 6] = [
        ("PING2D", PING2D),
        ("PONG2D", PONG2D),
        ("PING1D", PING1D),
        ("PONG1D", PONG1D),
        ("OUTPUT", OUTPUT),
        ("WEIGHTS", WEIGHTS),
    ];

    pub fn name(id: u8) -> Option<&'static str> {
        NAMES.iter().find(|(_, v)| *v == id).map(|(n, _)| *n)
    }

    pub fn from_name(s: &str) -> Option<u8> {
        NAMES.iter().find(|(n, _)| n.eq_ignore_ascii_case(s)).map(|(_, v)| *v)
    }
}

/// WAIT condition ids.
pub mod cond {
    /// Wait until the named module is idle.
    pub const MODULE_IDLE: u32 = 0;
    /// Wait until every module is idle.
    pub const ALL_IDLE: u32 = 1;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Load = 0,
    Store = 1,
}

/// Decoded instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    Config { op: Opcode, param: u8, value: u32 },
    Command { op: Opcode, modules: u32 },
    Memory { op: Opcode, mem: u8, dir: Direction, addr: u32 },
    Wait { module: u8, condition: u32 },
}

fn check(field: &'static str, value: u64, bits: u32) -> Result<u32> {
    if value >> bits != 0 {
        return Err(Error::FieldOverflow { field, value, bits });
    }
    Ok(value as u32)
}

impl Instruction {
    pub fn conf(param: u8, value: u32) -> Self {
        Instruction::Config { op: Opcode::Conf, param, value }
    }

    pub fn ena(modules: u32) -> Self {
        Instruction::Config { op: Opcode::Ena, param: 0, value: modules }
    }

    pub fn command(op: Opcode, modules: u32) -> Self {
        Instruction::Command { op, modules }
    }

    pub fn end() -> Self {
        Instruction::Command { op: Opcode::End, modules: 0 }
    }

    pub fn memory(op: Opcode, mem: u8, addr: u32) -> Self {
        let dir = if op == Opcode::Acts { Direction::Store } else { Direction::Load };
        Instruction::Memory { op, mem, dir, addr }
    }

    pub fn wait(module: u8) -> Self {
        Instruction::Wait { module, condition: cond::MODULE_IDLE }
    }

    pub fn opcode(&self) -> Opcode {
        match *self {
            Instruction::Config { op, .. } | Instruction::Command { op, .. } | Instruction::Memory { op, .. } => op,
            Instruction::Wait { .. } => Opcode::Wait,
        }
    }

    pub fn encode(&self) -> Result<u32> {
        let op = self.opcode();
        let (category, payload) = match *self {
            Instruction::Config { param, value, .. } => (
                Category::Config,
                check("param", param as u64, PARAM_BITS)? << VALUE_BITS | check("value", value as u64, VALUE_BITS)?,
            ),
            Instruction::Command { modules, .. } => (Category::Command, check("modules", modules as u64, MASK_BITS)?),
            Instruction::Memory { mem, dir, addr, .. } => (
                Category::Memory,
                check("mem", mem as u64, MEM_BITS)? << (ADDR_BITS + 1)
                    | (dir as u32) << ADDR_BITS
                    | check("addr", addr as u64, ADDR_BITS)?,
            ),
            Instruction::Wait { module, condition } => (
                Category::Wait,
                check("module", module as u64, MODULE_BITS)? << COND_BITS | check("condition", condition as u64, COND_BITS)?,
            ),
        };
        if op.category() != category {
            return Err(Error::Program(format!("{} is not a {category:?} instruction", op.mnemonic())));
        }
        Ok((op as u32) << OPCODE_SHIFT | payload)
    }

    pub fn decode(word: u32) -> Result<Self> {
        let bits = word >> OPCODE_SHIFT;
        let op = Opcode::from_bits(bits).ok_or(Error::IllegalOpcode { opcode: bits, index: None })?;
        let field = |shift: u32, width: u32| (word >> shift) & ((1 << width) - 1);
        Ok(match op.category() {
            Category::Config => Instruction::Config {
                op,
                param: field(VALUE_BITS, PARAM_BITS) as u8,
                value: field(0, VALUE_BITS),
            },
            Category::Command => Instruction::Command { op, modules: field(0, MASK_BITS) },
            Category::Memory => Instruction::Memory {
                op,
                mem: field(ADDR_BITS + 1, MEM_BITS) as u8,
                dir: if field(ADDR_BITS, 1) == 1 { Direction::Store } else { Direction::Load },
                addr: field(0, ADDR_BITS),
            },
            Category::Wait => Instruction::Wait {
                module: field(COND_BITS, MODULE_BITS) as u8,
                condition: field(0, COND_BITS),
            },
        })
    }
}

/// Sign-extends a 22-bit config value.
pub fn value_to_signed(value: u32) -> i64 {
    let shift = 64 - VALUE_BITS;
    ((value as i64) << shift) >> shift
}

/// Two's-complement 22-bit encoding of a signed config value.
pub fn signed_to_value(v: i64) -> Result<u32> {
    let lim = 1i64 << (VALUE_BITS - 1);
    if !(-lim..lim).contains(&v) {
        return Err(Error::FieldOverflow { field: "value", value: v.unsigned_abs(), bits: VALUE_BITS });
    }
    Ok((v as u32) & ((1 << VALUE_BITS) - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn end_word() {
        assert_eq!(Instruction::end().encode().unwrap(), 0b00101 << 27);
    }

    #[test]
    fn conf_value_overflow() {
        let err = Instruction::conf(param::SHIFT, 1 << 28).encode().unwrap_err();
        assert!(matches!(err, Error::FieldOverflow { field: "value", bits: 22, .. }));
    }

    #[test]
    fn unassigned_opcodes_are_illegal() {
        for op in 11..32u32 {
            assert!(matches!(Instruction::decode(op << 27), Err(Error::IllegalOpcode { opcode, .. }) if opcode == op));
        }
    }

    #[test]
    fn category_mismatch_is_rejected() {
        let bad = Instruction::Command { op: Opcode::Conf, modules: 0 };
        assert!(bad.encode().is_err());
    }

    #[test]
    fn memory_fields() {
        let i = Instruction::memory(Opcode::Acts, mem::PONG2D, 0x2a);
        let w = i.encode().unwrap();
        assert_eq!(w, 9 << 27 | 1 << 23 | 1 << 22 | 0x2a);
        assert_eq!(Instruction::decode(w).unwrap(), i);
    }

    #[test]
    fn signed_values() {
        for v in [-(1 << 21), -5, 0, 7, (1 << 21) - 1] {
            assert_eq!(value_to_signed(signed_to_value(v).unwrap()), v);
        }
        assert!(signed_to_value(1 << 21).is_err());
    }
}
