use std::path::Path;

use super::{cond, param, Direction, Instruction, Opcode};
use crate::error::{Error, Result};

pub const PROGRAM_MAGIC: [u8; 4] = *b"SNNP";
pub const PROGRAM_VERSION: u16 = 1;
const HEADER_LEN: usize = 12;

/// An instruction stream terminated by a single `END`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Program {
    pub instructions: Vec<Instruction>,
}

impl Program {
    pub fn new(instructions: Vec<Instruction>) -> Self {
        Self { instructions }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn words(&self) -> Result<Vec<u32>> {
        self.instructions.iter().map(Instruction::encode).collect()
    }

    pub fn from_words(words: &[u32]) -> Result<Self> {
        let instructions = words
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                Instruction::decode(w).map_err(|e| match e {
                    Error::IllegalOpcode { opcode, .. } => Error::IllegalOpcode { opcode, index: Some(i) },
                    e => e,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { instructions })
    }

    pub fn count(&self, op: Opcode) -> usize {
        self.instructions.iter().filter(|i| i.opcode() == op).count()
    }

    /// Structural checks: one trailing `END`, every `PROC`/`LIN` targets
    /// modules enabled earlier and follows a layer-kind configuration,
    /// memory directions match their opcodes.
    pub fn validate(&self) -> Result<()> {
        let n = self.instructions.len();
        match self.instructions.last() {
            Some(i) if i.opcode() == Opcode::End => {}
            _ => return Err(Error::Program("program must end with END".into())),
        }
        if self.count(Opcode::End) != 1 {
            return Err(Error::Program("END may appear only once".into()));
        }
        let mut enabled = 0u32;
        let mut kind_set = false;
        for (pc, ins) in self.instructions.iter().enumerate().take(n - 1) {
            match *ins {
                Instruction::Config { op: Opcode::Ena, param, value } => {
                    if param != 0 {
                        return Err(Error::Program(format!("pc {pc}: ENA takes param 0")));
                    }
                    enabled = value;
                }
                Instruction::Config { param: param::LAYER_KIND, .. } => kind_set = true,
                Instruction::Command { op: op @ (Opcode::Proc | Opcode::Lin), modules } => {
                    if !kind_set {
                        return Err(Error::Program(format!("pc {pc}: {} before any layer configuration", op.mnemonic())));
                    }
                    if modules == 0 || modules & !enabled != 0 {
                        return Err(Error::Program(format!(
                            "pc {pc}: {} selects modules {modules:#x} but only {enabled:#x} are enabled",
                            op.mnemonic()
                        )));
                    }
                }
                Instruction::Memory { op, dir, .. } => {
                    let want = if op == Opcode::Acts { Direction::Store } else { Direction::Load };
                    if dir != want {
                        return Err(Error::Program(format!("pc {pc}: {} with direction {dir:?}", op.mnemonic())));
                    }
                }
                Instruction::Wait { condition, .. } if condition != cond::MODULE_IDLE && condition != cond::ALL_IDLE => {
                    return Err(Error::Program(format!("pc {pc}: unknown wait condition {condition}")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Binary container: magic, version, reserved, word count, then words,
    /// all little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let words = self.words()?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * words.len());
        out.extend_from_slice(&PROGRAM_MAGIC);
        out.extend_from_slice(&PROGRAM_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(words.len() as u32).to_le_bytes());
        for w in words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || bytes[..4] != PROGRAM_MAGIC {
            return Err(Error::Parse("not a program file (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != PROGRAM_VERSION {
            return Err(Error::Parse(format!("unsupported program version {version}")));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 4 * count {
            return Err(Error::Parse(format!("header announces {count} words, file holds {} bytes", body.len())));
        }
        let words: Vec<u32> = body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_words(&words)
    }
}

pub fn write_program(program: &Program, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, program.to_bytes()?)?;
    Ok(())
}

pub fn read_program(path: impl AsRef<Path>) -> Result<Program> {
    Program::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::mem;

    fn tiny() -> Program {
        Program::new(vec![
            Instruction::conf(param::LAYER_KIND, param::KIND_CONV),
            Instruction::ena(1),
            Instruction::command(Opcode::Rst, 1),
            Instruction::memory(Opcode::Kerl, mem::WEIGHTS, 0),
            Instruction::memory(Opcode::Actl, mem::PING2D, 0),
            Instruction::command(Opcode::Proc, 1),
            Instruction::wait(0),
            Instruction::memory(Opcode::Acts, mem::OUTPUT, 0),
            Instruction::end(),
        ])
    }

    #[test]
    fn bytes_roundtrip() {
        let p = tiny();
        let bytes = p.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SNNP");
        assert_eq!(Program::from_bytes(&bytes).unwrap(), p);
    }

    #[test]
    fn validation() {
        tiny().validate().unwrap();
        let mut p = tiny();
        p.instructions.pop();
        assert!(p.validate().is_err());
        let mut p = tiny();
        p.instructions.remove(1);
        assert!(p.validate().is_err());
    }

    #[test]
    fn illegal_word_reports_index() {
        let err = Program::from_words(&[5 << 27, 31 << 27]).unwrap_err();
        assert!(matches!(err, Error::IllegalOpcode { opcode: 31, index: Some(1) }));
    }
}
