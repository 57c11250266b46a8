//! Text assembly: one `MNEMONIC field=value ...` per line, `#` comments.

use std::fmt::Write;

use super::{mem, param, signed_to_value, value_to_signed, Category, Direction, Instruction, Opcode, Program};
use crate::error::{Error, Result};

fn default_dir(op: Opcode) -> Direction {
    if op == Opcode::Acts {
        Direction::Store
    } else {
        Direction::Load
    }
}

/// Renders one instruction.
pub fn format_instruction(ins: &Instruction) -> String {
    let op = ins.opcode();
    let mut s = op.mnemonic().to_string();
    match *ins {
        Instruction::Config { param: p, value, .. } => {
            if op == Opcode::Conf {
                match param::name(p) {
                    Some(n) => write!(s, " param={n}").unwrap(),
                    None => write!(s, " param={p}").unwrap(),
                }
            } else if p != 0 {
                write!(s, " param={p}").unwrap();
            }
            if op == Opcode::Ena {
                write!(s, " value={value:#x}").unwrap();
            } else if p == param::BIAS_VALUE {
                write!(s, " value={}", value_to_signed(value)).unwrap();
            } else {
                write!(s, " value={value}").unwrap();
            }
        }
        Instruction::Command { modules, .. } => {
            if op != Opcode::End || modules != 0 {
                write!(s, " modules={modules:#x}").unwrap();
            }
        }
        Instruction::Memory { mem: m, dir, addr, .. } => {
            match mem::name(m) {
                Some(n) => write!(s, " mem={n}").unwrap(),
                None => write!(s, " mem={m}").unwrap(),
            }
            if dir != default_dir(op) {
                let d = if dir == Direction::Store { "store" } else { "load" };
                write!(s, " dir={d}").unwrap();
            }
            write!(s, " addr={addr}").unwrap();
        }
        Instruction::Wait { module, condition } => {
            write!(s, " module={module}").unwrap();
            if condition != 0 {
                write!(s, " cond={condition}").unwrap();
            }
        }
    }
    s
}

pub fn disassemble(program: &Program) -> String {
    let mut out = String::new();
    for ins in &program.instructions {
        out.push_str(&format_instruction(ins));
        out.push('\n');
    }
    out
}

/// Listing with program counter and raw word in a trailing comment; still
/// valid assembler input.
pub fn disassemble_annotated(program: &Program) -> Result<String> {
    let mut out = String::new();
    for (pc, ins) in program.instructions.iter().enumerate() {
        let text = format_instruction(ins);
        writeln!(out, "{text:<40} # {pc:>7}  {:08x}", ins.encode()?).unwrap();
    }
    Ok(out)
}

fn parse_int(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(h, 16).ok()?
    } else if let Some(b) = body.strip_prefix("0b") {
        i64::from_str_radix(b, 2).ok()?
    } else {
        body.parse().ok()?
    };
    Some(if neg { -v } else { v })
}

fn parse_line(line: usize, text: &str) -> Result<Instruction> {
    let err = |msg: String| Error::Assembly { line, msg };
    let mut tokens = text.split_whitespace();
    let mnemonic = tokens.next().unwrap();
    let op = Opcode::from_mnemonic(mnemonic).ok_or_else(|| err(format!("unknown mnemonic `{mnemonic}`")))?;

    let mut fields: Vec<(&str, &str)> = Vec::new();
    for tok in tokens {
        let (k, v) = tok.split_once('=').ok_or_else(|| err(format!("expected field=value, got `{tok}`")))?;
        if fields.iter().any(|(seen, _)| seen.eq_ignore_ascii_case(k)) {
            return Err(err(format!("field `{k}` given twice")));
        }
        fields.push((k, v));
    }
    let allowed: &[&str] = match op.category() {
        Category::Config => &["param", "value"],
        Category::Command => &["modules"],
        Category::Memory => &["mem", "dir", "addr"],
        Category::Wait => &["module", "cond"],
    };
    if let Some((k, _)) = fields.iter().find(|(k, _)| !allowed.iter().any(|a| a.eq_ignore_ascii_case(k))) {
        return Err(err(format!("{} has no field `{k}`", op.mnemonic())));
    }
    let get = |name: &str| fields.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| *v);
    let num = |name: &str, v: &str| parse_int(v).ok_or_else(|| err(format!("bad number `{v}` for {name}")));
    let unsigned = |name: &str, v: &str| -> Result<u32> {
        let n = num(name, v)?;
        u32::try_from(n).map_err(|_| err(format!("{name} out of range: {n}")))
    };

    let ins = match op.category() {
        Category::Config => {
            let p = match get("param") {
                None => 0,
                Some(v) => match param::from_name(v) {
                    Some(id) => id,
                    None => u8::try_from(num("param", v)?).map_err(|_| err(format!("param out of range: {v}")))?,
                },
            };
            let value = match get("value") {
                None => 0,
                Some(v) => {
                    let n = num("value", v)?;
                    if n < 0 {
                        signed_to_value(n).map_err(|e| err(e.to_string()))?
                    } else {
                        u32::try_from(n).map_err(|_| err(format!("value out of range: {n}")))?
                    }
                }
            };
            Instruction::Config { op, param: p, value }
        }
        Category::Command => Instruction::Command { op, modules: get("modules").map_or(Ok(0), |v| unsigned("modules", v))? },
        Category::Memory => {
            let m = match get("mem") {
                None => return Err(err(format!("{} needs mem=", op.mnemonic()))),
                Some(v) => match mem::from_name(v) {
                    Some(id) => id,
                    None => u8::try_from(num("mem", v)?).map_err(|_| err(format!("mem out of range: {v}")))?,
                },
            };
            let dir = match get("dir").map(str::to_ascii_lowercase).as_deref() {
                None => default_dir(op),
                Some("load") | Some("0") => Direction::Load,
                Some("store") | Some("1") => Direction::Store,
                Some(other) => return Err(err(format!("bad direction `{other}`"))),
            };
            Instruction::Memory { op, mem: m, dir, addr: get("addr").map_or(Ok(0), |v| unsigned("addr", v))? }
        }
        Category::Wait => {
            let module = get("module").map_or(Ok(0), |v| unsigned("module", v))?;
            Instruction::Wait {
                module: u8::try_from(module).map_err(|_| err(format!("module out of range: {module}")))?,
                condition: get("cond").map_or(Ok(0), |v| unsigned("cond", v))?,
            }
        }
    };
    // Catch field overflow here so the error carries the line number.
    ins.encode().map_err(|e| err(e.to_string()))?;
    Ok(ins)
}

pub fn assemble(text: &str) -> Result<Program> {
    let mut instructions = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let code = raw.split('#').next().unwrap().trim();
        if code.is_empty() {
            continue;
        }
        instructions.push(parse_line(i + 1, code)?);
    }
    Ok(Program::new(instructions))
}
