use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the compile / simulate pipeline.
///
/// Each variant belongs to one error class (see [`Error::class`]); the CLI
/// maps classes to stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("layer {layer} has no parameter tensor")]
    MissingParams { layer: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("all weights are zero, radix point is undefined")]
    DegenerateWeights,

    #[error("calibration set is empty")]
    EmptyCalibrationSet,

    #[error("input value {value} at index {index} is negative")]
    NegativeInput { index: usize, value: f64 },

    #[error("input radix point {r_act} leaves no representable levels")]
    DegenerateInputScale { r_act: i32 },

    #[error("layer {layer}: requantization would need a left shift ({shift})")]
    NegativeShift { layer: usize, shift: i32 },

    #[error("plan error: {0}")]
    Plan(String),

    #[error("on-chip capacity exceeded: need {required} bits, have {available}")]
    Capacity { required: u64, available: u64 },

    #[error("field `{field}` value {value} does not fit in {bits} bits")]
    FieldOverflow { field: &'static str, value: u64, bits: u32 },

    #[error("illegal opcode {opcode:#07b}{}", index.map(|i| format!(" at word {i}")).unwrap_or_default())]
    IllegalOpcode { opcode: u32, index: Option<usize> },

    #[error("assembly error on line {line}: {msg}")]
    Assembly { line: usize, msg: String },

    #[error("malformed program: {0}")]
    Program(String),

    #[error("codegen error: {0}")]
    Codegen(String),

    #[error("simulator fault at cycle {cycle}, pc {pc}: {reason}")]
    SimFault { cycle: u64, pc: usize, reason: String },

    #[error("layer {layer}: partial sum {value} exceeds {bits}-bit accumulator")]
    PsumOverflow { layer: usize, value: i64, bits: u32 },

    #[error("verification failed: {0}")]
    Mismatch(String),
}

/// Coarse error classes with stable numeric codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io = 1,
    Parse = 3,
    Shape = 4,
    Encoding = 5,
    Plan = 6,
    Isa = 7,
    Codegen = 8,
    Simulation = 9,
    Verification = 10,
    Config = 11,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Io(_) => ErrorClass::Io,
            Parse(_) => ErrorClass::Parse,
            Shape(_) | MissingParams { .. } => ErrorClass::Shape,
            Config(_) => ErrorClass::Config,
            DegenerateWeights
            | EmptyCalibrationSet
            | NegativeInput { .. }
            | DegenerateInputScale { .. }
            | NegativeShift { .. } => ErrorClass::Encoding,
            Plan(_) | Capacity { .. } => ErrorClass::Plan,
            FieldOverflow { .. } | IllegalOpcode { .. } | Assembly { .. } | Program(_) => {
                ErrorClass::Isa
            }
            Codegen(_) => ErrorClass::Codegen,
            SimFault { .. } | PsumOverflow { .. } => ErrorClass::Simulation,
            Mismatch(_) => ErrorClass::Verification,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class() as i32
    }
}
