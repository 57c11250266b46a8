//! Compiler and cycle-level simulator for a radix-encoded spiking neural
//! network accelerator.
//!
//! The pipeline: load a float [`model::Network`], quantize it
//! ([`encoder`]), derive the virtual hardware ([`planner`]), emit a 32-bit
//! instruction stream ([`codegen`], [`isa`]) and execute it on the
//! [`simulator`]. [`oracle`] holds slow reference implementations used for
//! calibration and for checking the simulator bit-exactly.

pub mod codegen;
pub mod design;
pub mod encoder;
pub mod error;
pub mod isa;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod planner;
pub mod simulator;
pub mod scalar;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Real;

/// Single-precision network (the on-disk parameter format).
pub type Network = model::Network<f32>;
/// Double-precision network, used where calibration wants headroom.
pub type Network64 = model::Network<f64>;
pub type Tensor = model::FloatTensor<f32>;
pub type Tensor64 = model::FloatTensor<f64>;
